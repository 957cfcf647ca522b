//! Top-down decoder over the fused pyramid, with an edge-guided head.
//!
//! Per level, the two modality features are combined into a double-width
//! map by stacking their sum and their product:
//!
//!   F_i = concat(f_d + f_c, f_d * f_c)
//!
//! Decoding starts at the deepest level (FF_4 = F_4) and walks upward:
//!
//!   FF_i = F_i + conv3x3(up2(FF_{i+1}))
//!
//! with plain convolutions (no norm or activation) adapting widths. The
//! saliency head concatenates the refined edge feature with FF_1, scores
//! it with a 3x3 conv to one channel, and upsamples 4x back to image
//! resolution; an auxiliary head scores the edge feature alone. Both heads
//! emit logits.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamFn, ParamVisit};
use crate::tensor::{ops, Elem, Tensor};

pub struct Decoder<T: Elem> {
    /// single-modality widths C_1..C_4; fused maps carry 2*C_i channels
    pub dims: [usize; 4],
    /// channels of the refined edge feature, 0 when the edge path is off
    pub edge_dim: usize,
    /// agg[i]: 2*C_{i+2} -> 2*C_{i+1} for i = 0..3 (adapts level i+2 to i+1)
    pub agg: [Conv2d<T>; 3],
    pub s_head: Conv2d<T>,
    pub se_head: Option<Conv2d<T>>,
}

/// Combine the two modality features of one level: sum branch stacked on
/// the product branch.
pub fn fuse_modalities<T: Elem>(f_c: &Tensor<T>, f_d: &Tensor<T>) -> Result<Tensor<T>> {
    if f_c.shape() != f_d.shape() {
        return Err(Error::invalid(format!(
            "fuse expects matching shapes, got {:?} vs {:?}",
            f_c.shape(),
            f_d.shape()
        )));
    }
    let s = ops::add(f_d, f_c)?;
    let p = ops::mul(f_d, f_c)?;
    ops::concat_channels(&[&s, &p])
}

impl<T: Elem> Decoder<T> {
    pub fn new(dims: [usize; 4], edge_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let agg = [
            Conv2d::new(2 * dims[1], 2 * dims[0], 3, 1, 1, rng),
            Conv2d::new(2 * dims[2], 2 * dims[1], 3, 1, 1, rng),
            Conv2d::new(2 * dims[3], 2 * dims[2], 3, 1, 1, rng),
        ];
        let s_head = Conv2d::new(2 * dims[0] + edge_dim, 1, 3, 1, 1, rng);
        let se_head = (edge_dim > 0).then(|| Conv2d::new(edge_dim, 1, 3, 1, 1, rng));
        Decoder {
            dims,
            edge_dim,
            agg,
            s_head,
            se_head,
        }
    }

    /// Top-down aggregation; returns the finest refined map FF_1.
    /// With `aggregate` off the deeper levels are ignored and FF_1 = F_1.
    pub fn decode(&self, fused: &[Tensor<T>; 4], aggregate: bool) -> Result<Tensor<T>> {
        for (i, f) in fused.iter().enumerate() {
            if f.shape().len() != 4 || f.shape()[1] != 2 * self.dims[i] {
                return Err(Error::invalid(format!(
                    "fused level {} expected {} channels, got {:?}",
                    i + 1,
                    2 * self.dims[i],
                    f.shape()
                )));
            }
        }
        if !aggregate {
            return Ok(fused[0].clone());
        }
        let mut ff = fused[3].clone();
        for i in (0..3).rev() {
            let up = ops::bilinear_upsample(&ff, 2)?;
            let adapted = self.agg[i].forward(&up)?;
            ff = ops::add(&fused[i], &adapted)?;
        }
        Ok(ff)
    }

    /// Score FF_1 (optionally stacked with the edge feature) and upsample
    /// both logits maps back to image resolution.
    pub fn heads(
        &self,
        ff1: &Tensor<T>,
        edge: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let s_logits = match (edge, &self.se_head) {
            (Some(e), Some(_)) => {
                if e.shape()[1] != self.edge_dim {
                    return Err(Error::invalid(format!(
                        "edge feature expected {} channels, got {:?}",
                        self.edge_dim,
                        e.shape()
                    )));
                }
                let stacked = ops::concat_channels(&[e, ff1])?;
                self.s_head.forward(&stacked)?
            }
            (None, None) => self.s_head.forward(ff1)?,
            _ => {
                return Err(Error::invalid(
                    "edge feature presence does not match decoder configuration",
                ))
            }
        };
        let s = ops::bilinear_upsample(&s_logits, 4)?;
        let se = match (edge, &self.se_head) {
            (Some(e), Some(head)) => Some(ops::bilinear_upsample(&head.forward(e)?, 4)?),
            _ => None,
        };
        Ok((s, se))
    }

    pub fn forward(
        &self,
        fused: &[Tensor<T>; 4],
        edge: Option<&Tensor<T>>,
        aggregate: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let ff1 = self.decode(fused, aggregate)?;
        self.heads(&ff1, edge)
    }
}

impl<T: Elem> ParamVisit<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        for (i, conv) in self.agg.iter_mut().enumerate() {
            conv.visit(&format!("{prefix}agg{}", i + 1), f);
        }
        self.s_head.visit(&format!("{prefix}s_head"), f);
        if let Some(head) = &mut self.se_head {
            head.visit(&format!("{prefix}se_head"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn randt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        trunc_normal(shape, 1.0, r)
    }

    const DIMS: [usize; 4] = [4, 8, 16, 32];

    fn fused_pyramid(r: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
        [
            randt(&[1, 8, 16, 16], r),
            randt(&[1, 16, 8, 8], r),
            randt(&[1, 32, 4, 4], r),
            randt(&[1, 64, 2, 2], r),
        ]
    }

    #[test]
    fn fuse_stacks_sum_then_product() {
        let mut r = rng();
        let a = randt(&[1, 3, 2, 2], &mut r);
        let b = randt(&[1, 3, 2, 2], &mut r);
        let f = fuse_modalities(&a, &b).unwrap();
        assert_eq!(f.shape(), &[1, 6, 2, 2]);
        for i in 0..12 {
            assert_eq!(f.data()[i], a.data()[i] + b.data()[i]);
            assert_eq!(f.data()[12 + i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn deepest_level_passes_through_untouched() {
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 6, &mut r);
        let fused = fused_pyramid(&mut r);
        // replay the first aggregation step by hand: its input must be F_4 itself
        let up = ops::bilinear_upsample(&fused[3], 2).unwrap();
        let adapted = dec.agg[2].forward(&up).unwrap();
        let ff3 = ops::add(&fused[2], &adapted).unwrap();
        let up2 = ops::bilinear_upsample(&ff3, 2).unwrap();
        let adapted2 = dec.agg[1].forward(&up2).unwrap();
        let ff2 = ops::add(&fused[1], &adapted2).unwrap();
        let up1 = ops::bilinear_upsample(&ff2, 2).unwrap();
        let adapted1 = dec.agg[0].forward(&up1).unwrap();
        let want = ops::add(&fused[0], &adapted1).unwrap();
        let got = dec.decode(&fused, true).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn aggregation_is_affine_in_the_deepest_level() {
        // with fixed F_1..F_3, the map F_4 -> FF_1 is affine:
        // f(x+y) - f(y) = f(x) - f(0)
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 0, &mut r);
        let mut fused = fused_pyramid(&mut r);
        let x = randt(&[1, 64, 2, 2], &mut r);
        let y = randt(&[1, 64, 2, 2], &mut r);

        let mut eval = |f4: Tensor<f64>| {
            fused[3] = f4;
            dec.decode(&fused, true).unwrap()
        };
        let f_xy = eval(ops::add(&x, &y).unwrap());
        let f_y = eval(y.clone());
        let f_x = eval(x.clone());
        let f_0 = eval(Tensor::zeros(&[1, 64, 2, 2]));
        for i in 0..f_x.len() {
            let lhs = f_xy.data()[i] - f_y.data()[i];
            let rhs = f_x.data()[i] - f_0.data()[i];
            assert!((lhs - rhs).abs() < 1e-9, "affinity violated at {i}");
        }
    }

    #[test]
    fn no_aggregation_returns_finest_level() {
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 0, &mut r);
        let fused = fused_pyramid(&mut r);
        let got = dec.decode(&fused, false).unwrap();
        assert_eq!(got.data(), fused[0].data());
    }

    #[test]
    fn heads_restore_image_resolution() {
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 6, &mut r);
        let fused = fused_pyramid(&mut r);
        let edge = randt(&[1, 6, 16, 16], &mut r);
        let (s, se) = dec.forward(&fused, Some(&edge), true).unwrap();
        assert_eq!(s.shape(), &[1, 1, 64, 64]);
        assert_eq!(se.unwrap().shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn edgeless_decoder_has_single_head() {
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 0, &mut r);
        let fused = fused_pyramid(&mut r);
        let (s, se) = dec.forward(&fused, None, true).unwrap();
        assert_eq!(s.shape(), &[1, 1, 64, 64]);
        assert!(se.is_none());
        // supplying an edge feature to an edgeless decoder is an error
        let edge = randt(&[1, 6, 16, 16], &mut r);
        assert!(dec.forward(&fused, Some(&edge), true).is_err());
    }

    #[test]
    fn rejects_wrong_fused_widths() {
        let mut r = rng();
        let dec = Decoder::<f64>::new(DIMS, 0, &mut r);
        let mut fused = fused_pyramid(&mut r);
        fused[1] = Tensor::ones(&[1, 15, 8, 8]);
        assert!(dec.decode(&fused, true).is_err());
    }
}
