//! Cross-modality feature re-calibration at one pyramid level.
//!
//! Both modality features are first attended spatially by a map computed
//! from their elementwise agreement, then each stream is re-weighted per
//! channel, and the channel weights gate the original (pre-spatial) feature:
//!
//!   SA      = sigmoid(conv3x3(chanmax(st_c * st_d)))
//!   ST1_m   = SA * ST_m
//!   CA_m    = sigmoid(conv1x1(gmp(ST1_m)))
//!   F_m     = CA_m * ST_m
//!
//! The two 1x1/3x3 convolutions are shared between modalities: one spatial
//! scorer and one channel scorer per level.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamFn, ParamVisit};
use crate::tensor::{ops, Elem, Tensor};

pub struct Sacr<T: Elem> {
    pub dim: usize,
    /// 3x3, 1 -> 1 channel, on the channel-max map.
    pub sa_conv: Conv2d<T>,
    /// 1x1, C -> C, on globally max-pooled features; shared by both streams.
    pub ca_conv: Conv2d<T>,
}

/// Intermediate and final products of one fusion step, kept for inspection.
pub struct SacrState<T: Elem> {
    pub sa_map: Tensor<T>,
    pub st1_c: Tensor<T>,
    pub st1_d: Tensor<T>,
    pub ca_c: Tensor<T>,
    pub ca_d: Tensor<T>,
    pub f_c: Tensor<T>,
    pub f_d: Tensor<T>,
}

impl<T: Elem> Sacr<T> {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Sacr {
            dim,
            sa_conv: Conv2d::new(1, 1, 3, 1, 1, rng),
            ca_conv: Conv2d::new(dim, dim, 1, 1, 0, rng),
        }
    }

    /// Shared spatial attention map from the two modality features.
    pub fn spatial_attention(&self, st_c: &Tensor<T>, st_d: &Tensor<T>) -> Result<Tensor<T>> {
        if st_c.shape() != st_d.shape() {
            return Err(Error::invalid(format!(
                "modality shapes differ: {:?} vs {:?}",
                st_c.shape(),
                st_d.shape()
            )));
        }
        let joint = ops::mul(st_c, st_d)?;
        let pooled = ops::channel_max_pool(&joint)?;
        let scored = self.sa_conv.forward(&pooled)?;
        ops::sigmoid(&scored)
    }

    /// Per-channel gate from a spatially attended feature.
    pub fn channel_attention(&self, st1: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = ops::global_max_pool_spatial(st1)?;
        let scored = self.ca_conv.forward(&pooled)?;
        ops::sigmoid(&scored)
    }

    /// Full fusion step for one level.
    pub fn forward(&self, st_c: &Tensor<T>, st_d: &Tensor<T>) -> Result<SacrState<T>> {
        if st_c.shape().len() != 4 || st_c.shape()[1] != self.dim {
            return Err(Error::invalid(format!(
                "expected N,{},H,W features, got {:?}",
                self.dim,
                st_c.shape()
            )));
        }
        let sa_map = self.spatial_attention(st_c, st_d)?;
        let st1_c = ops::mul(&sa_map, st_c)?;
        let st1_d = ops::mul(&sa_map, st_d)?;
        let ca_c = self.channel_attention(&st1_c)?;
        let ca_d = self.channel_attention(&st1_d)?;
        let f_c = ops::mul(&ca_c, st_c)?;
        let f_d = ops::mul(&ca_d, st_d)?;
        Ok(SacrState {
            sa_map,
            st1_c,
            st1_d,
            ca_c,
            ca_d,
            f_c,
            f_d,
        })
    }

    /// Identity fallback used by the ablation that removes re-calibration:
    /// pass features through untouched, with neutral attention products.
    pub fn passthrough(&self, st_c: &Tensor<T>, st_d: &Tensor<T>) -> Result<SacrState<T>> {
        let s = st_c.shape();
        let ones_map = Tensor::ones(&[s[0], 1, s[2], s[3]]);
        let ones_ch = Tensor::ones(&[s[0], s[1], 1, 1]);
        Ok(SacrState {
            sa_map: ones_map,
            st1_c: st_c.clone(),
            st1_d: st_d.clone(),
            ca_c: ones_ch.clone(),
            ca_d: ones_ch,
            f_c: st_c.clone(),
            f_d: st_d.clone(),
        })
    }
}

impl<T: Elem> ParamVisit<T> for Sacr<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.sa_conv.visit(&format!("{prefix}sa_conv"), f);
        self.ca_conv.visit(&format!("{prefix}ca_conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn randt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        trunc_normal(shape, 1.0, r)
    }

    #[test]
    fn zero_weights_halve_the_input() {
        // sigmoid(0) = 0.5 everywhere, so F = 0.5 * ST exactly
        let mut r = rng();
        let mut m = Sacr::<f64>::new(3, &mut r);
        m.sa_conv.w = Tensor::zeros(&[1, 1, 3, 3]);
        m.sa_conv.b = Tensor::zeros(&[1]);
        m.ca_conv.w = Tensor::zeros(&[3, 3, 1, 1]);
        m.ca_conv.b = Tensor::zeros(&[3]);
        let a = randt(&[2, 3, 4, 4], &mut r);
        let b = randt(&[2, 3, 4, 4], &mut r);
        let st = m.forward(&a, &b).unwrap();
        for (y, x) in st.f_c.data().iter().zip(a.data()) {
            assert_eq!(*y, 0.5 * x);
        }
        for (y, x) in st.f_d.data().iter().zip(b.data()) {
            assert_eq!(*y, 0.5 * x);
        }
    }

    #[test]
    fn spatial_map_is_symmetric_in_modalities() {
        let mut r = rng();
        let m = Sacr::<f64>::new(4, &mut r);
        let a = randt(&[1, 4, 6, 6], &mut r);
        let b = randt(&[1, 4, 6, 6], &mut r);
        let sa_ab = m.spatial_attention(&a, &b).unwrap();
        let sa_ba = m.spatial_attention(&b, &a).unwrap();
        assert_eq!(sa_ab.data(), sa_ba.data());
    }

    #[test]
    fn gates_keep_magnitude_bounded() {
        // both gates are sigmoids, so |F| <= |ST| elementwise
        let mut r = rng();
        let m = Sacr::<f64>::new(5, &mut r);
        let a = randt(&[2, 5, 3, 3], &mut r);
        let b = randt(&[2, 5, 3, 3], &mut r);
        let st = m.forward(&a, &b).unwrap();
        for (y, x) in st.f_c.data().iter().zip(a.data()) {
            assert!(y.abs() <= x.abs() + 1e-15);
        }
        for (y, x) in st.f_d.data().iter().zip(b.data()) {
            assert!(y.abs() <= x.abs() + 1e-15);
        }
        for v in st.sa_map.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn matches_composed_primitive_oracle() {
        let mut r = rng();
        let m = Sacr::<f64>::new(3, &mut r);
        let a = randt(&[1, 3, 4, 4], &mut r);
        let b = randt(&[1, 3, 4, 4], &mut r);
        let st = m.forward(&a, &b).unwrap();

        let sa = ops::sigmoid(
            &m.sa_conv
                .forward(&ops::channel_max_pool(&ops::mul(&a, &b).unwrap()).unwrap())
                .unwrap(),
        )
        .unwrap();
        assert_eq!(st.sa_map.data(), sa.data());

        let st1_c = ops::mul(&sa, &a).unwrap();
        let ca_c = ops::sigmoid(
            &m.ca_conv
                .forward(&ops::global_max_pool_spatial(&st1_c).unwrap())
                .unwrap(),
        )
        .unwrap();
        // the channel gate multiplies the ORIGINAL feature, not ST1
        let f_c = ops::mul(&ca_c, &a).unwrap();
        assert_eq!(st.f_c.data(), f_c.data());
    }

    #[test]
    fn passthrough_is_identity() {
        let mut r = rng();
        let m = Sacr::<f64>::new(3, &mut r);
        let a = randt(&[1, 3, 4, 4], &mut r);
        let b = randt(&[1, 3, 4, 4], &mut r);
        let st = m.passthrough(&a, &b).unwrap();
        assert_eq!(st.f_c.data(), a.data());
        assert_eq!(st.f_d.data(), b.data());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut r = rng();
        let m = Sacr::<f64>::new(3, &mut r);
        let a = Tensor::<f64>::ones(&[1, 3, 4, 4]);
        let b = Tensor::<f64>::ones(&[1, 3, 5, 5]);
        assert!(m.forward(&a, &b).is_err());
    }

    #[test]
    fn gradients_flow_through_fusion() {
        use crate::tensor::grad_check;
        let mut r = rng();
        let m = Sacr::<f64>::new(2, &mut r);
        let b = randt(&[1, 2, 3, 3], &mut r);
        let a = randt(&[1, 2, 3, 3], &mut r);
        let err = grad_check(
            |t| {
                let st = m.forward(t, &b)?;
                let s = ops::add(&st.f_c, &st.f_d)?;
                ops::sum_all(&ops::mul(&s, &s)?)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }
}
