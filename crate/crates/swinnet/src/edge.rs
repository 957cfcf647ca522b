//! Edge-aware feature extraction from the three shallowest fused levels.
//!
//! Each of the first three appearance-stream features is reduced by a 1x1
//! convolution to a common branch width; the two coarser branches are
//! bilinearly upsampled to the finest grid and the three are concatenated
//! into f_e. A 3x3 conv + batch-norm + relu block scores f_e, a channel
//! gate is read off its global max pool, and the refined edge feature is
//!
//!   F'_e = f_e * CA + f_e
//!
//! so the gate amplifies rather than replaces the raw edge evidence.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ParamFn, ParamVisit};
use crate::tensor::{ops, Elem, Tensor};

pub struct EdgeModule<T: Elem> {
    /// per-level widths of the incoming features (levels 1..3)
    pub in_dims: [usize; 3],
    /// width of each reduced branch; concat width is 3x this
    pub branch: usize,
    pub reduce: [Conv2d<T>; 3],
    pub refine_conv: Conv2d<T>,
    pub refine_bn: BatchNorm<T>,
    pub ca_conv: Conv2d<T>,
}

impl<T: Elem> EdgeModule<T> {
    pub fn new(in_dims: [usize; 3], branch: usize, rng: &mut ChaCha8Rng) -> Self {
        let ce = 3 * branch;
        EdgeModule {
            in_dims,
            branch,
            reduce: [
                Conv2d::new(in_dims[0], branch, 1, 1, 0, rng),
                Conv2d::new(in_dims[1], branch, 1, 1, 0, rng),
                Conv2d::new(in_dims[2], branch, 1, 1, 0, rng),
            ],
            refine_conv: Conv2d::new(ce, ce, 3, 1, 1, rng),
            refine_bn: BatchNorm::new(ce),
            ca_conv: Conv2d::new(ce, ce, 1, 1, 0, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        3 * self.branch
    }

    /// Reduce + upsample + concat the three shallow levels into f_e.
    pub fn gather(&self, f1: &Tensor<T>, f2: &Tensor<T>, f3: &Tensor<T>) -> Result<Tensor<T>> {
        for (f, d) in [f1, f2, f3].iter().zip(self.in_dims) {
            if f.shape().len() != 4 || f.shape()[1] != d {
                return Err(Error::invalid(format!(
                    "edge input expected {d} channels, got {:?}",
                    f.shape()
                )));
            }
        }
        let b1 = self.reduce[0].forward(f1)?;
        let b2 = ops::bilinear_upsample(&self.reduce[1].forward(f2)?, 2)?;
        let b3 = ops::bilinear_upsample(&self.reduce[2].forward(f3)?, 4)?;
        if b2.shape() != b1.shape() || b3.shape() != b1.shape() {
            return Err(Error::invalid(
                "edge branches disagree on spatial extent after upsampling",
            ));
        }
        ops::concat_channels(&[&b1, &b2, &b3])
    }

    /// Channel-gated refinement of f_e.
    pub fn refine(&mut self, f_e: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let scored = self.refine_conv.forward(f_e)?;
        let scored = if train {
            self.refine_bn.forward_train(&scored)?
        } else {
            self.refine_bn.forward_infer(&scored)?
        };
        let scored = ops::relu(&scored)?;
        let pooled = ops::global_max_pool_spatial(&scored)?;
        let ca = ops::sigmoid(&self.ca_conv.forward(&pooled)?)?;
        let gated = ops::mul(&ca, f_e)?;
        ops::add(&gated, f_e)
    }

    pub fn forward(
        &mut self,
        f1: &Tensor<T>,
        f2: &Tensor<T>,
        f3: &Tensor<T>,
        train: bool,
    ) -> Result<Tensor<T>> {
        let f_e = self.gather(f1, f2, f3)?;
        self.refine(&f_e, train)
    }
}

impl<T: Elem> ParamVisit<T> for EdgeModule<T> {
    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        for (i, conv) in self.reduce.iter_mut().enumerate() {
            conv.visit(&format!("{prefix}reduce{}", i + 1), f);
        }
        self.refine_conv.visit(&format!("{prefix}refine_conv"), f);
        self.refine_bn.visit(&format!("{prefix}refine_bn"), f);
        self.ca_conv.visit(&format!("{prefix}ca_conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(13)
    }

    fn randt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        trunc_normal(shape, 1.0, r)
    }

    fn toy_inputs(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            randt(&[1, 32, 24, 24], r),
            randt(&[1, 64, 12, 12], r),
            randt(&[1, 128, 6, 6], r),
        )
    }

    #[test]
    fn toy_output_shape() {
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([32, 64, 128], 8, &mut r);
        let (f1, f2, f3) = toy_inputs(&mut r);
        let y = m.forward(&f1, &f2, &f3, false).unwrap();
        assert_eq!(y.shape(), &[1, 24, 24, 24]);
    }

    #[test]
    fn zero_input_is_fixed_point() {
        // zero-bias convs on zero input give zero branches, and the gate
        // multiplies zero, so the output stays exactly zero
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        for conv in m.reduce.iter_mut() {
            conv.b = Tensor::zeros(&[2]);
        }
        let f1 = Tensor::<f64>::zeros(&[1, 4, 8, 8]);
        let f2 = Tensor::<f64>::zeros(&[1, 8, 4, 4]);
        let f3 = Tensor::<f64>::zeros(&[1, 16, 2, 2]);
        let y = m.forward(&f1, &f2, &f3, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_weights_scale_by_three_halves() {
        // sigmoid(0) = 0.5 -> F'_e = 0.5*f_e + f_e = 1.5*f_e exactly
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        m.ca_conv.w = Tensor::zeros(&[6, 6, 1, 1]);
        m.ca_conv.b = Tensor::zeros(&[6]);
        let f1 = randt(&[1, 4, 8, 8], &mut r);
        let f2 = randt(&[1, 8, 4, 4], &mut r);
        let f3 = randt(&[1, 16, 2, 2], &mut r);
        let f_e = m.gather(&f1, &f2, &f3).unwrap();
        let y = m.refine(&f_e, false).unwrap();
        for (a, b) in y.data().iter().zip(f_e.data()) {
            assert_eq!(*a, 1.5 * b);
        }
    }

    #[test]
    fn refinement_magnitude_between_one_and_two_times() {
        // out = f_e * (1 + ca) with ca in (0,1)
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        let f1 = randt(&[2, 4, 8, 8], &mut r);
        let f2 = randt(&[2, 8, 4, 4], &mut r);
        let f3 = randt(&[2, 16, 2, 2], &mut r);
        let f_e = m.gather(&f1, &f2, &f3).unwrap();
        let y = m.refine(&f_e, false).unwrap();
        for (a, b) in y.data().iter().zip(f_e.data()) {
            assert!(a.abs() >= b.abs() - 1e-15);
            assert!(a.abs() <= 2.0 * b.abs() + 1e-15);
        }
    }

    #[test]
    fn gather_matches_composed_oracle() {
        let mut r = rng();
        let m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        let f1 = randt(&[1, 4, 8, 8], &mut r);
        let f2 = randt(&[1, 8, 4, 4], &mut r);
        let f3 = randt(&[1, 16, 2, 2], &mut r);
        let got = m.gather(&f1, &f2, &f3).unwrap();
        let b1 = m.reduce[0].forward(&f1).unwrap();
        let b2 = ops::bilinear_upsample(&m.reduce[1].forward(&f2).unwrap(), 2).unwrap();
        let b3 = ops::bilinear_upsample(&m.reduce[2].forward(&f3).unwrap(), 4).unwrap();
        let want = ops::concat_channels(&[&b1, &b2, &b3]).unwrap();
        assert_eq!(got.data(), want.data());
        assert_eq!(got.shape(), &[1, 6, 8, 8]);
    }

    #[test]
    fn rejects_wrong_channel_counts() {
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        let f1 = Tensor::<f64>::ones(&[1, 5, 8, 8]);
        let f2 = Tensor::<f64>::ones(&[1, 8, 4, 4]);
        let f3 = Tensor::<f64>::ones(&[1, 16, 2, 2]);
        assert!(m.forward(&f1, &f2, &f3, false).is_err());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut r = rng();
        let mut m = EdgeModule::<f64>::new([4, 8, 16], 2, &mut r);
        let before = m.refine_bn.running_var.data().to_vec();
        let f1 = randt(&[2, 4, 8, 8], &mut r);
        let f2 = randt(&[2, 8, 4, 4], &mut r);
        let f3 = randt(&[2, 16, 2, 2], &mut r);
        m.forward(&f1, &f2, &f3, true).unwrap();
        assert_ne!(m.refine_bn.running_var.data(), before.as_slice());
    }
}
