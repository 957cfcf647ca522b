//! Small shared layer types: linear, layer norm, conv wrappers, batch norm
//! with running statistics, and parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ops, Elem, Tape, Tensor};

/// Visitor over named parameter tensors. `trainable` is false for batch-norm
/// running statistics, which are serialized but never optimized.
pub type ParamFn<'a, T> = dyn FnMut(&str, &mut Tensor<T>, bool) + 'a;

pub trait ParamVisit<T: Elem> {
    fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>);

    /// Register every trainable parameter on a fresh tape.
    fn attach(&mut self, tape: &Tape<T>) {
        self.visit("", &mut |_, t, trainable| {
            if trainable {
                *t = tape.watch(t);
            }
        });
    }

    /// Drop all tape links.
    fn detach_params(&mut self) {
        self.visit("", &mut |_, t, _| {
            *t = t.detach();
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, trainable| {
            if trainable {
                n += t.len();
            }
        });
        n
    }
}

/// Standard normal via Box-Muller.
fn randn(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-12 {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Truncated normal: resample outside two standard deviations.
pub fn trunc_normal<T: Elem>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let mut v = randn(rng);
            while v.abs() > 2.0 {
                v = randn(rng);
            }
            T::of_f64(v * std)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// Fan-in uniform init for convolution kernels.
pub fn kaiming_uniform<T: Elem>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// Fully connected layer; weight layout is `in x out`.
pub struct Linear<T: Elem> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Elem> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: trunc_normal(&[in_dim, out_dim], 0.02, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    /// Applies to the last axis of x.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let in_dim = self.w.shape()[0];
        let out_dim = self.w.shape()[1];
        let rows = x.len() / in_dim;
        let flat = x.reshape(&[rows, in_dim])?;
        let y = ops::add_bias(&ops::matmul(&flat, &self.w)?, &self.b)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_dim;
        y.reshape(&shape)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.w"), &mut self.w, true);
        f(&format!("{prefix}.b"), &mut self.b, true);
    }
}

pub struct LayerNorm<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

impl<T: Elem> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            eps: T::of_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma, true);
        f(&format!("{prefix}.beta"), &mut self.beta, true);
    }
}

/// Square-kernel convolution layer.
pub struct Conv2d<T: Elem> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2d {
            w: kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.w"), &mut self.w, true);
        f(&format!("{prefix}.b"), &mut self.b, true);
    }
}

/// Batch normalization with running statistics (momentum 0.1).
pub struct BatchNorm<T: Elem> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: f64,
}

impl<T: Elem> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
            eps: T::of_f64(1e-5),
            momentum: 0.1,
        }
    }

    /// Training forward: batch statistics, updates running stats in place.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, mean, var) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
        let m = T::of_f64(self.momentum);
        let keep = T::one() - m;
        {
            let rm = self.running_mean.data_mut();
            for (r, &v) in rm.iter_mut().zip(&mean) {
                *r = keep * *r + m * v;
            }
        }
        {
            let rv = self.running_var.data_mut();
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = keep * *r + m * v;
            }
        }
        Ok(y)
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_infer(
            x,
            &self.running_mean,
            &self.running_var,
            &self.gamma,
            &self.beta,
            self.eps,
        )
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma, true);
        f(&format!("{prefix}.beta"), &mut self.beta, true);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean, false);
        f(&format!("{prefix}.running_var"), &mut self.running_var, false);
    }
}
