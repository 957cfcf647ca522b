//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the model needs: convolution, bilinear
//! upsampling, max pooling, a restricted elementwise/broadcast family,
//! softmax, normalization layers, batched matmul, and index remapping for
//! all layout shuffles (window partition, rolls, permutes). Everything is
//! deterministic: reductions run in a fixed order, so two runs on identical
//! inputs are bit-identical.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Grads, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use tape::TapeHandle;

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Elem:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Cloning is cheap (shared storage); mutation goes
/// through [`Tensor::data_mut`] which copies on write.
#[derive(Clone)]
pub struct Tensor<T: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    tape: Option<(TapeHandle<T>, usize)>,
}

impl<T: Elem> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            tape: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
            tape: None,
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            tape: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the underlying buffer. Copies if the storage is
    /// shared. Must not be called on a taped tensor (the tape holds the
    /// forward values).
    pub fn data_mut(&mut self) -> &mut [T] {
        assert!(self.tape.is_none(), "cannot mutate a taped tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn storage(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn tape_link(&self) -> Option<(TapeHandle<T>, usize)> {
        self.tape.clone()
    }

    pub(crate) fn with_tape(mut self, handle: TapeHandle<T>, node: usize) -> Self {
        self.tape = Some((handle, node));
        self
    }

    /// Node id on the tape, if this tensor is being recorded.
    pub fn tape_id(&self) -> Option<usize> {
        self.tape.as_ref().map(|(_, id)| *id)
    }

    /// Same storage, no tape linkage.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            tape: None,
        }
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape
            )));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            tape: None,
        };
        if let Some((handle, id)) = &self.tape {
            let src_len = self.data.len();
            let src_id = *id;
            let node = handle.push_node(vec![src_id], {
                Box::new(move |go: &[T], grads: &mut Grads<T>| {
                    grads.add_assign(src_id, src_len, |gx| {
                        for (g, &d) in gx.iter_mut().zip(go) {
                            *g += d;
                        }
                    });
                })
            });
            Ok(out.with_tape(handle.clone(), node))
        } else {
            Ok(out)
        }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
            tape: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}
