use std::sync::{Arc, Mutex};

use super::{Elem, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &mut Grads<T>) + Send + Sync>;

pub(crate) struct TapeInner<T> {
    nodes: Mutex<Vec<BackwardFn<T>>>,
}

pub(crate) type TapeHandle<T> = Arc<TapeInner<T>>;

impl<T: Elem> TapeInner<T> {
    pub fn push_node(&self, _inputs: Vec<usize>, backward: BackwardFn<T>) -> usize {
        let mut nodes = self.nodes.lock().unwrap();
        nodes.push(backward);
        nodes.len() - 1
    }
}

/// Gradient tape. Ops on watched tensors record one node per primitive, in
/// topological order; [`Tape::backward`] replays them in reverse. One tape
/// per training step, never shared across steps.
pub struct Tape<T: Elem> {
    inner: TapeHandle<T>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(TapeInner {
                nodes: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Register a tensor as a leaf and return the recorded view of it.
    /// Gradients accumulate under the returned tensor's node id.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        assert!(
            t.tape_link().is_none(),
            "tensor already participates in a tape"
        );
        let node = self.inner.push_node(Vec::new(), Box::new(|_, _| {}));
        t.detach().with_tape(Arc::clone(&self.inner), node)
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.nodes.lock().unwrap().len()
    }

    /// Reverse sweep from a scalar loss. Seeds dL/dL = 1 and returns the
    /// accumulated gradient per node id.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Grads<T>> {
        if loss.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let (handle, loss_id) = loss
            .tape_link()
            .ok_or_else(|| Error::invalid("loss is not recorded on a tape"))?;
        if !Arc::ptr_eq(&handle, &self.inner) {
            return Err(Error::invalid("loss was recorded on a different tape"));
        }
        let nodes = self.inner.nodes.lock().unwrap();
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
        };
        grads.slots[loss_id] = Some(vec![T::one()]);
        for id in (0..=loss_id).rev() {
            if let Some(g) = grads.slots[id].take() {
                (nodes[id])(&g, &mut grads);
                grads.slots[id] = Some(g);
            }
        }
        Ok(grads)
    }
}

/// Accumulated gradients keyed by tape node id.
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, node: usize) -> Option<&[T]> {
        self.slots.get(node).and_then(|s| s.as_deref())
    }

    /// Gradient for a watched tensor; zeros if it was unreachable from the loss.
    pub fn for_tensor(&self, t: &Tensor<T>) -> Result<Vec<T>> {
        let id = t
            .tape_id()
            .ok_or_else(|| Error::invalid("tensor is not on the tape"))?;
        Ok(match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); t.len()],
        })
    }

    /// Accumulate into the slot for `node`, creating a zeroed buffer of
    /// `len` on first touch.
    pub fn add_assign(&mut self, node: usize, len: usize, f: impl FnOnce(&mut [T])) {
        let slot = &mut self.slots[node];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
        debug_assert_eq!(buf.len(), len);
        f(buf);
    }
}
