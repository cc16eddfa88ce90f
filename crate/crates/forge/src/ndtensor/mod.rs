//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; operations that participate in a
//! gradient computation record themselves on a [`Tape`]. The tape holds one
//! record per produced tensor in execution order, which is already a
//! topological order, so [`backward`] simply walks the records in reverse and
//! lets each one scatter gradient into its inputs. Gradients accumulate
//! additively at fan-out and across repeated `backward` calls until
//! [`Tape::zero_grad`] is called.
//!
//! The element type is generic: `f32` is the training default, `f64` is used
//! by the finite-difference gradient checker.

mod check;
mod checkpoint;
pub(crate) mod gemm;
mod nn;
mod ops;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Bytes per element in the checkpoint container.
    const WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shorthand conversion used throughout the numeric kernels.
#[inline]
pub(crate) fn s<S: Scalar>(v: f64) -> S {
    S::from_f64(v)
}

type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradBufs<S>)>;

struct Record<S: Scalar> {
    /// `None` for leaves; otherwise scatters the node's output gradient into
    /// the gradient buffers of its inputs.
    backward: Option<BackwardFn<S>>,
}

/// Per-node gradient accumulators, indexed by node id.
pub struct GradBufs<S: Scalar> {
    bufs: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> GradBufs<S> {
    /// Gradient slice for node `id`, allocated to `len` zeros on first touch.
    #[inline]
    pub fn acc(&mut self, id: usize, len: usize) -> &mut [S] {
        self.bufs[id].get_or_insert_with(|| vec![S::zero(); len])
    }
}

struct TapeInner<S: Scalar> {
    records: Vec<Record<S>>,
    grads: GradBufs<S>,
}

/// Gradient tape for one forward/backward cycle (single logical thread).
pub struct Tape<S: Scalar>(Rc<RefCell<TapeInner<S>>>);

impl<S: Scalar> Clone for Tape<S> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            records: Vec::new(),
            grads: GradBufs { bufs: Vec::new() },
        })))
    }

    /// Register a differentiable leaf (a parameter or input requiring grad).
    pub fn var(&self, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        let t = Tensor::from_vec(data, shape)?;
        let id = self.push(None);
        Ok(Tensor {
            node: Some(Node { tape: self.clone(), id }),
            ..t
        })
    }

    fn push(&self, backward: Option<BackwardFn<S>>) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.records.push(Record { backward });
        inner.grads.bufs.push(None);
        inner.records.len() - 1
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&self) {
        let mut inner = self.0.borrow_mut();
        for b in inner.grads.bufs.iter_mut() {
            *b = None;
        }
    }

    /// Accumulated gradient of `t`, as a tensor of the same shape.
    pub fn grad(&self, t: &Tensor<S>) -> Option<Tensor<S>> {
        let node = t.node.as_ref()?;
        debug_assert!(Rc::ptr_eq(&self.0, &node.tape.0), "tensor from another tape");
        let inner = self.0.borrow();
        let buf = inner.grads.bufs[node.id].as_ref()?;
        Some(Tensor {
            shape: t.shape.clone(),
            data: Arc::new(buf.clone()),
            node: None,
        })
    }

    fn same_as(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

struct Node<S: Scalar> {
    tape: Tape<S>,
    id: usize,
}

impl<S: Scalar> Clone for Node<S> {
    fn clone(&self) -> Self {
        Node { tape: self.tape.clone(), id: self.id }
    }
}

/// Dense N-dimensional array of real values, contiguous row-major.
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    node: Option<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

#[cfg(debug_assertions)]
fn assert_finite<S: Scalar>(data: &[S], op: &str) {
    for v in data {
        assert!(v.is_finite(), "{op} produced a non-finite value {v:?}");
    }
}

impl<S: Scalar> Tensor<S> {
    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); n]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::full(&[1], v)
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Tape shared by the given inputs, if any input is tracked.
    fn joint_tape(inputs: &[&Tensor<S>]) -> Result<Option<Tape<S>>> {
        let mut tape: Option<Tape<S>> = None;
        for t in inputs {
            if let Some(node) = &t.node {
                match &tape {
                    None => tape = Some(node.tape.clone()),
                    Some(existing) => {
                        if !existing.same_as(&node.tape) {
                            return Err(Error::Runtime(
                                "operation mixes tensors from two different tapes".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(tape)
    }

    /// Build an op result. `backward` receives the output gradient slice and
    /// the gradient buffers; it is recorded only if an input is tracked.
    pub(crate) fn make(
        out_data: Vec<S>,
        shape: Vec<usize>,
        inputs: &[&Tensor<S>],
        backward: impl Fn(&[S], &mut GradBufs<S>) + 'static,
        op: &str,
    ) -> Result<Tensor<S>> {
        #[cfg(debug_assertions)]
        assert_finite(&out_data, op);
        #[cfg(not(debug_assertions))]
        let _ = op;
        let tape = Tensor::joint_tape(inputs)?;
        let node = tape.map(|tape| {
            let id = tape.push(Some(Box::new(backward)));
            Node { tape, id }
        });
        Ok(Tensor {
            shape,
            data: Arc::new(out_data),
            node,
        })
    }

    /// Accumulated gradient of this tensor on its tape.
    pub fn grad(&self) -> Option<Tensor<S>> {
        self.node.as_ref().and_then(|n| n.tape.grad(self))
    }

    /// Drop gradient tracking (data is shared, not copied).
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }
}

/// Run reverse-mode differentiation from a scalar tensor.
///
/// Each call propagates a fresh unit gradient from the root; the results
/// accumulate into the leaf gradients held by the tape, so repeated calls
/// without [`Tape::zero_grad`] add up.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Shape(format!(
            "backward requires a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let node = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::Runtime("backward on a tensor with no tape".into()))?;
    let root = node.id;
    let inner_rc = Rc::clone(&node.tape.0);
    let mut inner = inner_rc.borrow_mut();

    // Transient per-pass gradients; seeded with d(loss)/d(loss) = 1.
    let mut pass = GradBufs {
        bufs: vec![None; inner.records.len()],
    };
    pass.acc(root, 1)[0] = S::one();

    let TapeInner { records, grads } = &mut *inner;
    for id in (0..=root).rev() {
        let Some(g) = pass.bufs[id].take() else {
            continue;
        };
        match records[id].backward.as_ref() {
            Some(f) => f(&g, &mut pass),
            // Leaf: fold this pass's gradient into the persistent buffer.
            None => {
                let acc = grads.acc(id, g.len());
                for (a, &b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_gradients() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![2.0], &[1]).unwrap();
        let y = tape.var(vec![5.0], &[1]).unwrap();
        let z = x.mul(&y).unwrap();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0]);
        assert_eq!(y.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn fanout_accumulates_exactly() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![1.5], &[1]).unwrap();
        let y = x.add(&x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        backward(&y).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[12.0]);
        tape.zero_grad();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.relu();
        assert!(backward(&y).is_err());
    }

    #[test]
    fn leaf_shapes_preserved_in_grads() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.var(vec![1.0; 12], &[3, 4]).unwrap();
        let y = x.sum_all();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().shape(), &[3, 4]);
    }
}
