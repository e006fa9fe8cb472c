//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a reference-counted
//! buffer of 64-bit floats plus a shape, and a [`Tape`] is a Wengert list of
//! executed operations. Running the tape backwards applies each operation's
//! vector-Jacobian product and accumulates gradients on every leaf that was
//! created with `requires_grad`.
//!
//! Contracts that the rest of the crate leans on:
//! - every operation validates shapes up front and returns a typed error
//!   instead of panicking;
//! - any operation that would produce a NaN or Inf from finite inputs fails
//!   immediately with the operation name (never silent propagation);
//! - leaf gradients accumulate across `backward` calls until `zero_grad`;
//!   intermediate gradients are reset at the start of each `backward`;
//! - identical inputs produce bit-identical outputs regardless of the rayon
//!   thread count (kernels partition work over disjoint output ranges and
//!   never reorder floating-point accumulation).

mod kernels;
mod ops;

pub mod gradcheck;

pub use ops::Op;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid dimension for shape {shape:?} ({msg})")]
    Dimension {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: contract violation ({msg})")]
    Contract { op: &'static str, msg: String },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Inner {
    id: u64,
    data: Rc<RefCell<Vec<f64>>>,
    shape: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Dense row-major f64 tensor. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::Dimension {
            op,
            shape: shape.to_vec(),
            msg: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, leaf: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Rc::new(RefCell::new(data)),
            shape,
            requires_grad,
            leaf,
        grad: RefCell::new(None),
        }))
    }

    /// Build a view sharing the same buffer under a different shape.
    fn view(&self, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: Rc::clone(&self.0.data),
            shape,
            requires_grad,
            leaf: false,
            grad: RefCell::new(None),
        }))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = check_shape("from_vec", shape)?;
        if n != data.len() {
            return Err(TensorError::Dimension {
                op: "from_vec",
                shape: shape.to_vec(),
                msg: format!("shape implies {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, true))
    }

    /// Trainable leaf: participates in the tape and receives gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor(Rc::new(Inner {
            id: t.0.id,
            data: Rc::clone(&t.0.data),
            shape: t.0.shape.clone(),
            requires_grad: true,
            leaf: true,
            grad: RefCell::new(None),
        })))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_shape("zeros", shape)?;
        Ok(Tensor::build(shape.to_vec(), vec![0.0; n], false, true))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = check_shape("full", shape)?;
        Ok(Tensor::build(shape.to_vec(), vec![value; n], false, true))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Scalar extraction; errors when numel != 1.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract {
                op: "item",
                msg: format!("expected scalar, got shape {:?}", self.0.shape),
            });
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replace the gradient slot (optimizer plumbing, e.g. clipping).
    pub fn set_grad(&self, grad: Option<Vec<f64>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.numel() {
                return Err(TensorError::Dimension {
                    op: "set_grad",
                    shape: self.0.shape.clone(),
                    msg: format!("expected {} values, got {}", self.numel(), g.len()),
                });
            }
        }
        *self.0.grad.borrow_mut() = grad;
        Ok(())
    }

    /// In-place overwrite of the value buffer (optimizer / EMA path).
    /// Must not be called while a tape referencing this tensor is alive.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::Dimension {
                op: "set_data",
                shape: self.0.shape.clone(),
                msg: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    /// Mutate the value buffer through a closure (in-place updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

}

struct Entry {
    op: Op,
    out: Tensor,
}

/// Wengert list. Operations executed through a recording tape are replayed
/// in reverse by [`Tape::backward`].
pub struct Tape {
    recording: bool,
    entries: RefCell<Vec<Entry>>,
}

impl Tape {
    /// Recording tape for training passes.
    pub fn new() -> Tape {
        Tape {
            recording: true,
            entries: RefCell::new(Vec::new()),
        }
    }

    /// Non-recording tape: identical forward math, nothing retained.
    pub fn inference() -> Tape {
        Tape {
            recording: false,
            entries: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Drop every recorded operation. After this the tape holds no references
    /// to intermediate tensors.
    pub fn clear(&self) {
        self.entries.borrow_mut().clear();
    }

    fn record(&self, op: Op, out: &Tensor) {
        self.entries.borrow_mut().push(Entry {
            op,
            out: out.clone(),
        });
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradient contract: leaf gradients accumulate across repeated calls
    /// (callers reset with `zero_grad`); gradients of intermediates are
    /// cleared at the start of every call so replays do not double-count.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.recording {
            return Err(TensorError::Contract {
                op: "backward",
                msg: "tape is not recording".into(),
            });
        }
        if loss.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        if !loss.requires_grad() {
            return Err(TensorError::Contract {
                op: "backward",
                msg: "loss is not connected to any gradient-tracked leaf".into(),
            });
        }
        let entries = self.entries.borrow();
        for e in entries.iter() {
            if !e.out.0.leaf {
                *e.out.0.grad.borrow_mut() = None;
            }
        }
        loss.accumulate_grad(&[1.0]);
        for e in entries.iter().rev() {
            let out_grad = e.out.0.grad.borrow().clone();
            if let Some(g) = out_grad {
                e.op.backward(&g, &e.out)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if kernels::all_finite(data) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(t.item().is_err());
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn backward_accumulates_on_leaves() {
        let tape = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        // Second backward without zero_grad doubles the leaf gradient.
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        x.zero_grad();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn clear_leaves_no_entries() {
        let tape = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let _ = tape.mul(&x, &x).unwrap();
        assert_eq!(tape.len(), 1);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
    }
}
