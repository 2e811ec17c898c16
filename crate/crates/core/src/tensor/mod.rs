//! Reverse-mode automatic differentiation on a tape.
//!
//! Every tensor is an immutable f64 buffer with a row-major shape. A tensor
//! may be tracked on a [`Tape`], in which case each operation that consumes
//! it appends a node recording the op and its inputs. The backward pass in
//! [`autograd`] replays the tape in reverse and, crucially, expresses every
//! backward rule through the same op set, so gradients can themselves be
//! recorded and differentiated (`create_graph`). That closure property is
//! what makes differentiating through an entire inner adaptation loop work.
//!
//! Tapes are reference-counted and not `Send`: a graph lives and dies on one
//! thread.

mod autograd;
mod ops;

pub use autograd::grad_tensors;
pub use ops::concat;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

// ── tape ──

/// One recorded operation. Fields refer to parent node ids; shape metadata
/// needed by backward rules is looked up from the parent nodes themselves.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulScalar(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Matmul(usize, usize),
    Permute { input: usize, perm: Vec<usize> },
    Reshape(usize),
    Slice { input: usize, axis: usize, start: usize },
    Embed { input: usize, axis: usize, start: usize },
    Sum(usize),
    ScalarExpand(usize),
    BroadcastRow(usize),
    SumRows(usize),
    BroadcastCol(usize),
    SumCols(usize),
    RepeatRows { input: usize, times: usize },
    TileRows { input: usize, times: usize },
    GroupSumRows { input: usize, group: usize },
    FoldRows { input: usize, times: usize },
    GatherLabel { input: usize, labels: Rc<[usize]> },
    ScatterLabel { input: usize, labels: Rc<[usize]> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Rc<[f64]>,
}

#[derive(Debug)]
struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// Shared recording surface for one computation graph.
#[derive(Debug, Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    pub fn ptr_eq(a: &Tape, b: &Tape) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub fn set_recording(&self, on: bool) {
        self.inner.borrow_mut().recording = on;
    }

    /// Registers `t` as a fresh leaf and returns the tracked handle. The
    /// buffer is shared, not copied.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape.clone(), Rc::clone(&t.data));
        Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            node: Some((self.clone(), id)),
        }
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Rc<[f64]>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, shape, value });
        inner.nodes.len() - 1
    }

    /// Node id for `t` on this tape, interning untracked tensors as leaves.
    fn intern(&self, t: &Tensor) -> usize {
        match &t.node {
            Some((tape, id)) if Tape::ptr_eq(tape, self) => *id,
            _ => self.push(Op::Leaf, t.shape.clone(), Rc::clone(&t.data)),
        }
    }

    fn node_meta(&self, id: usize) -> (Op, Vec<usize>) {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id];
        (n.op.clone(), n.shape.clone())
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    /// Rebuilds a tracked tensor handle for an existing node.
    fn tensor_for(&self, id: usize) -> Tensor {
        let inner = self.inner.borrow();
        let n = &inner.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            data: Rc::clone(&n.value),
            node: Some((self.clone(), id)),
        }
    }
}

// ── tensor ──

/// Immutable row-major f64 tensor, optionally tracked on a tape.
///
/// Cloning is cheap: the buffer is shared. `shape` may contain a zero extent
/// only for degenerate edge cases (an empty parameter set flattens to a
/// zero-length row); ops that need nonempty inputs enforce that themselves.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<[f64]>,
    node: Option<(Tape, usize)>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: data.into(),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1, 1], vec![v]).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len].into(),
            node: None,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// The sole value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer, no tape association.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn rows(&self) -> Result<usize> {
        self.dim2().map(|(r, _)| r)
    }

    pub(crate) fn dim2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Restores a tape's recording flag when dropped, so backward passes cannot
/// leave it flipped after an early return.
pub(crate) struct RecordingGuard {
    tape: Tape,
    prev: bool,
}

impl RecordingGuard {
    pub(crate) fn set(tape: &Tape, on: bool) -> RecordingGuard {
        let prev = tape.is_recording();
        tape.set_recording(on);
        RecordingGuard {
            tape: tape.clone(),
            prev,
        }
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        self.tape.set_recording(self.prev);
    }
}

/// Sums values after sorting by total order, making the result independent
/// of input permutation down to the last bit.
pub(crate) fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}
