//! Tensor values and the gradient tape.
//!
//! A [`Tensor`] is an immutable dense n-d array that may optionally
//! participate in a [`Tape`]. Operations between tensors on the same tape
//! record backward closures; operations on plain tensors evaluate eagerly
//! with no recording overhead, which is what the sampling and evaluation
//! paths use.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};

/// Element type: `f64` by default, `f32` behind the `f32` feature.
#[cfg(feature = "f32")]
pub type Elem = f32;
#[cfg(not(feature = "f32"))]
pub type Elem = f64;

/// Immutable shape + data storage shared between tensors and tape nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    shape: Vec<usize>,
    data: Vec<Elem>,
}

impl Buffer {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                what: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                what: format!("zero-sized dimension in {shape:?}"),
            });
        }
        Ok(Buffer { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[Elem], &mut GradStore)>;

struct Node {
    buf: Rc<Buffer>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    grad: Option<Vec<Elem>>,
}

/// Per-node gradient buffers used while a backward pass runs.
pub(crate) struct GradStore {
    grads: Vec<Option<Vec<Elem>>>,
}

impl GradStore {
    /// Accumulate into node `id`, allocating a zero buffer of `len` on first touch.
    pub(crate) fn accumulate(&mut self, id: usize, len: usize, add: impl FnOnce(&mut [Elem])) {
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        add(slot.as_mut().unwrap());
    }
}

struct TapeInner {
    nodes: Vec<Node>,
    ran_backward: bool,
}

/// Records operations for one reverse pass. Single-threaded; independent
/// tapes may live on independent threads.
#[derive(Clone)]
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
                ran_backward: false,
            })),
        }
    }

    /// Track `value` as a differentiable leaf on this tape.
    pub fn var(&self, value: &Tensor) -> Tensor {
        let id = self.push(value.buf.clone(), true, None);
        Tensor {
            buf: value.buf.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub(crate) fn push(
        &self,
        buf: Rc<Buffer>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            buf,
            requires_grad,
            backward,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn run_backward(&self, root: usize) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.ran_backward {
            return Err(TensorError::BackwardAlreadyRan);
        }
        let n = inner.nodes.len();
        let mut store = GradStore {
            grads: vec![None; n],
        };
        store.grads[root] = Some(vec![1.0; inner.nodes[root].buf.len()]);
        // Creation order is topological: inputs always precede outputs.
        for i in (0..=root).rev() {
            let g = match &store.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(bw) = &inner.nodes[i].backward {
                bw(&g, &mut store);
            }
        }
        for (node, grad) in inner.nodes.iter_mut().zip(store.grads) {
            if node.requires_grad {
                node.grad = grad;
            }
        }
        inner.ran_backward = true;
        Ok(())
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense n-d array, optionally tracked on a gradient tape.
#[derive(Clone)]
pub struct Tensor {
    buf: Rc<Buffer>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracked={}",
            self.shape(),
            self.node.is_some()
        )?;
        if self.len() <= 8 {
            write!(f, ", data={:?}", self.data())?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Elem>) -> Result<Self> {
        Ok(Tensor::plain(Rc::new(Buffer::new(shape.to_vec(), data)?)))
    }

    pub fn from_vec(data: Vec<Elem>) -> Self {
        let n = data.len();
        Tensor::plain(Rc::new(Buffer::new(vec![n], data).unwrap()))
    }

    pub fn scalar(v: Elem) -> Self {
        Tensor::plain(Rc::new(Buffer::new(vec![1], vec![v]).unwrap()))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::plain(Rc::new(Buffer::new(shape.to_vec(), vec![0.0; n]).unwrap()))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: Elem) -> Self {
        let n = shape.iter().product();
        Tensor::plain(Rc::new(Buffer::new(shape.to_vec(), vec![v; n]).unwrap()))
    }

    /// Standard-normal draws. Sampling always goes through `f64` so the
    /// stream is identical in both element modes.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<Elem> = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                x as Elem
            })
            .collect();
        Tensor::plain(Rc::new(Buffer::new(shape.to_vec(), data).unwrap()))
    }

    pub(crate) fn plain(buf: Rc<Buffer>) -> Self {
        Tensor { buf, node: None }
    }

    pub(crate) fn buf(&self) -> &Rc<Buffer> {
        &self.buf
    }

    pub fn shape(&self) -> &[usize] {
        self.buf.shape()
    }

    pub fn rank(&self) -> usize {
        self.buf.shape().len()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn data(&self) -> &[Elem] {
        self.buf.data()
    }

    pub fn to_vec(&self) -> Vec<Elem> {
        self.buf.data().to_vec()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> Elem {
        assert_eq!(self.len(), 1, "item() requires a single-element tensor");
        self.buf.data()[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Whether this tensor participates in gradient flow.
    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some(nr) => nr.tape.inner.borrow().nodes[nr.id].requires_grad,
            None => false,
        }
    }

    /// A copy of this tensor detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            buf: self.buf.clone(),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Run the reverse pass from this scalar.
    pub fn backward(&self) -> Result<()> {
        let node = match (&self.node, self.len()) {
            (Some(nr), 1) => nr,
            (node, len) => {
                return Err(TensorError::BackwardFromNonScalar {
                    len,
                    on_tape: node.is_some(),
                })
            }
        };
        node.tape.run_backward(node.id)
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let nr = self.node.as_ref()?;
        let inner = nr.tape.inner.borrow();
        let g = inner.nodes[nr.id].grad.as_ref()?;
        Some(Tensor::plain(Rc::new(
            Buffer::new(self.shape().to_vec(), g.clone()).unwrap(),
        )))
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|nr| nr.id)
    }
}

/// Resolve the tape shared by `inputs`, erroring if two distinct tapes mix.
pub(crate) fn unified_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(nr) = &t.node {
            match &found {
                None => found = Some(nr.tape.clone()),
                Some(existing) if existing.same_tape(&nr.tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch),
            }
        }
    }
    Ok(found)
}

/// Create the result tensor for an op: plain when no input is tracked,
/// otherwise a tape node with the given backward closure. The closure is
/// only built when recording actually happens.
pub(crate) fn record(
    inputs: &[&Tensor],
    buf: Rc<Buffer>,
    backward: impl FnOnce() -> BackwardFn,
) -> Result<Tensor> {
    let tape = unified_tape(inputs)?;
    match tape {
        None => Ok(Tensor::plain(buf)),
        Some(tape) => {
            let id = tape.push(buf.clone(), true, Some(backward()));
            Ok(Tensor {
                buf,
                node: Some(NodeRef { tape, id }),
            })
        }
    }
}

/// Node id to accumulate into, or None when the input is off-tape.
pub(crate) fn grad_target(t: &Tensor) -> Option<usize> {
    if t.requires_grad() {
        t.node_id()
    } else {
        None
    }
}
