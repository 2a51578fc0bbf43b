//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is a DAG of reference-counted nodes; each op records its parents
//! and a backward closure. Graphs are single-threaded (one per thread), which
//! is the concurrency contract for the whole crate: independent graphs may
//! live on independent threads, kernels may parallelize internally over
//! disjoint output slices only.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

mod conv;
mod ops;
pub mod gradcheck;

pub use conv::ResampleMode;
pub use ops::{broadcast_shapes, elementwise, ElemOp};

/// Element types the engine supports. Training runs in `f32`; the
/// finite-difference checks instantiate everything in `f64` because the
/// tolerances are unreachable in single precision.
pub trait Element: Float + fmt::Debug + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts")
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element converts to f64")
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}
impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph recording disabled. Sampling and evaluation use this so
/// long denoiser chains do not retain their graphs.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: given the output gradient, produce one optional gradient
/// per parent (in parent order).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// N-dimensional array handle. Cloning is cheap (shared storage).
pub struct Tensor<T: Element> {
    pub(crate) inner: Rc<Inner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{:?}(id={}, requires_grad={})",
            self.shape(),
            self.inner.id,
            self.requires_grad()
        )
    }
}

pub(crate) fn check_shape_len<T>(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "data length {} does not match shape {:?} (numel {})",
            len, shape, n
        )));
    }
    if len == 0 {
        return Err(Error::Shape(format!("empty tensor of shape {:?}", shape)));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant (non-differentiable leaf).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape_len::<T>(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf: participates in backward and accumulates `grad`.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape_len::<T>(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![T::zero(); n], false, vec![], None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![v; n], false, vec![], None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::new_inner(vec![1], vec![v], false, vec![], None)
    }

    /// Internal op constructor. Drops the graph edges when recording is off
    /// or no parent needs gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::new_inner(shape, data, true, parents, Some(backward))
        } else {
            Self::new_inner(shape, data, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values (used by optimizers and checkpoint load).
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Apply an in-place update to the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.inner.data.borrow_mut();
        f(&mut d);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A constant view of the same storage, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(
            self.inner.shape.clone(),
            self.inner.data.borrow().clone(),
            false,
            vec![],
            None,
        )
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode backward pass seeded with ∂out/∂out = 1. The receiver
    /// must be scalar. After the call, `grad` is populated for every
    /// `requires_grad` tensor that participated in the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(
                "backward() requires a scalar tensor".to_string(),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::Domain(
                "backward() on a tensor with no graph (requires_grad=false)".to_string(),
            ));
        }
        // Iterative post-order DFS for the topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.requires_grad() && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let Some(backward) = node.inner.backward.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        debug_assert_eq!(pg.len(), parent.numel());
                        parent.accumulate_grad(&pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
