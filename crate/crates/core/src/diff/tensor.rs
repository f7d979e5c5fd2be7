use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until the guard drops.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

pub fn no_grad() -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { previous }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product of one recorded operation.
///
/// Returns one entry per parent; `None` means the parent receives no
/// gradient from this node.
pub trait Backward<T: Scalar>: Send + Sync {
    fn backward(&self, out: &Tensor<T>, grad_out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    op: Option<Box<dyn Backward<T>>>,
    op_name: &'static str,
}

/// Row-major n-dimensional array with optional gradient tracking.
///
/// Cloning is cheap and aliases the same storage; parameters are leaves
/// whose data the optimizer rewrites in place.
pub struct Tensor<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &self.node.op_name)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        op: Option<Box<dyn Backward<T>>>,
        op_name: &'static str,
    ) -> Self {
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                parents,
                op,
                op_name,
            }),
        }
    }

    /// Constant leaf tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Self::build(data, shape.to_vec(), false, Vec::new(), None, "leaf"))
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "parameter",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        check_finite("parameter", &data)?;
        Ok(Self::build(data, shape.to_vec(), true, Vec::new(), None, "parameter"))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![T::zero(); numel], shape.to_vec(), false, Vec::new(), None, "leaf")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::build(vec![value; numel], shape.to_vec(), false, Vec::new(), None, "leaf")
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    /// Records the result of an operation. Parents are kept only when
    /// gradients are enabled and at least one parent tracks gradients.
    pub fn from_op(
        op_name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        op: Box<dyn Backward<T>>,
    ) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        check_finite(op_name, &data)?;
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Ok(if track {
            Self::build(data, shape, true, parents, Some(op), op_name)
        } else {
            Self::build(data, shape, false, Vec::new(), None, op_name)
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.node.op_name
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.read().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.read().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.node.data.read();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Overwrites the data of a leaf in place (optimizer updates, finite
    /// differences, checkpoint loads).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        *self.node.data.write() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.write());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock() = None;
    }

    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Copy of the values with no connection to the graph.
    pub fn detach(&self) -> Self {
        Self::build(
            self.to_vec(),
            self.node.shape.clone(),
            false,
            Vec::new(),
            None,
            "detach",
        )
    }

    /// Gradients of a scalar loss with respect to every reachable leaf that
    /// tracks gradients. Leaf tensors are left untouched.
    pub fn grad_map(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.numel()));
        }
        let mut result = Gradients { grads: HashMap::new() };
        if !self.requires_grad() {
            return Ok(result);
        }

        let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            for p in &t.node.parents {
                if p.requires_grad() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.id(), t);
        }
        // Parents are always created before children, so descending ids is a
        // reverse topological order.
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for id in order {
            let Some(g) = pending.remove(&id) else {
                continue;
            };
            let t = &nodes[&id];
            match &t.node.op {
                None => {
                    result.grads.insert(id, g);
                }
                Some(op) => {
                    let parent_grads = op.backward(t, &g, &t.node.parents);
                    debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                    for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size for {}", t.op_name());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(result)
    }

    /// Accumulates `d self / d leaf` into the `grad` slot of every reachable
    /// trainable leaf. Repeated calls add up until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        let grads = self.grad_map()?;
        let mut leaves: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if leaves.contains_key(&t.id()) {
                continue;
            }
            stack.extend(t.node.parents.iter().filter(|p| p.requires_grad()).cloned());
            leaves.insert(t.id(), t);
        }
        for (id, g) in grads.grads {
            if let Some(t) = leaves.get(&id) {
                t.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

/// Gradients keyed by leaf identity, as produced by [`Tensor::grad_map`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
