//! Dense N-dimensional tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node in a computation
//! graph. Ops build new nodes that remember their parents and a closure
//! mapping the output gradient to parent gradients; [`Tensor::backward`]
//! walks the graph in reverse creation order.

mod conv;
mod loss;
#[cfg(test)]
pub(crate) use conv::reference as conv_reference;
mod nn;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) use loss::log_softmax_row;
pub use nn::{RunningStats, BN_EPS, BN_MOMENTUM};

/// Gradients returned by a backward closure, one slot per parent.
pub(crate) type Grads<T> = Vec<Option<Vec<T>>>;
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Grads<T>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

#[derive(Clone)]
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    /// A leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Self::build(
            shape.to_vec(),
            data,
            requires_grad,
            Vec::new(),
            None,
        ))
    }

    /// A leaf that participates in differentiation.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(
            shape.to_vec(),
            vec![value; numel(shape)],
            false,
            Vec::new(),
            None,
        )
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, Vec::new(), None)
    }

    /// Result of an op. Parents and the backward closure are dropped when no
    /// parent tracks gradients, so inference graphs hold no history.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            Self::build(shape, data, true, parents, Some(backward))
        } else {
            Self::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Self {
        Self::build(
            self.shape().to_vec(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Backpropagates from a single-element loss. Every gradient-tracking
    /// tensor reachable from `self` receives (accumulates) its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be a single element, got shape {:?}",
                    self.shape()
                ),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            for p in &t.0.parents {
                if p.requires_grad() && seen.insert(p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(t);
        }
        // Parents are always created before their children.
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(back) = &node.0.backward {
                let parent_grads = back(&g, &node.0.parents);
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("head", &head)
            .finish()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f64>::param(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let vals = vec![1.0, -2.0, 0.5];
        let x = Tensor::<f64>::param(&[3], vals.clone()).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), expect);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.add(&x).unwrap().add(&x).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::Shape { .. })));
    }

    #[test]
    fn untracked_graph_keeps_no_parents() {
        let x = Tensor::<f32>::ones(&[4]);
        let y = x.relu();
        assert!(!y.requires_grad());
        assert!(y.0.parents.is_empty());
    }
}
