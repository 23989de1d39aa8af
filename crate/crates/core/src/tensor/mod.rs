//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a value buffer plus autodiff
//! bookkeeping. Every differentiable operation records a backward rule —
//! the operand handles, the output, and a closure mapping the output
//! gradient to operand gradients. [`Tensor::backward`] replays those rules
//! in reverse topological order, accumulating into `.grad` slots, which
//! persist (for inspection and cross-graph accumulation) until explicitly
//! zeroed. The graph for a step is freed when its tensors drop, so the tape
//! never leaks across optimizer steps.
//!
//! Determinism: construction order fixes node ids, traversal follows stored
//! operand order, and all kernels are single-threaded loops — two runs with
//! identical seeds produce bit-identical values and gradients.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled (inference / finite-difference
/// evaluations). Restores the previous mode afterwards, panic-safe.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = Guard(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: operand handles plus a closure from the output gradient to
/// per-operand gradients. `needs[i]` tells the closure whether operand `i`
/// requires a gradient at all, so kernels may skip dead work (e.g. a matmul
/// against a frozen weight skips that side entirely).
pub(crate) struct Rule<T: Scalar> {
    parents: Vec<Tensor<T>>,
    apply: Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    rule: RefCell<Option<Rule<T>>>,
}

/// Dense row-major tensor with reverse-mode autodiff.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Tensor<T> {
    // ── Construction ────────────────────────────────────────────────────

    fn new_leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            data.len() == numel,
            "tensor data length {} does not match shape {:?} (numel {})",
            data.len(),
            shape,
            numel
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                rule: RefCell::new(None),
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        Self::new_leaf(data, shape, false)
    }

    /// Trainable leaf: participates in autodiff and optimizer updates.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self::new_leaf(data, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![T::ZERO; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(vec![value; shape.iter().product()], shape)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    /// Output of an op: records the backward rule when grad mode is on and
    /// any operand requires a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        apply: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let t = Self::new_leaf(data, shape, record);
        if record {
            *t.inner.rule.borrow_mut() = Some(Rule { parents, apply: Box::new(apply) });
        }
        t
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Number of rows / columns of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert!(self.inner.shape.len() == 2, "rows() needs rank 2, got {:?}", self.shape());
        self.inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.inner.shape.len() == 2, "cols() needs rank 2, got {:?}", self.shape());
        self.inner.shape[1]
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert!(self.numel() == 1, "item() needs exactly one element, got shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Replaces the value buffer (optimizer updates). Length must match.
    pub fn set_data(&self, data: Vec<T>) {
        assert!(
            data.len() == self.numel(),
            "set_data length {} does not match shape {:?}",
            data.len(),
            self.shape()
        );
        *self.inner.data.borrow_mut() = data;
    }

    /// In-place mutation of the value buffer (optimizer updates, FD probes).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient participation; the freeze mechanism for parameters.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Copy of the values as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.to_vec(), self.shape())
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Seeds the root gradient with 1
    /// and accumulates into every reachable `.grad` slot (leaves and
    /// intermediates alike). Panics if the root is not a single element.
    pub fn backward(&self) {
        assert!(
            self.numel() == 1,
            "backward requires a scalar root, got shape {:?}",
            self.shape()
        );
        self.accumulate_grad(&[T::ONE]);

        // Post-order DFS over nodes that carry rules: operands land before
        // consumers, so the reversed order is a valid backward schedule.
        let mut order: Vec<Tensor<T>> = Vec::new();
        if self.inner.rule.borrow().is_none() {
            return;
        }
        let mut visited: HashSet<u64> = HashSet::new();
        visited.insert(self.id());
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, idx)) = stack.pop() {
            let next = {
                let rule = node.inner.rule.borrow();
                let parents = &rule.as_ref().expect("nodes on stack carry rules").parents;
                parents
                    .iter()
                    .skip(idx)
                    .enumerate()
                    .find(|(_, p)| p.inner.rule.borrow().is_some() && !visited.contains(&p.id()))
                    .map(|(off, p)| (idx + off + 1, p.clone()))
            };
            match next {
                Some((next_idx, parent)) => {
                    stack.push((node, next_idx));
                    visited.insert(parent.id());
                    stack.push((parent, 0));
                }
                None => order.push(node),
            }
        }

        for node in order.iter().rev() {
            let grad_out = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // no gradient flowed here through this root
            };
            let rule = node.inner.rule.borrow();
            let rule = rule.as_ref().expect("scheduled nodes carry rules");
            let needs: Vec<bool> = rule.parents.iter().map(|p| p.requires_grad()).collect();
            let grads = (rule.apply)(&grad_out, &needs);
            assert!(
                grads.len() == rule.parents.len(),
                "backward rule returned {} gradients for {} operands",
                grads.len(),
                rule.parents.len()
            );
            for (parent, grad) in rule.parents.iter().zip(grads.into_iter()) {
                if let Some(g) = grad {
                    if parent.requires_grad() {
                        assert!(
                            g.len() == parent.numel(),
                            "backward rule gradient length {} does not match operand shape {:?}",
                            g.len(),
                            parent.shape()
                        );
                        parent.accumulate_grad(&g);
                    }
                }
            }
        }
    }
}

pub(crate) fn assert_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert!(
        a.shape() == b.shape(),
        "{op} shape mismatch: lhs {:?} vs rhs {:?}",
        a.shape(),
        b.shape()
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient() {
        // L = x . x with x = [1, 2]  =>  dL/dx = 2x = [2, 4]
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        let loss = x.mul(&x).sum_all();
        assert_eq!(loss.item(), 5.0);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        x.mul(&x).sum_all().backward();
        x.mul(&x).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        x.mul(&x).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn chain_through_two_ops() {
        // L = sum((x * y) + x), dL/dx = y + 1, dL/dy = x
        let x = Tensor::param(vec![1.0f64, -2.0, 0.5], &[3]);
        let y = Tensor::param(vec![3.0f64, 0.0, -1.0], &[3]);
        x.mul(&y).add(&x).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![4.0, 1.0, 0.0]);
        assert_eq!(y.grad().unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar root")]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        x.mul(&x).backward();
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::param(vec![2.0f64], &[1]);
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert!(y.inner.rule.borrow().is_none());
        // Mode restored afterwards.
        assert!(grad_enabled());
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        let w = Tensor::param(vec![3.0f64, 4.0], &[2]);
        w.set_requires_grad(false);
        x.mul(&w).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(w.grad().is_none());
    }

    #[test]
    fn intermediate_grads_are_inspectable() {
        let x = Tensor::param(vec![1.0f64, 2.0], &[2]);
        let y = x.affine(2.0, 0.0); // y = 2x
        let loss = y.sum_all();
        loss.backward();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let x = Tensor::param(vec![0.3f64, -1.7, 2.9, 0.01], &[2, 2]);
            let y = Tensor::param(vec![1.1f64, 0.4, -0.2, 0.9], &[2, 2]);
            x.matmul(&y).gelu().sum_all().backward();
            (x.grad().unwrap(), y.grad().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shared_operand_used_twice_accumulates_both_paths() {
        // L = sum(x*x) through the same handle on both sides.
        let x = Tensor::param(vec![3.0f64], &[1]);
        x.mul(&x).sum_all().backward();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::param(vec![2.0f64], &[1]);
        let d = x.mul(&x).detach();
        let loss = d.mul(&d).sum_all();
        loss.backward();
        assert!(x.grad().is_none());
        assert_eq!(loss.item(), 16.0);
    }
}
