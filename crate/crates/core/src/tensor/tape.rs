//! Gradient tape: records operations in execution order, replays them in
//! reverse to accumulate adjoints.
//!
//! A [`Tape`] is single-threaded (handles are `Rc`-shared); independent
//! tapes may live on different threads. The recorded graph is consumed by
//! [`Tape::backward`] and freed when the tape is dropped — there is no
//! higher-order differentiation.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Step<T: Scalar> {
    out: usize,
    back: BackFn<T>,
}

struct TapeInner<T: Scalar> {
    vals: Vec<Rc<Tensor<T>>>,
    needs: Vec<bool>,
    steps: Vec<Step<T>>,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    dims: Vec<usize>,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), id: self.id, dims: self.dims.clone() }
    }
}

impl<T: Scalar> Var<T> {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.inner.borrow().vals[self.id])
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().needs[self.id]
    }
}

/// Accumulates gradient contributions during the reverse sweep.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Tensor<T>>],
    needs: &'a [bool],
    dims: &'a [Vec<usize>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub fn needs(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Add a dense contribution to the gradient of node `id`.
    pub fn add(&mut self, id: usize, contribution: Tensor<T>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }

    /// Mutate the gradient of node `id` in place (allocating zeros first if
    /// absent). Suited to scatter-style adjoints.
    pub fn add_with(&mut self, id: usize, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.needs[id] {
            return;
        }
        let g = self.grads[id].get_or_insert_with(|| Tensor::zeros(self.dims[id].clone()));
        f(g);
    }
}

/// Gradients of a backward pass, indexed by the vars they belong to.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        self.grads[v.id].take()
    }

    /// Gradient of `v`, or zeros if `v` did not influence the root.
    pub fn get_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        match self.grads[v.id].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.dims[v.id].clone()),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                vals: Vec::new(),
                needs: Vec::new(),
                steps: Vec::new(),
            })),
        }
    }

    fn push_node(&self, value: Rc<Tensor<T>>, needs: bool) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.vals.len();
        let dims = value.dims().to_vec();
        inner.vals.push(value);
        inner.needs.push(needs);
        Var { tape: self.clone(), id, dims }
    }

    /// Register a leaf node. When `requires_grad` is set, its gradient is
    /// available after [`Tape::backward`].
    pub fn leaf(&self, value: impl Into<Rc<Tensor<T>>>, requires_grad: bool) -> Var<T> {
        self.push_node(value.into(), requires_grad)
    }

    /// Register a value gradients never flow into.
    pub fn constant(&self, value: impl Into<Rc<Tensor<T>>>) -> Var<T> {
        self.push_node(value.into(), false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<T> {
        self.constant(Tensor::scalar(T::from_f64(v)))
    }

    /// Record an operation: `value` is the forward result, `deps` the nodes
    /// it was computed from, and `back` distributes the output adjoint to
    /// them. `back` must only touch captured data and the sink.
    pub fn push_op(
        &self,
        value: Tensor<T>,
        deps: &[&Var<T>],
        back: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var<T> {
        for d in deps {
            assert!(
                Rc::ptr_eq(&self.inner, &d.tape.inner),
                "op mixes vars from different tapes"
            );
        }
        let needs = {
            let inner = self.inner.borrow();
            deps.iter().any(|d| inner.needs[d.id])
        };
        let var = self.push_node(Rc::new(value), needs);
        if needs {
            self.inner
                .borrow_mut()
                .steps
                .push(Step { out: var.id, back: Box::new(back) });
        }
        var
    }

    /// Reverse sweep from a scalar root. Visits recorded operations in
    /// reverse execution order exactly once; leaf gradients accumulate
    /// additively across uses.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot(root.dims.clone()));
        }
        let inner = self.inner.borrow();
        let n = inner.vals.len();
        let dims: Vec<Vec<usize>> = inner.vals.iter().map(|v| v.dims().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(root.dims.clone(), T::one()));
        for step in inner.steps.iter().rev() {
            // Every consumer of `out` runs before this point in the reverse
            // sweep, so the adjoint is final and can be moved out.
            let g = match grads[step.out].take() {
                Some(g) => g,
                None => continue,
            };
            let mut sink = GradSink { grads: &mut grads, needs: &inner.needs, dims: &dims };
            (step.back)(&g, &mut sink);
        }
        Ok(Gradients { grads, dims })
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().vals.len()
    }
}
