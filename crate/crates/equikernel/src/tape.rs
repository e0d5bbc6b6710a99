//! Reverse-mode automatic differentiation over the kernel ops, plus the
//! central-difference oracle used to validate every registered adjoint.
//!
//! A [`Tape`] records one backward closure per produced value. [`Var`]s are
//! cheap handles (`Rc` to the value plus a node id); nodes created from
//! constants carry no id and the grad graph skips them. Parents always have
//! smaller ids than children, so [`Tape::backward`] is a single reverse
//! sweep. A tape is single-shot: the sweep consumes the closures.
//!
//! Memory note: values live behind `Rc` and each op output is one fresh
//! allocation, so forward memory is the sum of op outputs and backward at
//! most doubles it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::ops::dense::{
    linear, linear_backward, pointwise, pointwise_backward, scale_by, scale_by_backward,
    scale_const, softmax_last, softmax_last_backward, Pointwise,
};
use crate::ops::layout::{
    concat, concat_backward, map_from_tokens, matmul_nn, matmul_nn_backward, matmul_nt,
    matmul_nt_backward, narrow, narrow_backward, tokens_from_map,
};
use crate::ops::norm::{
    batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward,
    layer_norm, layer_norm_backward, BnSaved,
};
use crate::ops::pool::{
    global_avg, global_avg_backward, group_pool, group_pool_backward, strip_pool,
    strip_pool_backward, temporal_max, temporal_max_backward,
};
use crate::ops::resize::{bilinear_resize, bilinear_resize_backward};
use crate::tensor::{Axis, Shape, Tensor};

type BackFn<E> = Box<dyn FnOnce(&Tensor<E>, &mut Grads<E>)>;

/// Gradient accumulator indexed by tape node id.
pub struct Grads<E: Element> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    /// Adds `g` into the slot for `node`, allocating it on first touch.
    pub fn accumulate(&mut self, node: usize, g: Tensor<E>) {
        match &mut self.slots[node] {
            Some(t) => t
                .add_assign(&g, "grad-accumulate")
                .expect("adjoint shape matches primal shape"),
            slot @ None => *slot = Some(g),
        }
    }

    /// The accumulated gradient for `var`, if any reached it.
    pub fn get(&self, var: &Var<'_, E>) -> Option<&Tensor<E>> {
        var.node.and_then(|n| self.slots[n].as_ref())
    }

    /// Takes ownership of the gradient for `var`.
    pub fn take(&mut self, var: &Var<'_, E>) -> Option<Tensor<E>> {
        var.node.and_then(|n| self.slots[n].take())
    }
}

/// A recording of one differentiable computation.
pub struct Tape<E: Element> {
    entries: RefCell<Vec<Option<BackFn<E>>>>,
    swept: RefCell<bool>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            entries: RefCell::new(Vec::new()),
            swept: RefCell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, back: Option<BackFn<E>>) -> usize {
        let mut v = self.entries.borrow_mut();
        v.push(back);
        v.len() - 1
    }

    /// A differentiable leaf (parameter or input): gradients accumulate here.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        let node = self.push(None);
        Var {
            tape: self,
            value: Rc::new(value),
            node: Some(node),
        }
    }

    /// A constant: no gradient is tracked through it.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// Runs the reverse sweep from `root`, seeding it with `seed`
    /// (`∂out/∂out`). Consumes the recorded closures — one sweep per tape.
    pub fn backward(&self, root: &Var<'_, E>, seed: Tensor<E>) -> Result<Grads<E>> {
        if *self.swept.borrow() {
            return Err(Error::Config("tape already swept backward once".into()));
        }
        *self.swept.borrow_mut() = true;
        let rid = root.node.ok_or_else(|| {
            Error::Config("cannot differentiate a constant root".into())
        })?;
        if seed.shape() != root.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward-seed",
                lhs: root.value.shape().clone(),
                rhs: seed.shape().clone(),
            });
        }
        let mut entries = self.entries.borrow_mut();
        let mut grads = Grads {
            slots: vec![None; entries.len()],
        };
        grads.slots[rid] = Some(seed);
        for i in (0..=rid).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = entries[i].take() {
                let g = grads.slots[i].take().expect("checked above");
                back(&g, &mut grads);
                grads.slots[i] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Convenience sweep for a one-element root with seed 1.
    pub fn backward_scalar(&self, root: &Var<'_, E>) -> Result<Grads<E>> {
        if root.value.len() != 1 {
            return Err(Error::BadShape {
                op: "backward_scalar",
                shape: root.value.shape().clone(),
                reason: "root must hold exactly one element".into(),
            });
        }
        self.backward(root, Tensor::full(root.value.shape().clone(), E::one()))
    }
}

/// A value on the tape.
pub struct Var<'t, E: Element> {
    tape: &'t Tape<E>,
    value: Rc<Tensor<E>>,
    node: Option<usize>,
}

impl<'t, E: Element> Clone for Var<'t, E> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape,
            value: Rc::clone(&self.value),
            node: self.node,
        }
    }
}

/// Registers a value produced outside the standard op set, with a custom
/// backward closure. Mechanism modules use this for their hand-derived
/// adjoints (kernel rotation, the losses).
pub fn register<'t, E: Element>(
    tape: &'t Tape<E>,
    value: Tensor<E>,
    back: impl FnOnce(&Tensor<E>, &mut Grads<E>) + 'static,
) -> Var<'t, E> {
    let node = tape.push(Some(Box::new(back)));
    Var {
        tape,
        value: Rc::new(value),
        node: Some(node),
    }
}

impl<'t, E: Element> Var<'t, E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    /// Shared handle to the underlying value (cheap).
    pub fn value_rc(&self) -> Rc<Tensor<E>> {
        Rc::clone(&self.value)
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    fn same_tape(&self, other: &Var<'t, E>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars must live on the same tape"
        );
    }

    /// Wraps `value` as an op output whose backward is `back`, unless every
    /// parent is a constant (then the result is a constant too).
    fn output(
        &self,
        value: Tensor<E>,
        any_tracked: bool,
        back: impl FnOnce(&Tensor<E>, &mut Grads<E>) + 'static,
    ) -> Var<'t, E> {
        if any_tracked {
            register(self.tape, value, back)
        } else {
            self.tape.constant(value)
        }
    }

    // ---- elementwise algebra ----

    pub fn add(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(other);
        let out = crate::ops::dense::add(&self.value, &other.value)?;
        let (na, nb) = (self.node, other.node);
        Ok(self.output(out, na.is_some() || nb.is_some(), move |g, sink| {
            if let Some(n) = na {
                sink.accumulate(n, g.clone());
            }
            if let Some(n) = nb {
                sink.accumulate(n, g.clone());
            }
        }))
    }

    pub fn sub(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        let neg = other.scale_const(-1.0);
        self.add(&neg)
    }

    pub fn mul(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(other);
        let out = crate::ops::dense::mul(&self.value, &other.value)?;
        let (na, nb) = (self.node, other.node);
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.output(out, na.is_some() || nb.is_some(), move |g, sink| {
            if let Some(n) = na {
                sink.accumulate(n, crate::ops::dense::mul(g, &vb).expect("same shape"));
            }
            if let Some(n) = nb {
                sink.accumulate(n, crate::ops::dense::mul(g, &va).expect("same shape"));
            }
        }))
    }

    pub fn scale_const(&self, c: f64) -> Var<'t, E> {
        let out = scale_const(&self.value, c);
        let n = self.node;
        self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, scale_const(g, c));
            }
        })
    }

    /// Multiplies by a learned one-element scalar.
    pub fn scale_by(&self, s: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(s);
        let out = scale_by(&self.value, &s.value)?;
        let (nx, ns) = (self.node, s.node);
        let (vx, vs) = (Rc::clone(&self.value), Rc::clone(&s.value));
        Ok(self.output(out, nx.is_some() || ns.is_some(), move |g, sink| {
            let (dx, ds) = scale_by_backward(&vx, &vs, g);
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = ns {
                sink.accumulate(n, ds);
            }
        }))
    }

    pub fn pointwise(&self, f: Pointwise) -> Var<'t, E> {
        let out = pointwise(&self.value, f);
        let n = self.node;
        let v = Rc::clone(&self.value);
        self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, pointwise_backward(&v, f, g));
            }
        })
    }

    pub fn relu(&self) -> Var<'t, E> {
        self.pointwise(Pointwise::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t, E> {
        self.pointwise(Pointwise::Sigmoid)
    }

    pub fn softsign(&self) -> Var<'t, E> {
        self.pointwise(Pointwise::Softsign)
    }

    /// Sum of all elements, as a one-element `[D=1]` tensor.
    pub fn sum_all(&self) -> Var<'t, E> {
        let mut total = E::zero();
        for &v in self.value.data() {
            total += v;
        }
        let mut out = Tensor::zeros(Shape::new(&[(Axis::D, 1)]));
        out.data_mut()[0] = total;
        let n = self.node;
        let shape = self.value.shape().clone();
        self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, Tensor::full(shape, g.data()[0]));
            }
        })
    }

    pub fn mean_all(&self) -> Var<'t, E> {
        let inv = 1.0 / self.value.len() as f64;
        self.sum_all().scale_const(inv)
    }

    // ---- structured ops ----

    pub fn conv2d(
        &self,
        w: &Var<'t, E>,
        bias: Option<&Var<'t, E>>,
        spec: ConvSpec,
    ) -> Result<Var<'t, E>> {
        self.same_tape(w);
        let out = conv2d(&self.value, &w.value, bias.map(|b| &*b.value), &spec)?;
        let (nx, nw) = (self.node, w.node);
        let nb = bias.and_then(|b| b.node);
        let has_bias = bias.is_some();
        let (vx, vw) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let tracked = nx.is_some() || nw.is_some() || nb.is_some();
        Ok(self.output(out, tracked, move |g, sink| {
            let (dx, dw, db) =
                conv2d_backward(&vx, &vw, has_bias, &spec, g).expect("forward validated geometry");
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = nw {
                sink.accumulate(n, dw);
            }
            if let (Some(n), Some(db)) = (nb, db) {
                sink.accumulate(n, db);
            }
        }))
    }

    pub fn linear(&self, w: &Var<'t, E>, bias: Option<&Var<'t, E>>) -> Result<Var<'t, E>> {
        self.same_tape(w);
        let out = linear(&self.value, &w.value, bias.map(|b| &*b.value))?;
        let (nx, nw) = (self.node, w.node);
        let nb = bias.and_then(|b| b.node);
        let has_bias = bias.is_some();
        let (vx, vw) = (Rc::clone(&self.value), Rc::clone(&w.value));
        let tracked = nx.is_some() || nw.is_some() || nb.is_some();
        Ok(self.output(out, tracked, move |g, sink| {
            let (dx, dw, db) =
                linear_backward(&vx, &vw, has_bias, g).expect("forward validated shapes");
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = nw {
                sink.accumulate(n, dw);
            }
            if let (Some(n), Some(db)) = (nb, db) {
                sink.accumulate(n, db);
            }
        }))
    }

    pub fn matmul_nt(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(other);
        let out = matmul_nt(&self.value, &other.value)?;
        let (na, nb) = (self.node, other.node);
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.output(out, na.is_some() || nb.is_some(), move |g, sink| {
            let (da, db) = matmul_nt_backward(&va, &vb, g).expect("forward validated shapes");
            if let Some(n) = na {
                sink.accumulate(n, da);
            }
            if let Some(n) = nb {
                sink.accumulate(n, db);
            }
        }))
    }

    pub fn matmul_nn(&self, other: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(other);
        let out = matmul_nn(&self.value, &other.value)?;
        let (na, nb) = (self.node, other.node);
        let (va, vb) = (Rc::clone(&self.value), Rc::clone(&other.value));
        Ok(self.output(out, na.is_some() || nb.is_some(), move |g, sink| {
            let (da, db) = matmul_nn_backward(&va, &vb, g).expect("forward validated shapes");
            if let Some(n) = na {
                sink.accumulate(n, da);
            }
            if let Some(n) = nb {
                sink.accumulate(n, db);
            }
        }))
    }

    pub fn softmax_last(&self) -> Result<Var<'t, E>> {
        let out = softmax_last(&self.value)?;
        let n = self.node;
        let y = out.clone();
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, softmax_last_backward(&y, g).expect("same shape"));
            }
        }))
    }

    pub fn bilinear_resize(&self, target: (usize, usize)) -> Result<Var<'t, E>> {
        let out = bilinear_resize(&self.value, target)?;
        let n = self.node;
        let shape = self.value.shape().clone();
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(
                    n,
                    bilinear_resize_backward(&shape, target, g).expect("forward validated"),
                );
            }
        }))
    }

    pub fn temporal_max(&self) -> Result<Var<'t, E>> {
        let out = temporal_max(&self.value)?;
        let n = self.node;
        let v = Rc::clone(&self.value);
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, temporal_max_backward(&v, g).expect("forward validated"));
            }
        }))
    }

    pub fn global_avg(&self) -> Result<Var<'t, E>> {
        let out = global_avg(&self.value)?;
        let n = self.node;
        let shape = self.value.shape().clone();
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, global_avg_backward(&shape, g).expect("forward validated"));
            }
        }))
    }

    pub fn strip_pool(&self, parts: usize, max_only: bool) -> Result<Var<'t, E>> {
        let out = strip_pool(&self.value, parts, max_only)?;
        let n = self.node;
        let v = Rc::clone(&self.value);
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(
                    n,
                    strip_pool_backward(&v, parts, max_only, g).expect("forward validated"),
                );
            }
        }))
    }

    pub fn group_pool(&self, mean: bool) -> Result<Var<'t, E>> {
        let out = group_pool(&self.value, mean)?;
        let n = self.node;
        let v = Rc::clone(&self.value);
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, group_pool_backward(&v, mean, g).expect("forward validated"));
            }
        }))
    }

    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, E>,
        beta: &Var<'t, E>,
        pair_shared: bool,
        eps: f64,
    ) -> Result<(Var<'t, E>, BnSaved<E>)> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (out, saved) = batch_norm_train(&self.value, &gamma.value, &beta.value, pair_shared, eps)?;
        let (nx, ng, nb) = (self.node, gamma.node, beta.node);
        let (vx, vg) = (Rc::clone(&self.value), Rc::clone(&gamma.value));
        let saved_cl = saved.clone();
        let tracked = nx.is_some() || ng.is_some() || nb.is_some();
        let var = self.output(out, tracked, move |g, sink| {
            let (dx, dgamma, dbeta) =
                batch_norm_train_backward(&vx, &vg, &saved_cl, pair_shared, eps, g)
                    .expect("forward validated shapes");
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = ng {
                sink.accumulate(n, dgamma);
            }
            if let Some(n) = nb {
                sink.accumulate(n, dbeta);
            }
        });
        Ok((var, saved))
    }

    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, E>,
        beta: &Var<'t, E>,
        run_mean: &Tensor<E>,
        run_var: &Tensor<E>,
        pair_shared: bool,
        eps: f64,
    ) -> Result<Var<'t, E>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let out = batch_norm_eval(
            &self.value,
            &gamma.value,
            &beta.value,
            run_mean,
            run_var,
            pair_shared,
            eps,
        )?;
        let (nx, ng, nb) = (self.node, gamma.node, beta.node);
        let (vx, vg) = (Rc::clone(&self.value), Rc::clone(&gamma.value));
        let (rm, rv) = (run_mean.clone(), run_var.clone());
        let tracked = nx.is_some() || ng.is_some() || nb.is_some();
        Ok(self.output(out, tracked, move |g, sink| {
            let (dx, dgamma, dbeta) =
                batch_norm_eval_backward(&vx, &vg, &rm, &rv, pair_shared, eps, g)
                    .expect("forward validated shapes");
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = ng {
                sink.accumulate(n, dgamma);
            }
            if let Some(n) = nb {
                sink.accumulate(n, dbeta);
            }
        }))
    }

    pub fn layer_norm(
        &self,
        gamma: &Var<'t, E>,
        beta: &Var<'t, E>,
        eps: f64,
    ) -> Result<Var<'t, E>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let out = layer_norm(&self.value, &gamma.value, &beta.value, eps)?;
        let (nx, ng, nb) = (self.node, gamma.node, beta.node);
        let (vx, vg) = (Rc::clone(&self.value), Rc::clone(&gamma.value));
        let tracked = nx.is_some() || ng.is_some() || nb.is_some();
        Ok(self.output(out, tracked, move |g, sink| {
            let (dx, dgamma, dbeta) =
                layer_norm_backward(&vx, &vg, eps, g).expect("forward validated shapes");
            if let Some(n) = nx {
                sink.accumulate(n, dx);
            }
            if let Some(n) = ng {
                sink.accumulate(n, dgamma);
            }
            if let Some(n) = nb {
                sink.accumulate(n, dbeta);
            }
        }))
    }

    pub fn narrow(&self, axis: Axis, start: usize, len: usize) -> Result<Var<'t, E>> {
        let out = narrow(&self.value, axis, start, len)?;
        let n = self.node;
        let shape = self.value.shape().clone();
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(
                    n,
                    narrow_backward(&shape, axis, start, g).expect("forward validated"),
                );
            }
        }))
    }

    pub fn tokens_from_map(&self) -> Result<Var<'t, E>> {
        let out = tokens_from_map(&self.value)?;
        let n = self.node;
        let axes = self.value.shape().axes().to_vec();
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                let (h, w) = (axes[1].1, axes[2].1);
                sink.accumulate(n, map_from_tokens(g, h, w).expect("inverse of forward"));
            }
        }))
    }

    pub fn map_from_tokens(&self, h: usize, w: usize) -> Result<Var<'t, E>> {
        let out = map_from_tokens(&self.value, h, w)?;
        let n = self.node;
        Ok(self.output(out, n.is_some(), move |g, sink| {
            if let Some(n) = n {
                sink.accumulate(n, tokens_from_map(g).expect("inverse of forward"));
            }
        }))
    }
}

/// Concatenates vars along `axis`.
pub fn concat_vars<'t, E: Element>(parts: &[&Var<'t, E>], axis: Axis) -> Result<Var<'t, E>> {
    let first = *parts.first().ok_or_else(|| Error::Config("concat of zero vars".into()))?;
    let values: Vec<&Tensor<E>> = parts.iter().map(|p| &*p.value).collect();
    let out = concat(&values, axis)?;
    let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
    let shapes: Vec<Shape> = parts.iter().map(|p| p.value.shape().clone()).collect();
    if nodes.iter().all(Option::is_none) {
        return Ok(first.tape.constant(out));
    }
    Ok(register(first.tape, out, move |g, sink| {
        let shape_refs: Vec<&Shape> = shapes.iter().collect();
        let grads = concat_backward(&shape_refs, axis, g).expect("forward validated shapes");
        for (node, grad) in nodes.iter().zip(grads) {
            if let Some(n) = node {
                sink.accumulate(*n, grad);
            }
        }
    }))
}

/// Outcome of a finite-difference check of one scalar-valued function.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error across every checked coordinate.
    pub max_rel_err: f64,
    /// `(input index, flat element index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    /// Coordinates checked.
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Identity helper that pins the higher-ranked lifetime signature for
/// closures passed to [`grad_check`] (plain closures rarely infer it).
pub fn check_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

/// Validates reverse-mode gradients of `f` against central differences.
///
/// `f` must reduce its inputs to a one-element tensor on the given tape.
/// Coordinates are perturbed by `±step` (`f64` math throughout); relative
/// error is `|a−n| / max(|a|, |n|, 1e−6)`. At most roughly `limit`
/// coordinates per input are probed, evenly strided, to bound cost on
/// large inputs — pass `usize::MAX` to probe everything.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, limit: usize) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(Error::BadShape {
                op: "grad_check",
                shape: out.value().shape().clone(),
                reason: "checked function must return one element".into(),
            });
        }
        Ok(out.value().data()[0])
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::BadShape {
            op: "grad_check",
            shape: out.value().shape().clone(),
            reason: "checked function must return one element".into(),
        });
    }
    let grads = tape.backward(&out, Tensor::full(out.value().shape().clone(), 1.0))?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.value().shape().clone()))
        })
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let stride = 1 + input.len() / limit.max(1);
        let mut ei = 0;
        while ei < input.len() {
            let orig = input.data()[ei];
            work[ii].data_mut()[ei] = orig + step;
            let up = eval(&work)?;
            work[ii].data_mut()[ei] = orig - step;
            let down = eval(&work)?;
            work[ii].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ii].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, ei, a, numeric);
            }
            report.checked += 1;
            ei += stride;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn chain_rule_through_scale_and_relu() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(shape![D = 3], vec![1.0f64, -2.0, 3.0]).unwrap());
        let y = x.scale_const(2.0).relu().sum_all();
        assert_eq!(y.value().data()[0], 2.0 + 0.0 + 6.0);
        let grads = tape.backward_scalar(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = x·x + 3x → dy/dx = 2x + 3.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(shape![D = 2], vec![2.0f64, -1.0]).unwrap());
        let y = x.mul(&x).unwrap().add(&x.scale_const(3.0)).unwrap().sum_all();
        let grads = tape.backward_scalar(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[7.0, 1.0]);
    }

    #[test]
    fn constants_track_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(shape![D = 2], vec![1.0f64, 2.0]).unwrap());
        let y = x.scale_const(5.0).sum_all();
        assert!(y.node().is_none());
        assert!(tape.backward_scalar(&y).is_err());
    }

    #[test]
    fn tape_sweeps_only_once() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(shape![D = 1], vec![1.0f64]).unwrap());
        let y = x.scale_const(2.0);
        tape.backward_scalar(&y).unwrap();
        assert!(tape.backward_scalar(&y).is_err());
    }

    #[test]
    fn grad_check_validates_a_small_composite() {
        // conv → pair-max pool → sigmoid gate → strip pool → sum.
        let x = Tensor::from_fn(shape![T = 1, C = 2, H = 4, W = 4], |i| {
            ((i * 13 + 5) % 17) as f64 * 0.11 - 0.8
        });
        let w = Tensor::from_fn(shape![C = 4, C = 2, H = 3, W = 3], |i| {
            ((i * 7 + 2) % 19) as f64 * 0.05 - 0.45
        });
        let report = grad_check(
            check_fn(|_tape, vars| {
                let y = vars[0]
                    .conv2d(&vars[1], None, crate::ops::conv::ConvSpec::k3())?
                    .group_pool(false)?
                    .sigmoid();
                y.sum_all().scale_const(0.5).mul(&y.mean_all())
            }),
            &[x, w],
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst {:?}", report.worst);
        assert_eq!(report.checked, 32 + 72);
    }

    #[test]
    fn grad_check_flags_a_wrong_gradient() {
        // A deliberately broken adjoint must be caught, not absorbed.
        let x = Tensor::from_vec(shape![D = 3], vec![0.4f64, -0.2, 0.9]).unwrap();
        let report = grad_check(
            check_fn(|tape, vars| {
                let wrong = register(tape, vars[0].value().map(|v| v * v), {
                    let n = vars[0].node().unwrap();
                    let v = vars[0].value_rc();
                    move |g, sink| {
                        // Claims d(x²)/dx = 3x instead of 2x.
                        let bad = v.map(|x| x * 3.0);
                        sink.accumulate(n, crate::ops::dense::mul(g, &bad).unwrap());
                    }
                });
                Ok(wrong.sum_all())
            }),
            &[x],
            1e-4,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3);
    }
}
