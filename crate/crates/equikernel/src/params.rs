//! Named parameter storage and the per-forward binding context.
//!
//! Every learned tensor in the model lives in a [`ParamStore`] under a
//! dotted path name (`"backbone.stage1.conv1.weight"`). Blocks hold
//! [`ParamId`] handles, never tensors, so one store serves the optimizer
//! (kind-filtered weight decay), the checkpoint writer (deterministic
//! name iteration), the parameter-accounting report, and forward passes
//! (parameters bound to tape variables once per pass).

use crate::element::Element;
use crate::error::Result;
use crate::ops::norm::{update_running, BnSaved};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Epsilon shared by every batch-norm and layer-norm site.
pub const NORM_EPS: f64 = 1e-5;

/// Running-statistic momentum: `running = 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// What a stored tensor is, which decides decay and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernels and linear matrices — trained, weight-decayed.
    Weight,
    /// Additive biases — trained, never decayed.
    Bias,
    /// Norm scale (γ) — trained, never decayed.
    NormScale,
    /// Norm shift (β) — trained, never decayed.
    NormShift,
    /// Batch-norm running statistics — checkpointed, not trained.
    RunningStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningStat)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry<E: Element> {
    name: String,
    kind: ParamKind,
    value: Tensor<E>,
}

/// Insertion-ordered, uniquely named parameter set.
pub struct ParamStore<E: Element> {
    entries: Vec<Entry<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Registers a tensor under a unique dotted path.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(Entry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// `(name, kind, tensor)` in insertion order — the checkpoint order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<E>)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.kind, &e.value))
    }

    /// Looks a parameter up by its full name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count over entries selected by `pred`.
    pub fn scalar_count(&self, mut pred: impl FnMut(&str, ParamKind) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(&e.name, e.kind))
            .map(|e| e.value.len())
            .sum()
    }

    /// Applies the deferred batch-norm running-stat updates of one pass.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<E>]) {
        for u in updates {
            // Split borrows: mean and var are distinct entries by construction.
            assert_ne!(u.mean.0, u.var.0, "mean and var must be distinct entries");
            let (lo, hi, mean_first) = if u.mean.0 < u.var.0 {
                (u.mean.0, u.var.0, true)
            } else {
                (u.var.0, u.mean.0, false)
            };
            let (a, b) = self.entries.split_at_mut(hi);
            let (first, second) = (&mut a[lo].value, &mut b[0].value);
            let (rm, rv) = if mean_first {
                (first, second)
            } else {
                (second, first)
            };
            update_running(rm, rv, &u.saved, BN_MOMENTUM);
        }
    }
}

/// Fan-in uniform init for a `[D_out, D_in]` linear weight.
pub fn init_linear<E: Element>(
    rng: &mut rand_chacha::ChaCha8Rng,
    dout: usize,
    din: usize,
) -> Tensor<E> {
    let limit = crate::rng::fan_in_limit(din);
    Tensor::from_fn(crate::shape![D = dout, D = din], |_| {
        E::from_f64(crate::rng::uniform_symmetric(rng, limit))
    })
}

/// Handles for one batch-norm site.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    /// Statistics and affine tied across channel pairs `(c, c+C)`.
    pub pair_shared: bool,
}

impl BnIds {
    /// Registers γ=1, β=0, running mean=0, running var=1 under
    /// `prefix.{scale,shift,running_mean,running_var}`.
    pub fn add<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        pair_shared: bool,
    ) -> Self {
        let ch = crate::shape![C = channels];
        let ones = Tensor::from_fn(ch.clone(), |_| E::one());
        BnIds {
            scale: store.add(format!("{prefix}.scale"), ParamKind::NormScale, ones.clone()),
            shift: store.add(
                format!("{prefix}.shift"),
                ParamKind::NormShift,
                Tensor::zeros(ch.clone()),
            ),
            mean: store.add(
                format!("{prefix}.running_mean"),
                ParamKind::RunningStat,
                Tensor::zeros(ch),
            ),
            var: store.add(format!("{prefix}.running_var"), ParamKind::RunningStat, ones),
            pair_shared,
        }
    }
}

/// One deferred running-statistics update, recorded during a training
/// forward and applied to the store after the step.
pub struct BnUpdate<E: Element> {
    pub mean: ParamId,
    pub var: ParamId,
    pub saved: BnSaved<E>,
}

/// Whether a pass uses batch statistics (and tracks gradients) or running
/// statistics (and treats parameters as constants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape, the bound parameter variables, and the
/// collected side effects (running-stat updates, optional activation
/// trace).
pub struct Pass<'t, 's, E: Element> {
    pub tape: &'t Tape<E>,
    pub store: &'s ParamStore<E>,
    pub mode: Mode,
    bound: Vec<Option<Var<'t, E>>>,
    pub bn_updates: Vec<BnUpdate<E>>,
    /// When set, [`Pass::record`] clones named activations into it.
    pub trace: Option<Vec<(String, Tensor<E>)>>,
}

impl<'t, 's, E: Element> Pass<'t, 's, E> {
    /// Binds every trainable parameter: as tape leaves in [`Mode::Train`]
    /// (gradients accumulate), as constants in [`Mode::Eval`].
    pub fn new(tape: &'t Tape<E>, store: &'s ParamStore<E>, mode: Mode) -> Self {
        let bound = store
            .entries
            .iter()
            .map(|e| {
                if !e.kind.trainable() {
                    None
                } else if mode == Mode::Train {
                    Some(tape.leaf(e.value.clone()))
                } else {
                    Some(tape.constant(e.value.clone()))
                }
            })
            .collect();
        Pass {
            tape,
            store,
            mode,
            bound,
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    /// The bound variable for a trainable parameter.
    pub fn var(&self, id: ParamId) -> &Var<'t, E> {
        self.bound[id.0]
            .as_ref()
            .expect("running statistics are read from the store, not bound")
    }

    /// Tape node of a bound parameter (for gradient lookup after backward).
    pub fn node(&self, id: ParamId) -> Option<usize> {
        self.bound[id.0].as_ref().and_then(|v| v.node())
    }

    /// Wraps an input tensor as an untracked variable.
    pub fn input(&self, t: Tensor<E>) -> Var<'t, E> {
        self.tape.constant(t)
    }

    /// Batch norm honoring the pass mode; training-mode statistics are
    /// queued for the deferred running update.
    pub fn bn(&mut self, x: &Var<'t, E>, ids: &BnIds) -> Result<Var<'t, E>> {
        let gamma = self.var(ids.scale).clone();
        let beta = self.var(ids.shift).clone();
        match self.mode {
            Mode::Train => {
                let (y, saved) = x.batch_norm_train(&gamma, &beta, ids.pair_shared, NORM_EPS)?;
                self.bn_updates.push(BnUpdate {
                    mean: ids.mean,
                    var: ids.var,
                    saved,
                });
                Ok(y)
            }
            Mode::Eval => x.batch_norm_eval(
                &gamma,
                &beta,
                self.store.get(ids.mean),
                self.store.get(ids.var),
                ids.pair_shared,
                NORM_EPS,
            ),
        }
    }

    /// Records a named activation when tracing is enabled.
    pub fn record(&mut self, name: &str, v: &Var<'t, E>) {
        if let Some(trace) = &mut self.trace {
            trace.push((name.to_string(), v.value().clone()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    #[test]
    fn store_round_trips_names_kinds_and_order() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("m.w", ParamKind::Weight, Tensor::zeros(shape![D = 3]));
        let b = s.add("m.b", ParamKind::Bias, Tensor::zeros(shape![D = 2]));
        assert_eq!(s.name(a), "m.w");
        assert_eq!(s.kind(b), ParamKind::Bias);
        assert_eq!(s.find("m.b"), Some(b));
        assert_eq!(s.find("m.x"), None);
        let names: Vec<_> = s.iter().map(|(n, _, _)| n.to_string()).collect();
        assert_eq!(names, ["m.w", "m.b"]);
        assert_eq!(s.scalar_count(|_, k| k.decays()), 3);
        assert_eq!(s.scalar_count(|_, _| true), 5);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("m.w", ParamKind::Weight, Tensor::zeros(shape![D = 1]));
        s.add("m.w", ParamKind::Weight, Tensor::zeros(shape![D = 1]));
    }

    #[test]
    fn train_mode_bn_queues_the_running_update_eval_mode_reads_it() {
        let mut s = ParamStore::<f64>::new();
        let bn = BnIds::add(&mut s, "m.bn", 2, false);
        let x = Tensor::from_vec(
            shape![N = 2, C = 2],
            vec![1.0f64, 10.0, 3.0, 30.0],
        )
        .unwrap();

        let tape = Tape::new();
        let mut pass = Pass::new(&tape, &s, Mode::Train);
        let xv = pass.input(x.clone());
        let y = pass.bn(&xv, &bn).unwrap();
        // Batch stats: mean (2, 20), biased var (1, 100) → normalized ±1.
        assert!((y.value().data()[0] + 1.0).abs() < 1e-4);
        assert_eq!(pass.bn_updates.len(), 1);
        let updates = std::mem::take(&mut pass.bn_updates);
        drop(pass);
        s.apply_bn_updates(&updates);
        // running = 0.9·init + 0.1·batch.
        assert!((s.get(bn.mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((s.get(bn.mean).data()[1] - 2.0).abs() < 1e-12);
        assert!((s.get(bn.var).data()[0] - (0.9 + 0.1)).abs() < 1e-12);
        assert!((s.get(bn.var).data()[1] - (0.9 + 10.0)).abs() < 1e-12);

        let tape2 = Tape::new();
        let mut pass2 = Pass::new(&tape2, &s, Mode::Eval);
        let xv2 = pass2.input(x);
        let y2 = pass2.bn(&xv2, &bn).unwrap();
        // Eval normalizes with the stored running stats.
        let want = (1.0 - 0.2) / (1.0f64 + NORM_EPS).sqrt();
        assert!((y2.value().data()[0] - want).abs() < 1e-12);
        assert!(pass2.bn_updates.is_empty());
    }

    #[test]
    fn eval_mode_binds_parameters_as_constants() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("m.w", ParamKind::Weight, Tensor::zeros(shape![D = 1]));
        let tape = Tape::new();
        let pass = Pass::new(&tape, &s, Mode::Eval);
        assert!(pass.node(w).is_none());
        let pass_t = Pass::new(&tape, &s, Mode::Train);
        assert!(pass_t.node(w).is_some());
    }
}
