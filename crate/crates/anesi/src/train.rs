//! Training: the forward process that generates `(P, w, y)` triples from the
//! belief prior, the inference and perception losses, the per-step update
//! order, evaluation, and checkpointing.
//!
//! Each step first runs perception over the batch, feeds the resulting
//! beliefs to the buffer, refits the prior, then takes one optimizer step on
//! the inference parameters (averaged over `k` draws from the prior) and one
//! on the perception parameters.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{beam_search_output, ExplanationModel, InferError, PredictionModel};
use crate::ndauto::checkpoint::{self, CheckpointError};
use crate::ndauto::{
    init_mlp_params, kernels, mlp_logits, mlp_logits_direct, AutoError, Head, MlpSpec, NodeId,
    ParamBinding, ParamStore, Tape, Tensor,
};
use crate::prior::{
    BeliefBuffer, DirichletPrior, PriorError, BUFFER_CAPACITY, FIT_ITERS, FIT_LR, L2_WEIGHT,
};
use crate::problem::{
    sample_world, world_log_prob, Belief, Output, ProblemError, SpaceSpec, SymbolicFn, World,
};
use crate::pruners::Pruner;
use crate::tasks::{Instance, TaskData};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Auto(#[from] AutoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which loss trains the inference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Prediction model only, negative log-likelihood of `c(w)`.
    Predict,
    /// Prediction and explanation jointly, squared log-ratio matching.
    Explain,
    /// Joint matching with pruner masks on both models.
    Pruning,
    /// Like `Predict`, but conditioning beliefs come straight from the
    /// current batch instead of a fitted prior.
    NoPrior,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Predict => "predict",
            Variant::Explain => "explain",
            Variant::Pruning => "pruning",
            Variant::NoPrior => "no-prior",
        }
    }

    /// Variants scored by the joint matching loss.
    pub fn uses_explanation(self) -> bool {
        matches!(self, Variant::Explain | Variant::Pruning)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predict" => Ok(Variant::Predict),
            "explain" => Ok(Variant::Explain),
            "pruning" => Ok(Variant::Pruning),
            "no-prior" => Ok(Variant::NoPrior),
            other => Err(format!(
                "unknown variant {other:?} (expected predict, explain, pruning or no-prior)"
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Draws from the prior per inference update.
    pub k: usize,
    /// Learning rate for the inference models.
    pub lr: f64,
    /// Learning rate for the perception network.
    pub lr_perception: f64,
    pub hidden: Vec<usize>,
    pub hidden_perception: Vec<usize>,
    /// Beam width at evaluation; defaults to `k`.
    pub beam: Option<usize>,
    pub prior_iters: usize,
    pub prior_lr: f64,
    pub prior_l2: f64,
    pub buffer_capacity: usize,
    /// Refit the prior every this many steps; 0 disables refitting.
    pub prior_refit_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            k: 600,
            lr: 1e-3,
            lr_perception: 1e-3,
            hidden: vec![800, 800, 800],
            hidden_perception: vec![64],
            beam: None,
            prior_iters: FIT_ITERS,
            prior_lr: FIT_LR,
            prior_l2: L2_WEIGHT,
            buffer_capacity: BUFFER_CAPACITY,
            prior_refit_every: 1,
        }
    }
}

impl TrainConfig {
    /// Shrunken defaults that converge on a laptop in minutes. The full-size
    /// defaults above are kept untouched for reference runs.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            k: 100,
            hidden: vec![128, 128],
            ..Self::default()
        }
    }
}

/// One MLP shared across all world variables, mapping a feature vector to a
/// categorical belief row.
#[derive(Debug, Clone)]
pub struct PerceptionNet {
    spec: MlpSpec,
    store: ParamStore,
}

impl PerceptionNet {
    pub fn new(feature_dim: usize, hidden: &[usize], card: usize, rng: &mut ChaCha12Rng) -> Self {
        let spec = MlpSpec::new(feature_dim, hidden.to_vec(), card, Head::Softmax);
        let mut store = ParamStore::new();
        init_mlp_params(&mut store, "", &spec, rng);
        Self { spec, store }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.input
    }

    pub fn card(&self) -> usize {
        self.spec.output
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Belief over `space` from one feature vector per variable.
    pub fn forward(&self, features: &[Vec<f64>], space: &SpaceSpec) -> Result<Belief, TrainError> {
        if features.len() != space.num_vars() {
            return Err(TrainError::Mismatch(format!(
                "{} feature vectors for {} variables",
                features.len(),
                space.num_vars()
            )));
        }
        let mut rows = Vec::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if space.card(i) != self.spec.output {
                return Err(TrainError::Mismatch(format!(
                    "variable {i} has {} options, perception outputs {}",
                    space.card(i),
                    self.spec.output
                )));
            }
            let logits = mlp_logits_direct(&self.store, "", &self.spec, f)?;
            let mut row = vec![0.0; logits.len()];
            kernels::softmax(&logits, &mut row);
            rows.push(row);
        }
        Ok(Belief::new(space, rows)?)
    }

    /// Tape node holding the flattened belief, for gradient flow into the
    /// perception parameters. Shares kernels with [`Self::forward`], so the
    /// values agree bitwise.
    pub fn belief_node(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        features: &[Vec<f64>],
    ) -> Result<NodeId, TrainError> {
        let mut rows = Vec::with_capacity(features.len());
        for f in features {
            let input = tape.leaf(Tensor::vector(f.clone()));
            let logits = mlp_logits(tape, binding, "", &self.spec, input)?;
            rows.push(tape.softmax(logits));
        }
        Ok(tape.concat(&rows)?)
    }
}

/// `-log q_p(y | P)` with the belief supplied as a tape node.
pub fn loss_pred(
    tape: &mut Tape,
    binding: &ParamBinding,
    pred: &PredictionModel,
    belief_node: NodeId,
    y: &Output,
    pruner: Option<&dyn Pruner>,
) -> Result<NodeId, TrainError> {
    let lp = pred.log_prob_tape(tape, binding, belief_node, &y.0, pruner)?;
    Ok(tape.neg(lp))
}

/// `(log q(w, y | P) - log p(w | P))^2` with the target detached: gradients
/// flow only through the joint model term.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint_match(
    tape: &mut Tape,
    bind_pred: &ParamBinding,
    bind_expl: &ParamBinding,
    pred: &PredictionModel,
    expl: &ExplanationModel,
    belief_node: NodeId,
    belief: &Belief,
    w: &World,
    y: &Output,
    pruner: Option<&dyn Pruner>,
) -> Result<NodeId, TrainError> {
    let lp_y = pred.log_prob_tape(tape, bind_pred, belief_node, &y.0, pruner)?;
    let lp_w = expl.log_prob_tape(tape, bind_expl, belief_node, y, &w.0, pruner)?;
    let logq = tape.add(lp_y, lp_w)?;
    let target = world_log_prob(belief, w)?;
    let residual = tape.add_const(logq, -target);
    Ok(tape.square(residual))
}

/// On-policy form of the joint matching loss. Returns a surrogate node whose
/// gradient is `2 (log q - log p) * grad(log q)` (the weighting factor is
/// detached) together with the actual squared residual; the surrogate's own
/// value is not the loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_joint_match_onpolicy(
    tape: &mut Tape,
    bind_pred: &ParamBinding,
    bind_expl: &ParamBinding,
    pred: &PredictionModel,
    expl: &ExplanationModel,
    belief_node: NodeId,
    belief: &Belief,
    w: &World,
    y: &Output,
    pruner: Option<&dyn Pruner>,
) -> Result<(NodeId, f64), TrainError> {
    let lq_y = pred.log_prob(belief, y, pruner)?;
    let lq_w = expl.log_prob(belief, y, w, pruner)?;
    let residual = lq_y + lq_w - world_log_prob(belief, w)?;
    if !residual.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "on-policy residual for w = {:?}, y = {:?}",
            w.0, y.0
        )));
    }
    let lp_y = pred.log_prob_tape(tape, bind_pred, belief_node, &y.0, pruner)?;
    let lp_w = expl.log_prob_tape(tape, bind_expl, belief_node, y, &w.0, pruner)?;
    let logq = tape.add(lp_y, lp_w)?;
    Ok((tape.scale(logq, 2.0 * residual), residual * residual))
}

/// `-log q_p(y | f_theta(x))`: the perception loss. The caller applies the
/// resulting gradients to the perception parameters only; the prediction
/// model acts as a fixed scorer.
#[allow(clippy::too_many_arguments)]
pub fn loss_perception(
    tape: &mut Tape,
    bind_perc: &ParamBinding,
    bind_pred: &ParamBinding,
    perception: &PerceptionNet,
    pred: &PredictionModel,
    features: &[Vec<f64>],
    y: &Output,
    pruner: Option<&dyn Pruner>,
) -> Result<NodeId, TrainError> {
    let belief_node = perception.belief_node(tape, bind_perc, features)?;
    loss_pred(tape, bind_pred, pred, belief_node, y, pruner)
}

/// `-log q_e(w | y, f_theta(x))` for instances with labeled worlds: trains
/// perception (and optionally the explanation model) directly on `w`.
#[allow(clippy::too_many_arguments)]
pub fn loss_perception_supervised(
    tape: &mut Tape,
    bind_perc: &ParamBinding,
    bind_expl: &ParamBinding,
    perception: &PerceptionNet,
    expl: &ExplanationModel,
    features: &[Vec<f64>],
    y: &Output,
    w: &World,
    pruner: Option<&dyn Pruner>,
) -> Result<NodeId, TrainError> {
    let belief_node = perception.belief_node(tape, bind_perc, features)?;
    let lp = expl.log_prob_tape(tape, bind_expl, belief_node, y, &w.0, pruner)?;
    Ok(tape.neg(lp))
}

/// `-log q_p(y_sat | f_theta(x))` where `y_sat` is the output the constraint
/// requires: pushes perception toward beliefs that satisfy it. Structurally
/// the perception loss with a pinned target.
#[allow(clippy::too_many_arguments)]
pub fn loss_semantic(
    tape: &mut Tape,
    bind_perc: &ParamBinding,
    bind_pred: &ParamBinding,
    perception: &PerceptionNet,
    pred: &PredictionModel,
    features: &[Vec<f64>],
    y_sat: &Output,
    pruner: Option<&dyn Pruner>,
) -> Result<NodeId, TrainError> {
    loss_perception(
        tape, bind_perc, bind_pred, perception, pred, features, y_sat, pruner,
    )
}

/// Everything a run trains: perception, both inference models, the prior and
/// its buffer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub perception: PerceptionNet,
    pub pred: PredictionModel,
    pub expl: ExplanationModel,
    pub prior: DirichletPrior,
    pub buffer: BeliefBuffer,
}

impl TrainState {
    /// Fresh state with seeded initialization. World variables must share one
    /// cardinality because the perception net is applied per variable.
    pub fn new(
        task: &dyn SymbolicFn,
        feature_dim: usize,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let world = task.world_space();
        let card = world.card(0);
        if (0..world.num_vars()).any(|i| world.card(i) != card) {
            return Err(TrainError::Mismatch(
                "world variables must share one cardinality".into(),
            ));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let perception = PerceptionNet::new(feature_dim, &config.hidden_perception, card, &mut rng);
        let pred = PredictionModel::new(world, task.output_space(), &config.hidden, &mut rng);
        let expl = ExplanationModel::new(world, task.output_space(), &config.hidden, &mut rng);
        Ok(Self {
            perception,
            pred,
            expl,
            prior: DirichletPrior::new(world),
            buffer: BeliefBuffer::new(config.buffer_capacity),
        })
    }

    /// Write all parameters to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for (name, tensor) in self.perception.store().iter() {
            named.push((format!("theta.{name}"), tensor));
        }
        for (name, tensor) in self.pred.store().iter() {
            named.push((format!("pred.{name}"), tensor));
        }
        for (name, tensor) in self.expl.store().iter() {
            named.push((format!("expl.{name}"), tensor));
        }
        let prior_u: Vec<(String, Tensor)> = (0..self.prior.space().num_vars())
            .map(|i| (format!("prior.u{i}"), Tensor::vector(self.prior.u_row(i).to_vec())))
            .collect();
        for (name, tensor) in &prior_u {
            named.push((name.clone(), tensor));
        }
        checkpoint::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        Ok(())
    }

    /// Load a checkpoint written by [`Self::save`] into matching shapes.
    pub fn load(&mut self, path: &Path) -> Result<(), TrainError> {
        let entries = checkpoint::load(path)?;
        for (name, tensor) in entries {
            if let Some(rest) = name.strip_prefix("theta.") {
                set_param(self.perception.store_mut(), rest, tensor)?;
            } else if let Some(rest) = name.strip_prefix("pred.") {
                set_param(self.pred.store_mut(), rest, tensor)?;
            } else if let Some(rest) = name.strip_prefix("expl.") {
                set_param(self.expl.store_mut(), rest, tensor)?;
            } else if let Some(rest) = name.strip_prefix("prior.u") {
                let var: usize = rest.parse().map_err(|_| {
                    TrainError::Mismatch(format!("bad prior entry name {name:?}"))
                })?;
                if var >= self.prior.space().num_vars() {
                    return Err(TrainError::Mismatch(format!(
                        "prior entry {name:?} out of range"
                    )));
                }
                self.prior.set_u_row(var, tensor.data())?;
            } else {
                return Err(TrainError::Mismatch(format!(
                    "unrecognized checkpoint entry {name:?}"
                )));
            }
        }
        Ok(())
    }
}

/// During loss construction the sampled `(w, y)` pairs are consistent by
/// construction and the pruner is complete, so a dead branch can only mean
/// the logits went non-finite. Report it as the training abort it is.
fn dead_is_nonfinite(e: TrainError, step: usize, variant: Variant) -> TrainError {
    match e {
        TrainError::Auto(AutoError::DeadBranch)
        | TrainError::Infer(InferError::DeadBranch { .. })
        | TrainError::Infer(InferError::Auto(AutoError::DeadBranch)) => TrainError::NonFinite(
            format!("non-finite inference logits at step {step} ({variant})"),
        ),
        other => other,
    }
}

fn check_finite_params(
    store: &ParamStore,
    what: &str,
    step: usize,
    variant: Variant,
) -> Result<(), TrainError> {
    for (name, tensor) in store.iter() {
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(format!(
                "{what} parameter {name} at step {step} ({variant})"
            )));
        }
    }
    Ok(())
}

/// A non-finite gradient is a training abort, not an internal bug: name the
/// update and step so the failure is diagnosable.
fn wrap_update(e: AutoError, what: &str, step: usize, variant: Variant) -> TrainError {
    match e {
        AutoError::NonFiniteGrad(name) => TrainError::NonFinite(format!(
            "{what} gradient for {name} at step {step} ({variant})"
        )),
        other => TrainError::Auto(other),
    }
}

fn set_param(store: &mut ParamStore, name: &str, tensor: Tensor) -> Result<(), TrainError> {
    match store.get(name) {
        None => Err(TrainError::Mismatch(format!(
            "checkpoint entry {name:?} has no matching parameter"
        ))),
        Some(existing) if existing.shape() != tensor.shape() => Err(TrainError::Mismatch(format!(
            "checkpoint entry {name:?}: shape {:?} vs {:?}",
            tensor.shape(),
            existing.shape()
        ))),
        Some(_) => {
            store.insert(name.to_string(), tensor);
            Ok(())
        }
    }
}

/// Per-step loss values, averaged over their respective draws.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_pred: f64,
    pub loss_joint: Option<f64>,
    pub loss_perception: f64,
}

/// One training step: perception forward on the batch, buffer append, prior
/// refit, one Adam step on the inference models over `k` prior draws, one
/// Adam step on perception.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    task: &dyn SymbolicFn,
    batch: &[Instance],
    variant: Variant,
    pruner: Option<&dyn Pruner>,
    config: &TrainConfig,
    step_index: usize,
    rng: &mut ChaCha12Rng,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Mismatch("empty batch".into()));
    }
    // A previous update can overflow parameters without any gradient being
    // non-finite; catch that here as the same training abort.
    check_finite_params(state.perception.store(), "perception", step_index, variant)?;
    check_finite_params(state.pred.store(), "prediction", step_index, variant)?;
    check_finite_params(state.expl.store(), "explanation", step_index, variant)?;

    let world = task.world_space();
    let beliefs: Vec<Belief> = batch
        .iter()
        .map(|inst| state.perception.forward(&inst.features, world))
        .collect::<Result<_, _>>()?;
    for b in &beliefs {
        state.buffer.push(b.clone());
    }
    if variant != Variant::NoPrior
        && config.prior_refit_every > 0
        && step_index % config.prior_refit_every == 0
    {
        state
            .prior
            .fit(&state.buffer, config.prior_iters, config.prior_lr, config.prior_l2)?;
    }

    // inference update over k forward-process draws
    let mut tape = Tape::new();
    let bind_pred = state.pred.store().bind(&mut tape);
    let bind_expl = state.expl.store().bind(&mut tape);
    let mut parts = Vec::with_capacity(config.k);
    let mut pred_nll_sum = 0.0;
    for draw in 0..config.k {
        let belief = if variant == Variant::NoPrior {
            beliefs[draw % beliefs.len()].clone()
        } else {
            state.prior.sample_belief(rng)
        };
        let w = sample_world(&belief, rng);
        let y = task.apply(&w);
        pred_nll_sum -= state
            .pred
            .log_prob(&belief, &y, pruner)
            .map_err(|e| dead_is_nonfinite(e.into(), step_index, variant))?;
        let belief_node = tape.leaf(Tensor::vector(belief.flatten()));
        let node = match variant {
            Variant::Predict | Variant::NoPrior => {
                loss_pred(&mut tape, &bind_pred, &state.pred, belief_node, &y, pruner)
                    .map_err(|e| dead_is_nonfinite(e, step_index, variant))?
            }
            Variant::Explain | Variant::Pruning => loss_joint_match(
                &mut tape,
                &bind_pred,
                &bind_expl,
                &state.pred,
                &state.expl,
                belief_node,
                &belief,
                &w,
                &y,
                pruner,
            )
            .map_err(|e| dead_is_nonfinite(e, step_index, variant))?,
        };
        parts.push(node);
    }
    let total = tape.add_n(&parts)?;
    let mean = tape.scale(total, 1.0 / config.k as f64);
    let mean_value = tape.value(mean).item();
    if !mean_value.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "inference loss at step {step_index} ({variant})"
        )));
    }
    let grads = tape.backward(mean)?;
    let pred_grads = bind_pred.collect(state.pred.store(), &grads);
    state
        .pred
        .store_mut()
        .adam_step(&pred_grads, config.lr)
        .map_err(|e| wrap_update(e, "prediction", step_index, variant))?;
    if variant.uses_explanation() {
        let expl_grads = bind_expl.collect(state.expl.store(), &grads);
        state
            .expl
            .store_mut()
            .adam_step(&expl_grads, config.lr)
            .map_err(|e| wrap_update(e, "explanation", step_index, variant))?;
    }
    let loss_pred_mean = pred_nll_sum / config.k as f64;
    let loss_joint_mean = variant.uses_explanation().then_some(mean_value);

    // perception update on the batch
    let mut tape = Tape::new();
    let bind_perc = state.perception.store().bind(&mut tape);
    let bind_pred = state.pred.store().bind(&mut tape);
    let mut parts = Vec::with_capacity(batch.len());
    for inst in batch {
        parts.push(
            loss_perception(
                &mut tape,
                &bind_perc,
                &bind_pred,
                &state.perception,
                &state.pred,
                &inst.features,
                &inst.output,
                pruner,
            )
            .map_err(|e| dead_is_nonfinite(e, step_index, variant))?,
        );
    }
    let total = tape.add_n(&parts)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let perc_value = tape.value(mean).item();
    if !perc_value.is_finite() {
        return Err(TrainError::NonFinite(format!(
            "perception loss at step {step_index} ({variant})"
        )));
    }
    let grads = tape.backward(mean)?;
    let perc_grads = bind_perc.collect(state.perception.store(), &grads);
    state
        .perception
        .store_mut()
        .adam_step(&perc_grads, config.lr_perception)
        .map_err(|e| wrap_update(e, "perception", step_index, variant))?;

    Ok(StepStats {
        loss_pred: loss_pred_mean,
        loss_joint: loss_joint_mean,
        loss_perception: perc_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    /// Fraction where the symbolic function applied to per-variable argmax
    /// beliefs reproduces the label.
    pub acc_symbolic: f64,
    /// Fraction where the prediction model's beam output reproduces it.
    pub acc_neural: f64,
    /// Fraction of individual world variables decoded correctly.
    pub acc_digit: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    state: &TrainState,
    task: &dyn SymbolicFn,
    data: &[Instance],
    beam: usize,
    pruner: Option<&dyn Pruner>,
) -> Result<EvalStats, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Mismatch("empty evaluation set".into()));
    }
    let world = task.world_space();
    let mut sym = 0usize;
    let mut neural = 0usize;
    let mut digits_right = 0usize;
    let mut digits_total = 0usize;
    for inst in data {
        let belief = state.perception.forward(&inst.features, world)?;
        let decoded: Vec<usize> = belief.rows().iter().map(|r| argmax(r)).collect();
        for (d, t) in decoded.iter().zip(&inst.digits) {
            digits_right += usize::from(d == t);
            digits_total += 1;
        }
        if task.apply(&World(decoded)) == inst.output {
            sym += 1;
        }
        if beam_search_output(&state.pred, &belief, beam, pruner)? == inst.output {
            neural += 1;
        }
    }
    Ok(EvalStats {
        acc_symbolic: sym as f64 / data.len() as f64,
        acc_neural: neural as f64 / data.len() as f64,
        acc_digit: digits_right as f64 / digits_total as f64,
    })
}

/// One JSON line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub variant: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub acc_symbolic: f64,
    pub acc_neural: f64,
    pub acc_digit: f64,
    pub loss_pred: f64,
    pub loss_joint: Option<f64>,
    pub seconds: f64,
}

/// Full training run: shuffled batches each epoch, evaluation on the test
/// split, one metrics record per epoch handed to `on_epoch` as it completes.
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    state: &mut TrainState,
    task: &dyn SymbolicFn,
    n: usize,
    train: &TaskData,
    test: &TaskData,
    variant: Variant,
    pruner: Option<&dyn Pruner>,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>, TrainError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let beam = config.beam.unwrap_or(config.k);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step_index = 0usize;
    let mut order: Vec<usize> = (0..train.instances.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut pred_sum = 0.0;
        let mut joint_sum = 0.0;
        let mut joint_count = 0usize;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Instance> = chunk.iter().map(|&i| train.instances[i].clone()).collect();
            let stats = train_step(
                state, task, &batch, variant, pruner, config, step_index, &mut rng,
            )?;
            step_index += 1;
            steps += 1;
            pred_sum += stats.loss_pred;
            if let Some(j) = stats.loss_joint {
                joint_sum += j;
                joint_count += 1;
            }
        }
        let eval = evaluate(state, task, &test.instances, beam, pruner)
            .map_err(|e| dead_is_nonfinite(e, step_index, variant))?;
        let record = MetricsRecord {
            epoch,
            variant: variant.as_str().to_string(),
            n,
            acc_symbolic: eval.acc_symbolic,
            acc_neural: eval.acc_neural,
            acc_digit: eval.acc_digit,
            loss_pred: pred_sum / steps.max(1) as f64,
            loss_joint: (joint_count > 0).then(|| joint_sum / joint_count as f64),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(records)
}
