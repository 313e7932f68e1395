//! Factorized autoregressive inference models: the prediction model
//! approximating the weighted model count and the explanation model
//! approximating the posterior over worlds. Both generate one variable at a
//! time; a factor network per variable consumes the conditioning vector
//! followed by the one-hot prefix of already-generated variables,
//! zero-padded so every factor of a model shares one input width.
//!
//! Sampling draws the output first, then the world given the complete
//! output. Pruner masks are applied by renormalizing the factor softmax over
//! the surviving options.

use rand::Rng;
use thiserror::Error;

use crate::ndauto::{
    init_mlp_params, init_mlp_zeros, kernels, mlp_logits, mlp_logits_direct, AutoError, Head,
    MlpSpec, NodeId, ParamBinding, ParamStore, Tape, Tensor,
};
use crate::problem::{Belief, Output, SpaceSpec, World};
use crate::pruners::Pruner;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("dead branch at prefix {prefix:?}: mask leaves no admissible option")]
    DeadBranch { prefix: Vec<usize> },
    #[error("model/input mismatch: {0}")]
    Mismatch(String),
    #[error("teacher-forced sequence {seq:?} crosses a pruned option at variable {var}")]
    ForcedThroughMask { seq: Vec<usize>, var: usize },
    #[error(transparent)]
    Auto(#[from] AutoError),
}

/// Zero/one mask over one variable's options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunerMask {
    bits: Vec<bool>,
}

impl PrunerMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn one_hot(len: usize, at: usize) -> Self {
        let mut bits = vec![false; len];
        bits[at] = true;
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn allows(&self, option: usize) -> bool {
        self.bits[option]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// True when at least one option survives.
    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count_allowed(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mask provider for one autoregressive rollout: variable index and prefix
/// in, option mask out.
type MaskFn<'a> = dyn Fn(usize, &[usize]) -> Option<PrunerMask> + 'a;

/// Autoregressive model over `space`, conditioned on a fixed-width vector.
/// One independent MLP per variable; factor `i` maps
/// `[cond | one-hot prefix, zero-padded]` to logits over `space.card(i)`.
#[derive(Debug, Clone)]
struct SequenceModel {
    space: SpaceSpec,
    cond_width: usize,
    store: ParamStore,
    specs: Vec<MlpSpec>,
}

impl SequenceModel {
    fn new(space: SpaceSpec, cond_width: usize, hidden: &[usize], rng: Option<&mut dyn rand::RngCore>) -> Self {
        let input = cond_width + space.onehot_width();
        let mut store = ParamStore::new();
        let specs: Vec<MlpSpec> = (0..space.num_vars())
            .map(|i| MlpSpec::new(input, hidden.to_vec(), space.card(i), Head::Softmax))
            .collect();
        match rng {
            Some(mut rng) => {
                for (i, spec) in specs.iter().enumerate() {
                    init_mlp_params(&mut store, &factor_prefix(i), spec, &mut rng);
                }
            }
            None => {
                for (i, spec) in specs.iter().enumerate() {
                    init_mlp_zeros(&mut store, &factor_prefix(i), spec);
                }
            }
        }
        Self {
            space,
            cond_width,
            store,
            specs,
        }
    }

    fn check_cond(&self, len: usize) -> Result<(), InferError> {
        if len != self.cond_width {
            return Err(InferError::Mismatch(format!(
                "conditioning width {len}, model expects {}",
                self.cond_width
            )));
        }
        Ok(())
    }

    fn prefix_onehot(&self, prefix: &[usize]) -> Vec<f64> {
        let mut enc = vec![0.0; self.space.onehot_width()];
        self.space.encode_prefix(prefix, &mut enc);
        enc
    }

    fn factor_logits(&self, cond: &[f64], prefix: &[usize]) -> Result<Vec<f64>, InferError> {
        self.check_cond(cond.len())?;
        let var = prefix.len();
        let mut input = Vec::with_capacity(self.cond_width + self.space.onehot_width());
        input.extend_from_slice(cond);
        input.extend(self.prefix_onehot(prefix));
        Ok(mlp_logits_direct(
            &self.store,
            &factor_prefix(var),
            &self.specs[var],
            &input,
        )?)
    }

    /// Masked log-softmax over factor `prefix.len()`.
    fn factor_log_probs(
        &self,
        cond: &[f64],
        prefix: &[usize],
        mask: Option<&PrunerMask>,
    ) -> Result<Vec<f64>, InferError> {
        let logits = self.factor_logits(cond, prefix)?;
        let mut out = vec![0.0; logits.len()];
        let ok = kernels::log_softmax_masked(&logits, mask.map(|m| m.bits()), &mut out);
        if !ok {
            return Err(InferError::DeadBranch {
                prefix: prefix.to_vec(),
            });
        }
        Ok(out)
    }

    /// Teacher-forced log-probability; `NEG_INFINITY` when `seq` crosses a
    /// masked option.
    fn log_prob(&self, cond: &[f64], seq: &[usize], masks: &MaskFn) -> Result<f64, InferError> {
        if !self.space.contains(seq) {
            return Err(InferError::Mismatch(format!(
                "sequence {seq:?} outside the model's space"
            )));
        }
        let mut total = 0.0;
        for (var, &choice) in seq.iter().enumerate() {
            let mask = masks(var, &seq[..var]);
            if let Some(m) = &mask {
                if !m.allows(choice) {
                    return Ok(f64::NEG_INFINITY);
                }
            }
            let lp = self.factor_log_probs(cond, &seq[..var], mask.as_ref())?;
            total += lp[choice];
        }
        Ok(total)
    }

    /// Ancestral sampling; returns the sequence and its log-probability.
    fn sample(
        &self,
        cond: &[f64],
        masks: &MaskFn,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Vec<usize>, f64), InferError> {
        let mut seq = Vec::with_capacity(self.space.num_vars());
        let mut total = 0.0;
        for var in 0..self.space.num_vars() {
            let mask = masks(var, &seq);
            let lp = self.factor_log_probs(cond, &seq, mask.as_ref())?;
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = None;
            for (option, l) in lp.iter().enumerate() {
                if mask.as_ref().is_some_and(|m| !m.allows(option)) {
                    continue;
                }
                cum += l.exp();
                if u < cum {
                    chosen = Some(option);
                    break;
                }
            }
            let choice = match chosen {
                Some(c) => c,
                // numerical residue: fall back to the last admissible option
                None => (0..lp.len())
                    .rev()
                    .find(|&o| mask.as_ref().map_or(true, |m| m.allows(o)))
                    .expect("factor_log_probs guarantees a live option"),
            };
            total += lp[choice];
            seq.push(choice);
        }
        Ok((seq, total))
    }

    /// Beam search over complete sequences. Ties in score prefer the
    /// lexicographically smaller sequence; with `width` at least the space
    /// size this is exact argmax.
    fn beam(&self, cond: &[f64], width: usize, masks: &MaskFn) -> Result<Vec<usize>, InferError> {
        assert!(width >= 1, "beam width must be positive");
        let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        for var in 0..self.space.num_vars() {
            let mut candidates = Vec::with_capacity(beam.len() * self.space.card(var));
            for (prefix, score) in &beam {
                let mask = masks(var, prefix);
                let lp = self.factor_log_probs(cond, prefix, mask.as_ref())?;
                for (option, l) in lp.iter().enumerate() {
                    if mask.as_ref().is_some_and(|m| !m.allows(option)) {
                        continue;
                    }
                    let mut ext = prefix.clone();
                    ext.push(option);
                    candidates.push((ext, score + l));
                }
            }
            candidates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("scores are never NaN")
                    .then_with(|| a.0.cmp(&b.0))
            });
            candidates.truncate(width);
            beam = candidates;
        }
        Ok(beam.swap_remove(0).0)
    }

    /// Tape node for the teacher-forced log-probability: the differentiable
    /// counterpart of [`Self::log_prob`]. A sequence through a masked option
    /// is an error here, because its -inf value must never reach the
    /// optimizer.
    fn log_prob_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        cond: NodeId,
        seq: &[usize],
        masks: &MaskFn,
    ) -> Result<NodeId, InferError> {
        if !self.space.contains(seq) {
            return Err(InferError::Mismatch(format!(
                "sequence {seq:?} outside the model's space"
            )));
        }
        self.check_cond(tape.value(cond).len())?;
        let mut parts = Vec::with_capacity(seq.len());
        for (var, &choice) in seq.iter().enumerate() {
            let mask = masks(var, &seq[..var]);
            match &mask {
                Some(m) if !m.any() => {
                    return Err(InferError::DeadBranch {
                        prefix: seq[..var].to_vec(),
                    })
                }
                Some(m) if !m.allows(choice) => {
                    return Err(InferError::ForcedThroughMask {
                        seq: seq.to_vec(),
                        var,
                    })
                }
                _ => {}
            }
            let prefix_leaf = tape.leaf(Tensor::vector(self.prefix_onehot(&seq[..var])));
            let input = tape.concat(&[cond, prefix_leaf])?;
            let logits = mlp_logits(tape, binding, &factor_prefix(var), &self.specs[var], input)?;
            let lp = tape.log_softmax(logits, mask.as_ref().map(|m| m.bits()))?;
            parts.push(tape.pick(lp, choice)?);
        }
        Ok(tape.add_n(&parts)?)
    }
}

fn factor_prefix(i: usize) -> String {
    format!("f{i}.")
}

/// Neural approximation of the weighted model count `p(y|P)`, factorized
/// over output variables and conditioned on the flattened belief.
#[derive(Debug, Clone)]
pub struct PredictionModel {
    seq: SequenceModel,
}

impl PredictionModel {
    pub fn new(
        world_space: &SpaceSpec,
        output_space: &SpaceSpec,
        hidden: &[usize],
        rng: &mut dyn rand::RngCore,
    ) -> Self {
        Self {
            seq: SequenceModel::new(
                output_space.clone(),
                world_space.onehot_width(),
                hidden,
                Some(rng),
            ),
        }
    }

    /// All-zero weights: every factor is uniform. Useful as a neutral start.
    pub fn new_zeros(world_space: &SpaceSpec, output_space: &SpaceSpec, hidden: &[usize]) -> Self {
        Self {
            seq: SequenceModel::new(output_space.clone(), world_space.onehot_width(), hidden, None),
        }
    }

    pub fn output_space(&self) -> &SpaceSpec {
        &self.seq.space
    }

    pub fn store(&self) -> &ParamStore {
        &self.seq.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.seq.store
    }

    /// Renormalized distribution of output variable `prefix.len()`:
    /// `q_i * s_i / (q . s)`.
    pub fn factor_distribution(
        &self,
        belief: &Belief,
        prefix: &[usize],
        mask: Option<&PrunerMask>,
    ) -> Result<Vec<f64>, InferError> {
        let lp = self
            .seq
            .factor_log_probs(&belief.flatten(), prefix, mask)?;
        Ok(lp.iter().map(|l| l.exp()).collect())
    }

    /// `log q(y|P)`; `NEG_INFINITY` if `y` crosses a pruned option.
    pub fn log_prob(
        &self,
        belief: &Belief,
        y: &Output,
        pruner: Option<&dyn Pruner>,
    ) -> Result<f64, InferError> {
        self.seq
            .log_prob(&belief.flatten(), &y.0, &output_masks(pruner))
    }

    pub fn sample(
        &self,
        belief: &Belief,
        pruner: Option<&dyn Pruner>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Output, f64), InferError> {
        let (seq, lp) = self
            .seq
            .sample(&belief.flatten(), &output_masks(pruner), rng)?;
        Ok((Output(seq), lp))
    }

    /// Differentiable teacher-forced `log q(y|P)` with the belief given as a
    /// tape node (so perception gradients can flow through it).
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        belief_node: NodeId,
        y: &[usize],
        pruner: Option<&dyn Pruner>,
    ) -> Result<NodeId, InferError> {
        self.seq
            .log_prob_tape(tape, binding, belief_node, y, &output_masks(pruner))
    }
}

/// Neural approximation of the posterior `p(w|y, P)`, factorized over world
/// variables and conditioned on the belief and the one-hot output.
#[derive(Debug, Clone)]
pub struct ExplanationModel {
    seq: SequenceModel,
    output_space: SpaceSpec,
}

impl ExplanationModel {
    pub fn new(
        world_space: &SpaceSpec,
        output_space: &SpaceSpec,
        hidden: &[usize],
        rng: &mut dyn rand::RngCore,
    ) -> Self {
        let cond = world_space.onehot_width() + output_space.onehot_width();
        Self {
            seq: SequenceModel::new(world_space.clone(), cond, hidden, Some(rng)),
            output_space: output_space.clone(),
        }
    }

    /// All-zero weights: every factor is uniform.
    pub fn new_zeros(world_space: &SpaceSpec, output_space: &SpaceSpec, hidden: &[usize]) -> Self {
        let cond = world_space.onehot_width() + output_space.onehot_width();
        Self {
            seq: SequenceModel::new(world_space.clone(), cond, hidden, None),
            output_space: output_space.clone(),
        }
    }

    pub fn world_space(&self) -> &SpaceSpec {
        &self.seq.space
    }

    pub fn store(&self) -> &ParamStore {
        &self.seq.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.seq.store
    }

    fn cond(&self, belief: &Belief, y: &Output) -> Vec<f64> {
        let mut cond = belief.flatten();
        let mut enc = vec![0.0; self.output_space.onehot_width()];
        self.output_space.encode_prefix(&y.0, &mut enc);
        cond.extend(enc);
        cond
    }

    pub fn factor_distribution(
        &self,
        belief: &Belief,
        y: &Output,
        prefix: &[usize],
        mask: Option<&PrunerMask>,
    ) -> Result<Vec<f64>, InferError> {
        let lp = self
            .seq
            .factor_log_probs(&self.cond(belief, y), prefix, mask)?;
        Ok(lp.iter().map(|l| l.exp()).collect())
    }

    /// `log q(w|y, P)`; `NEG_INFINITY` if `w` crosses a pruned option.
    pub fn log_prob(
        &self,
        belief: &Belief,
        y: &Output,
        w: &World,
        pruner: Option<&dyn Pruner>,
    ) -> Result<f64, InferError> {
        self.seq
            .log_prob(&self.cond(belief, y), &w.0, &world_masks(pruner, &y.0))
    }

    pub fn sample(
        &self,
        belief: &Belief,
        y: &Output,
        pruner: Option<&dyn Pruner>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(World, f64), InferError> {
        let (seq, lp) = self
            .seq
            .sample(&self.cond(belief, y), &world_masks(pruner, &y.0), rng)?;
        Ok((World(seq), lp))
    }

    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        belief_node: NodeId,
        y: &Output,
        w: &[usize],
        pruner: Option<&dyn Pruner>,
    ) -> Result<NodeId, InferError> {
        let mut enc = vec![0.0; self.output_space.onehot_width()];
        self.output_space.encode_prefix(&y.0, &mut enc);
        let y_leaf = tape.leaf(Tensor::vector(enc));
        let cond = tape.concat(&[belief_node, y_leaf])?;
        self.seq
            .log_prob_tape(tape, binding, cond, w, &world_masks(pruner, &y.0))
    }
}

fn output_masks(pruner: Option<&dyn Pruner>) -> impl Fn(usize, &[usize]) -> Option<PrunerMask> + '_ {
    move |var, prefix| pruner.map(|p| p.output_mask(prefix, var))
}

fn world_masks<'a>(
    pruner: Option<&'a dyn Pruner>,
    y: &'a [usize],
) -> impl Fn(usize, &[usize]) -> Option<PrunerMask> + 'a {
    move |var, prefix| pruner.map(|p| p.world_mask(y, prefix, var))
}

/// Ancestral sampling of the full joint: output first, then world given the
/// complete output. Returns `log q(w, y|P)`.
pub fn sample_joint(
    pred: &PredictionModel,
    expl: &ExplanationModel,
    belief: &Belief,
    pruner: Option<&dyn Pruner>,
    rng: &mut dyn rand::RngCore,
) -> Result<(Output, World, f64), InferError> {
    let (y, lp_y) = pred.sample(belief, pruner, rng)?;
    let (w, lp_w) = expl.sample(belief, &y, pruner, rng)?;
    Ok((y, w, lp_y + lp_w))
}

/// Teacher-forced `log q(w, y|P)`, or `log q(y|P)` alone when `w` is absent.
/// Sequences crossing a pruned option yield `NEG_INFINITY`.
pub fn log_prob(
    pred: &PredictionModel,
    expl: &ExplanationModel,
    belief: &Belief,
    y: &Output,
    w: Option<&World>,
    pruner: Option<&dyn Pruner>,
) -> Result<f64, InferError> {
    let lp_y = pred.log_prob(belief, y, pruner)?;
    match w {
        None => Ok(lp_y),
        Some(w) => {
            if lp_y == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(lp_y + expl.log_prob(belief, y, w, pruner)?)
        }
    }
}

/// Highest-scoring output by beam search; ties prefer the lexicographically
/// smaller sequence.
pub fn beam_search_output(
    pred: &PredictionModel,
    belief: &Belief,
    beam_width: usize,
    pruner: Option<&dyn Pruner>,
) -> Result<Output, InferError> {
    let seq = pred
        .seq
        .beam(&belief.flatten(), beam_width, &output_masks(pruner))?;
    Ok(Output(seq))
}

/// Highest-scoring world by beam search, conditioned on `y`.
pub fn beam_search_world(
    expl: &ExplanationModel,
    belief: &Belief,
    y: &Output,
    beam_width: usize,
    pruner: Option<&dyn Pruner>,
) -> Result<World, InferError> {
    let seq = expl
        .seq
        .beam(&expl.cond(belief, y), beam_width, &world_masks(pruner, &y.0))?;
    Ok(World(seq))
}
