//! The router network: capsule extraction, capability tokens, latent
//! communication layers, the distributional outcome head, the bounded
//! correction and the utility policy.

mod checkpoint;
pub mod layers;
mod params;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_FORMAT};
pub use params::{CapsuleVars, LayerVars, Mlp2, ParamBlock, ParamVars, RouterParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ModelPool, MultimodalQuery};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("router config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture switches used by the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchVariant {
    /// Learned capsules; when off every capsule is the mean query token.
    pub capsules: bool,
    /// Descriptor-built model tokens; when off a learned per-slot table.
    pub model_tokens: bool,
    /// Mean and spread head; when off a point head with sigma fixed at 1.
    pub distributional: bool,
}

impl Default for ArchVariant {
    fn default() -> Self {
        Self {
            capsules: true,
            model_tokens: true,
            distributional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub capsule_count: usize,
    pub comm_layers: usize,
    pub hidden_dim: usize,
    /// Hidden width of the pairwise bias MLP.
    pub pair_hidden: usize,
    pub feedback_temp: f64,
    pub correction_bound: f64,
    pub sigma_floor: f64,
    pub image_dim: usize,
    pub question_dim: usize,
    pub descriptor_dim: usize,
    /// Pool size; only read by the slot-table variant.
    pub slot_count: usize,
    #[serde(default)]
    pub variant: ArchVariant,
}

impl RouterConfig {
    pub const DEFAULT_CAPSULES: usize = 7;
    pub const DEFAULT_LAYERS: usize = 2;
    pub const DEFAULT_HIDDEN: usize = 32;

    /// Default architecture for data of the given widths.
    pub fn for_data(image_dim: usize, question_dim: usize, descriptor_dim: usize, pool_size: usize) -> Self {
        let hidden_dim = Self::DEFAULT_HIDDEN;
        Self {
            capsule_count: Self::DEFAULT_CAPSULES,
            comm_layers: Self::DEFAULT_LAYERS,
            hidden_dim,
            pair_hidden: (hidden_dim / 4).max(8),
            feedback_temp: 0.2,
            correction_bound: 0.1,
            sigma_floor: 0.01,
            image_dim,
            question_dim,
            descriptor_dim,
            slot_count: pool_size,
            variant: ArchVariant::default(),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.capsule_count == 0 {
            return fail("capsule_count must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.pair_hidden == 0 {
            return fail("hidden_dim and pair_hidden must be at least 1".into());
        }
        if self.image_dim == 0 || self.question_dim == 0 {
            return fail("token widths must be at least 1".into());
        }
        if self.variant.model_tokens && self.descriptor_dim == 0 {
            return fail("descriptor_dim must be at least 1".into());
        }
        if !self.variant.model_tokens && self.slot_count == 0 {
            return fail("slot_count must be at least 1".into());
        }
        if !(self.feedback_temp > 0.0 && self.feedback_temp.is_finite()) {
            return fail(format!("feedback_temp must be positive, got {}", self.feedback_temp));
        }
        if !(self.correction_bound >= 0.0 && self.correction_bound.is_finite()) {
            return fail(format!("correction_bound must be non-negative, got {}", self.correction_bound));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return fail(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        Ok(())
    }
}

/// Descriptor rows and normalized costs of a candidate pool, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    descriptors: Vec<f64>,
    descriptor_dim: usize,
    costs: Vec<f64>,
}

impl CandidateSet {
    pub fn new(descriptors: Vec<f64>, descriptor_dim: usize, costs: Vec<f64>) -> Result<Self, NetworkError> {
        if descriptors.len() != descriptor_dim * costs.len() {
            return Err(NetworkError::Config(format!(
                "{} descriptor values for {} models of width {descriptor_dim}",
                descriptors.len(),
                costs.len()
            )));
        }
        Ok(Self {
            descriptors,
            descriptor_dim,
            costs,
        })
    }

    pub fn from_pool(pool: &ModelPool) -> Self {
        Self {
            descriptors: pool.descriptor_matrix(),
            descriptor_dim: pool.descriptor_dim(),
            costs: pool.costs(),
        }
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn descriptors(&self) -> &[f64] {
        &self.descriptors
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.descriptor_dim..(i + 1) * self.descriptor_dim]
    }

    pub fn descriptor_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.descriptors[i * self.descriptor_dim..(i + 1) * self.descriptor_dim]
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// The same models reordered so that new position `t` holds old model `perm[t]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut descriptors = Vec::with_capacity(self.descriptors.len());
        for &p in perm {
            descriptors.extend_from_slice(self.descriptor(p));
        }
        Self {
            descriptors,
            descriptor_dim: self.descriptor_dim,
            costs: perm.iter().map(|&p| self.costs[p]).collect(),
        }
    }
}

/// Vars of one forward pass left on the tape, for losses and backward.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub capsules: Vec<Var>,
    pub states: Vec<Var>,
    pub biases: Vec<Var>,
    pub layer_scores: Vec<Var>,
    pub feedback: Vec<Var>,
    /// Every attention weight matrix, in evaluation order.
    pub attention: Vec<Var>,
    pub mu: Var,
    pub sigma: Var,
    pub delta: Var,
    pub corrected: Var,
}

/// Records one forward pass on `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RouterConfig,
    query: &MultimodalQuery,
    candidates: &CandidateSet,
    omega: &[bool],
) -> Result<TapeForward, NetworkError> {
    let k = candidates.len();
    if omega.len() != k {
        return Err(NetworkError::Config(format!(
            "availability mask has {} entries for {k} models",
            omega.len()
        )));
    }
    if !omega.iter().any(|&m| m) {
        return Err(TensorError::EmptySupport("forward").into());
    }
    let v = &query.image_tokens;
    let q = &query.question_tokens;
    let image = tape.constant(v.rows(), v.cols(), v.data().to_vec())?;
    let question = tape.constant(q.rows(), q.cols(), q.data().to_vec())?;
    let caps = layers::extract_capsules(tape, pv, cfg, image, question)?;
    let mut r = caps.r;
    let mut a = layers::build_model_tokens(tape, pv, cfg, candidates)?;
    let mut out = TapeForward {
        capsules: vec![r],
        states: vec![a],
        biases: Vec::new(),
        layer_scores: Vec::new(),
        feedback: Vec::new(),
        attention: vec![caps.weights],
        mu: a,
        sigma: a,
        delta: a,
        corrected: a,
    };
    for layer in &pv.layers {
        let read = layers::model_read_capsules(tape, layer, cfg, a, r)?;
        let bias = layers::pairwise_bias(tape, layer, read.out, omega)?;
        let attn = layers::masked_self_attention(tape, layer, cfg, read.out, bias, omega)?;
        a = attn.out;
        let scores = layers::layer_scores(tape, layer, a)?;
        let w = layers::feedback_weights(tape, scores, omega, cfg.feedback_temp)?;
        let fb = layers::capsule_feedback(tape, layer, cfg, r, a, w, omega)?;
        r = fb.out;
        out.attention.extend([read.weights, attn.weights, fb.weights]);
        out.biases.push(bias);
        out.layer_scores.push(scores);
        out.feedback.push(w);
        out.states.push(a);
        out.capsules.push(r);
    }
    let (mu, sigma) = layers::predict_outcomes(tape, pv, cfg, a, caps.joint)?;
    let (delta, corrected) = layers::bounded_correction(tape, pv, cfg, a, r, mu)?;
    out.mu = mu;
    out.sigma = sigma;
    out.delta = delta;
    out.corrected = corrected;
    Ok(out)
}

/// Values of every stage of one forward pass. Per-model outputs are `None`
/// for unavailable models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub available: Vec<bool>,
    pub capsules: Vec<Tensor>,
    pub model_states: Vec<Tensor>,
    pub pair_biases: Vec<Tensor>,
    pub layer_scores: Vec<Vec<Option<f64>>>,
    pub feedback_weights: Vec<Vec<f64>>,
    pub attention: Vec<Tensor>,
    pub mu: Vec<Option<f64>>,
    pub sigma: Vec<Option<f64>>,
    pub delta: Vec<Option<f64>>,
    pub corrected: Vec<Option<f64>>,
    pub utilities: Vec<Option<f64>>,
    pub chosen: usize,
}

fn masked(values: &[f64], omega: &[bool]) -> Vec<Option<f64>> {
    values
        .iter()
        .zip(omega)
        .map(|(&v, &m)| if m { Some(v) } else { None })
        .collect()
}

/// Full forward pass without gradients, followed by the utility policy at `lambda`.
pub fn forward(
    query: &MultimodalQuery,
    candidates: &CandidateSet,
    omega: &[bool],
    params: &RouterParams,
    cfg: &RouterConfig,
    lambda: f64,
) -> Result<ForwardRecord, NetworkError> {
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, cfg, false)?;
    let f = forward_on_tape(&mut tape, &pv, cfg, query, candidates, omega)?;
    let corrected = tape.value(f.corrected).to_vec();
    let (utilities, chosen) = route(&corrected, candidates.costs(), omega, lambda)?;
    let tensors = |vars: &[Var]| vars.iter().map(|&v| tape.to_tensor(v)).collect::<Vec<_>>();
    Ok(ForwardRecord {
        available: omega.to_vec(),
        capsules: tensors(&f.capsules),
        model_states: tensors(&f.states),
        pair_biases: tensors(&f.biases),
        layer_scores: f.layer_scores.iter().map(|&s| masked(tape.value(s), omega)).collect(),
        feedback_weights: f.feedback.iter().map(|&w| tape.value(w).to_vec()).collect(),
        attention: tensors(&f.attention),
        mu: masked(tape.value(f.mu), omega),
        sigma: masked(tape.value(f.sigma), omega),
        delta: masked(tape.value(f.delta), omega),
        corrected: masked(&corrected, omega),
        utilities,
        chosen,
    })
}

/// Utilities `mu_tilde - lambda * c` over the available models and the
/// argmax. Exact ties go to the cheaper model, then the earlier one.
pub fn route(
    corrected: &[f64],
    costs: &[f64],
    omega: &[bool],
    lambda: f64,
) -> Result<(Vec<Option<f64>>, usize), NetworkError> {
    if corrected.len() != costs.len() || omega.len() != costs.len() {
        return Err(TensorError::Shape {
            op: "route",
            lhs: vec![corrected.len(), costs.len()],
            rhs: vec![omega.len()],
        }
        .into());
    }
    let mut utilities = vec![None; costs.len()];
    let mut best: Option<usize> = None;
    for i in 0..costs.len() {
        if !omega[i] {
            continue;
        }
        let s = corrected[i] - lambda * costs[i];
        utilities[i] = Some(s);
        best = match best {
            None => Some(i),
            Some(b) => {
                let sb = utilities[b].expect("best is available");
                if s > sb || (s == sb && costs[i] < costs[b]) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let chosen = best.ok_or(TensorError::EmptySupport("route"))?;
    Ok((utilities, chosen))
}

#[cfg(test)]
mod tests;
