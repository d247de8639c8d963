//! The individual stages of a router forward pass, recorded on a [`Tape`].
//!
//! Sub-updates are pre-normalized: the token or capsule set that forms the
//! attention queries is layer-normalized before projection, and the result is
//! added back to the un-normalized input.

use super::params::{LayerVars, Mlp2, ParamVars};
use super::{CandidateSet, NetworkError, RouterConfig};
use crate::tensor::{Tape, TensorError, Var};

/// Epsilon inside every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// An attention output together with its weight matrix.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Capsules {
    /// `C x d` capsule states.
    pub r: Var,
    /// Projected joint sequence `[V; Q]`, `(N + L) x d`.
    pub joint: Var,
    /// `C x (N + L)` attention weights.
    pub weights: Var,
}

fn inv_sqrt(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

pub(crate) fn mlp2(tape: &mut Tape, m: &Mlp2, x: Var) -> Result<Var, TensorError> {
    let h = tape.matmul(x, m.w1)?;
    let h = tape.add_row(h, m.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, m.w2)?;
    tape.add_row(o, m.b2)
}

fn broadcast_row(tape: &mut Tape, row: Var, n: usize) -> Result<Var, TensorError> {
    tape.gather_rows(row, &vec![0; n])
}

fn mask_column(tape: &mut Tape, omega: &[bool]) -> Result<Var, TensorError> {
    let data = omega.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.constant(omega.len(), 1, data)
}

fn available(omega: &[bool]) -> Vec<usize> {
    omega.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Projects the image and question tokens into the hidden space and lets
/// each capsule query attend over the joint sequence.
pub fn extract_capsules(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RouterConfig,
    image: Var,
    question: Var,
) -> Result<Capsules, NetworkError> {
    let (_, dv) = tape.dims(image);
    let (_, dq) = tape.dims(question);
    if dv != cfg.image_dim || dq != cfg.question_dim {
        return Err(NetworkError::Config(format!(
            "token widths {dv}/{dq} do not match configured {}/{}",
            cfg.image_dim, cfg.question_dim
        )));
    }
    let vi = tape.matmul(image, pv.image_proj)?;
    let qi = tape.matmul(question, pv.question_proj)?;
    let joint = tape.concat_rows(&[vi, qi])?;
    let (n, _) = tape.dims(joint);
    match &pv.capsule {
        Some(c) => {
            let keys = tape.matmul(joint, c.key)?;
            let values = tape.matmul(joint, c.value)?;
            let logits = tape.matmul_nt(c.queries, keys)?;
            let logits = tape.scale(logits, inv_sqrt(cfg.hidden_dim));
            let weights = tape.softmax_rows(logits, None)?;
            let r = tape.matmul(weights, values)?;
            Ok(Capsules { r, joint, weights })
        }
        None => {
            let mean = tape.mean_rows(joint);
            let r = broadcast_row(tape, mean, cfg.capsule_count)?;
            let c = cfg.capsule_count;
            let weights = tape.constant(c, n, vec![1.0 / n as f64; c * n])?;
            Ok(Capsules { r, joint, weights })
        }
    }
}

/// Capability tokens `phi([p; c; l; b])`, or the learned slot table when
/// descriptor tokens are disabled.
pub fn build_model_tokens(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
) -> Result<Var, NetworkError> {
    let k = candidates.len();
    if let Some(slots) = pv.slot_tokens {
        if k != cfg.slot_count {
            return Err(NetworkError::Config(format!(
                "slot table holds {} models, pool has {k}",
                cfg.slot_count
            )));
        }
        return Ok(slots);
    }
    if candidates.descriptor_dim() != cfg.descriptor_dim {
        return Err(NetworkError::Config(format!(
            "descriptor length {} does not match configured {}",
            candidates.descriptor_dim(),
            cfg.descriptor_dim
        )));
    }
    let (w, b) = pv.token.expect("token projection present when slots are absent");
    let desc = tape.constant(k, cfg.descriptor_dim, candidates.descriptors().to_vec())?;
    let t = tape.matmul(desc, w)?;
    Ok(tape.add_row(t, b)?)
}

/// Each model token attends over the capsules and folds what it read back
/// in through `FFN([a; r_hat; a * r_hat])`.
pub fn model_read_capsules(
    tape: &mut Tape,
    layer: &LayerVars,
    cfg: &RouterConfig,
    a: Var,
    r: Var,
) -> Result<Attended, NetworkError> {
    let n = tape.layer_norm_rows(a, LN_EPS);
    let q = tape.matmul(n, layer.read_q)?;
    let k = tape.matmul(r, layer.read_k)?;
    let v = tape.matmul(r, layer.read_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, inv_sqrt(cfg.hidden_dim));
    let weights = tape.softmax_rows(logits, None)?;
    let read = tape.matmul(weights, v)?;
    let prod = tape.mul(n, read)?;
    let input = tape.concat_cols(&[n, read, prod])?;
    let h = tape.matmul(input, layer.ffn_w1)?;
    let h = tape.add_row(h, layer.ffn_b1)?;
    let h = tape.tanh(h);
    let f = tape.matmul(h, layer.ffn_w2)?;
    let f = tape.add_row(f, layer.ffn_b2)?;
    let out = tape.add(a, f)?;
    Ok(Attended { out, weights })
}

/// `K x K` comparison biases. Entry `(i, j)` is the pairwise MLP applied to
/// the normalized tokens of available models `i != j`; all other entries are 0.
pub fn pairwise_bias(tape: &mut Tape, layer: &LayerVars, abar: Var, omega: &[bool]) -> Result<Var, NetworkError> {
    let (k, _) = tape.dims(abar);
    let avail = available(omega);
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut positions = Vec::new();
    for &i in &avail {
        for &j in &avail {
            if i != j {
                left.push(i);
                right.push(j);
                positions.push(i * k + j);
            }
        }
    }
    if positions.is_empty() {
        return Ok(tape.constant(k, k, vec![0.0; k * k])?);
    }
    // [n_i; n_j; n_i - n_j; n_i * n_j] W1 splits into a term in n_i, a term
    // in n_j and the product term.
    let n = tape.layer_norm_rows(abar, LN_EPS);
    let w_left = tape.add(layer.psi_self, layer.psi_diff)?;
    let w_right = tape.sub(layer.psi_other, layer.psi_diff)?;
    let p_left = tape.matmul(n, w_left)?;
    let p_right = tape.matmul(n, w_right)?;
    let gl = tape.gather_rows(p_left, &left)?;
    let gr = tape.gather_rows(p_right, &right)?;
    let ni = tape.gather_rows(n, &left)?;
    let nj = tape.gather_rows(n, &right)?;
    let prod = tape.mul(ni, nj)?;
    let pp = tape.matmul(prod, layer.psi_prod)?;
    let pre = tape.add(gl, gr)?;
    let pre = tape.add(pre, pp)?;
    let pre = tape.add_row(pre, layer.psi_b1)?;
    let h = tape.tanh(pre);
    let o = tape.matmul(h, layer.psi_w2)?;
    let o = tape.add_row(o, layer.psi_b2)?;
    Ok(tape.scatter(o, &positions, k, k)?)
}

/// Self-attention among the available model tokens with the additive bias
/// `bias`. Rows of unavailable models receive no update.
pub fn masked_self_attention(
    tape: &mut Tape,
    layer: &LayerVars,
    cfg: &RouterConfig,
    abar: Var,
    bias: Var,
    omega: &[bool],
) -> Result<Attended, NetworkError> {
    if !omega.iter().any(|&m| m) {
        return Err(TensorError::EmptySupport("masked_self_attention").into());
    }
    let n = tape.layer_norm_rows(abar, LN_EPS);
    let q = tape.matmul(n, layer.self_q)?;
    let k = tape.matmul(n, layer.self_k)?;
    let v = tape.matmul(n, layer.self_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, inv_sqrt(cfg.hidden_dim));
    let logits = tape.add(logits, bias)?;
    let weights = tape.softmax_rows(logits, Some(omega))?;
    let upd = tape.matmul(weights, v)?;
    let mask = mask_column(tape, omega)?;
    let upd = tape.mul_col(upd, mask)?;
    let out = tape.add(abar, upd)?;
    Ok(Attended { out, weights })
}

/// Layerwise utility estimate for every token, `K x 1`.
pub fn layer_scores(tape: &mut Tape, layer: &LayerVars, a: Var) -> Result<Var, NetworkError> {
    let n = tape.layer_norm_rows(a, LN_EPS);
    let m = Mlp2 {
        w1: layer.score_w1,
        b1: layer.score_b1,
        w2: layer.score_w2,
        b2: layer.score_b2,
    };
    Ok(mlp2(tape, &m, n)?)
}

/// Feedback weights `softmax(-(max s - s_i) / tau)` over the available
/// models as a `1 x K` row. The max is a constant shift inside the softmax,
/// so this is the masked softmax of `s / tau`.
pub fn feedback_weights(tape: &mut Tape, scores: Var, omega: &[bool], tau: f64) -> Result<Var, NetworkError> {
    if tau <= 0.0 {
        return Err(NetworkError::Config(format!("feedback temperature must be positive, got {tau}")));
    }
    let row = tape.transpose(scores);
    let row = tape.scale(row, 1.0 / tau);
    Ok(tape.softmax_rows(row, Some(omega))?)
}

/// Capsules attend to the omega-weighted states of the available models.
pub fn capsule_feedback(
    tape: &mut Tape,
    layer: &LayerVars,
    cfg: &RouterConfig,
    r: Var,
    a: Var,
    omega_weights: Var,
    omega: &[bool],
) -> Result<Attended, NetworkError> {
    let avail = available(omega);
    if avail.is_empty() {
        return Err(TensorError::EmptySupport("capsule_feedback").into());
    }
    let w = tape.transpose(omega_weights);
    let scaled = tape.mul_col(a, w)?;
    let m = tape.gather_rows(scaled, &avail)?;
    let n = tape.layer_norm_rows(r, LN_EPS);
    let q = tape.matmul(n, layer.fb_q)?;
    let k = tape.matmul(m, layer.fb_k)?;
    let v = tape.matmul(m, layer.fb_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, inv_sqrt(cfg.hidden_dim));
    let weights = tape.softmax_rows(logits, None)?;
    let upd = tape.matmul(weights, v)?;
    let out = tape.add(r, upd)?;
    Ok(Attended { out, weights })
}

/// Shared outcome head. Returns `(mu, sigma)` as `K x 1` columns; without
/// the distributional head sigma is the constant 1.
pub fn predict_outcomes(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RouterConfig,
    a: Var,
    joint: Var,
) -> Result<(Var, Var), NetworkError> {
    let (k, _) = tape.dims(a);
    let n = tape.layer_norm_rows(a, LN_EPS);
    let input = if cfg.comm_layers == 0 {
        let mean = tape.mean_rows(joint);
        let ctx = broadcast_row(tape, mean, k)?;
        tape.concat_cols(&[n, ctx])?
    } else {
        n
    };
    let out = mlp2(tape, &pv.outcome, input)?;
    let mu = tape.column(out, 0)?;
    let sigma = if cfg.variant.distributional {
        let eta = tape.column(out, 1)?;
        let sp = tape.softplus(eta);
        tape.add_scalar(sp, cfg.sigma_floor)
    } else {
        tape.constant(k, 1, vec![1.0; k])?
    };
    Ok((mu, sigma))
}

/// `delta = rho * tanh(h([a; mean capsule]))`; returns `(delta, mu + delta)`.
pub fn bounded_correction(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RouterConfig,
    a: Var,
    r: Var,
    mu: Var,
) -> Result<(Var, Var), NetworkError> {
    let (k, _) = tape.dims(a);
    let n = tape.layer_norm_rows(a, LN_EPS);
    let pooled = tape.mean_rows(r);
    let ctx = broadcast_row(tape, pooled, k)?;
    let input = tape.concat_cols(&[n, ctx])?;
    let h = mlp2(tape, &pv.correction, input)?;
    let t = tape.tanh(h);
    let delta = tape.scale(t, cfg.correction_bound);
    let corrected = tape.add(mu, delta)?;
    Ok((delta, corrected))
}
