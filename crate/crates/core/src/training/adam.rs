use super::TrainError;
use crate::network::RouterParams;

/// First and second moment estimates for every parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &RouterParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks.iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Global L2 norm over all blocks.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// One bias-corrected Adam update after clipping the gradient to a global
/// norm of at most `clip`. Returns the pre-clip norm.
pub fn optimizer_step(
    params: &mut RouterParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    learning_rate: f64,
    clip: f64,
) -> Result<f64, TrainError> {
    if grads.len() != params.blocks.len() {
        return Err(TrainError::Config(format!(
            "{} gradient blocks for {} parameter blocks",
            grads.len(),
            params.blocks.len()
        )));
    }
    for (b, g) in params.blocks.iter().zip(grads) {
        if g.len() != b.tensor.numel() {
            return Err(TrainError::Config(format!("gradient for {} has the wrong length", b.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite(format!("gradient of parameter block {}", b.name)));
        }
    }
    let norm = global_norm(grads);
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (bi, b) in params.blocks.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[bi], &mut state.v[bi]);
        for (j, p) in b.tensor.data_mut().iter_mut().enumerate() {
            let g = grads[bi][j] * scale;
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= learning_rate * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(norm)
}
