use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_policy, Decision, EvalError, PolicyInput, RouterPolicy};
use crate::domain::RoutingTrace;
use crate::network::{route, CandidateSet, ParamBlock, RouterParams};
use crate::tensor::{masked_softmax, Tape, Tensor, Var};
use crate::training::loss::loss_util;
use crate::training::{optimizer_step, AdamState};

/// Optimizer settings shared by the small learned baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Cost weight in the training targets and validation selection.
    pub lambda: f64,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
            hidden: 32,
            lambda: 0.0,
        }
    }
}

impl AuxTrainConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(EvalError::Invalid("epochs, batch_size and hidden must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EvalError::Invalid("learning_rate must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EvalError::Invalid("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn block(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng, zero: bool) -> ParamBlock {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| if zero { 0.0 } else { rng.random_range(-bound..bound) })
        .collect();
    ParamBlock {
        name: name.into(),
        tensor: Tensor::matrix(rows, cols, data).expect("block shape"),
    }
}

fn attach(tape: &mut Tape, params: &RouterParams, trainable: bool) -> Result<Vec<Var>, EvalError> {
    params
        .blocks
        .iter()
        .map(|b| {
            let (r, c) = b.tensor.dims2()?;
            let data = b.tensor.data().to_vec();
            Ok(if trainable { tape.param(r, c, data)? } else { tape.constant(r, c, data)? })
        })
        .collect()
}

/// `tanh(x W1 + b1) W2 + b2` for a single row `x`.
fn mlp(tape: &mut Tape, x: &[f64], v: &[Var]) -> Result<Var, EvalError> {
    let x = tape.constant(1, x.len(), x.to_vec())?;
    let h = tape.matmul(x, v[0])?;
    let h = tape.add_row(h, v[1])?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, v[2])?;
    Ok(tape.add_row(o, v[3])?)
}

/// Mini-batch Adam on a per-trace objective, keeping the parameters of the
/// epoch with the best validation utility.
fn fit<O, P>(
    mut params: RouterParams,
    train: &[RoutingTrace],
    val: &[RoutingTrace],
    candidates: &CandidateSet,
    cfg: &AuxTrainConfig,
    objective: O,
    build: P,
) -> Result<RouterParams, EvalError>
where
    O: Fn(&mut Tape, &[Var], &RoutingTrace) -> Result<Var, EvalError> + Sync,
    P: Fn(&RouterParams) -> Box<dyn RouterPolicy>,
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(EvalError::Invalid("baseline needs training and validation traces".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e_11fe);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, RouterParams)> = None;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let grads: Vec<Result<Vec<Vec<f64>>, EvalError>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let vars = attach(&mut tape, &params, true)?;
                    let loss = objective(&mut tape, &vars, &train[i])?;
                    let g = tape.backward(loss)?;
                    Ok(vars.iter().map(|&v| g.get(v).expect("leaf").to_vec()).collect())
                })
                .collect();
            let mut acc: Vec<Vec<f64>> = params.blocks.iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
            for g in grads {
                for (a, gb) in acc.iter_mut().zip(g?) {
                    for (x, y) in a.iter_mut().zip(gb) {
                        *x += y / chunk.len() as f64;
                    }
                }
            }
            optimizer_step(&mut params, &acc, &mut state, cfg.learning_rate, 1.0)?;
        }
        let metric = evaluate_policy(build(&params).as_ref(), val, candidates, cfg.lambda)?.utility;
        if best.as_ref().is_none_or(|(m, _)| metric > *m) {
            best = Some((metric, params.clone()));
        }
    }
    Ok(best.expect("at least one epoch").1)
}

/// Scorer `s(x, m) = g(x) + h(m)`: an MLP over pooled query features plus a
/// linear function of the model descriptor and cost.
#[derive(Debug, Clone)]
pub struct AdditivePolicy {
    params: RouterParams,
    train_lambda: f64,
}

impl AdditivePolicy {
    fn query_term(&self, tape: &mut Tape, v: &[Var], x: &[f64]) -> Result<f64, EvalError> {
        let g = mlp(tape, x, &v[..4])?;
        Ok(tape.scalar(g))
    }

    /// Model term `h(m)` including the training cost offset.
    pub fn model_terms(&self, candidates: &CandidateSet) -> Result<Vec<f64>, EvalError> {
        let w = self.params.blocks[4].tensor.data();
        if w.len() != candidates.descriptor_dim() {
            return Err(EvalError::Invalid("additive baseline fitted on a different descriptor width".into()));
        }
        Ok((0..candidates.len())
            .map(|i| {
                let d = candidates.descriptor(i);
                d.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + self.train_lambda * candidates.costs()[i]
            })
            .collect())
    }
}

fn additive_scores(tape: &mut Tape, v: &[Var], x: &[f64], candidates: &CandidateSet) -> Result<Var, EvalError> {
    let g = mlp(tape, x, &v[..4])?;
    let d = tape.constant(candidates.len(), candidates.descriptor_dim(), candidates.descriptors().to_vec())?;
    let h = tape.matmul(d, v[4])?;
    Ok(tape.add_row(h, g)?)
}

impl RouterPolicy for AdditivePolicy {
    fn name(&self) -> &str {
        "additive"
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let h = self.model_terms(input.candidates)?;
        // The query term is shared by every model, so the choice uses h alone.
        let chosen = route(&h, input.candidates.costs(), input.omega, input.lambda)?.1;
        let mut tape = Tape::new();
        let v = attach(&mut tape, &self.params, false)?;
        let g = self.query_term(&mut tape, &v, &input.query.pooled_features())?;
        let scores = h.iter().zip(input.omega).map(|(x, &a)| a.then_some(g + x)).collect();
        Ok(Decision {
            chosen,
            scores: Some(scores),
        })
    }
}

pub fn train_additive(
    train: &[RoutingTrace],
    val: &[RoutingTrace],
    candidates: &CandidateSet,
    cfg: &AuxTrainConfig,
) -> Result<AdditivePolicy, EvalError> {
    let f = train
        .first()
        .map(|t| t.query.pooled_features().len())
        .ok_or_else(|| EvalError::Invalid("additive baseline needs training traces".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = RouterParams {
        blocks: vec![
            block("g_w1", f, cfg.hidden, &mut rng, false),
            block("g_b1", 1, cfg.hidden, &mut rng, true),
            block("g_w2", cfg.hidden, 1, &mut rng, false),
            block("g_b2", 1, 1, &mut rng, true),
            block("h_w", candidates.descriptor_dim(), 1, &mut rng, false),
        ],
    };
    let lambda = cfg.lambda;
    let costs = candidates.costs().to_vec();
    let params = fit(
        init,
        train,
        val,
        candidates,
        cfg,
        |tape, v, t| {
            let s = additive_scores(tape, v, &t.query.pooled_features(), candidates)?;
            let u: Vec<f64> = (0..costs.len()).map(|i| t.y[i].unwrap_or(0.0) - lambda * costs[i]).collect();
            Ok(loss_util(tape, s, &u, &t.omega)?)
        },
        |p| {
            Box::new(AdditivePolicy {
                params: p.clone(),
                train_lambda: lambda,
            })
        },
    )?;
    Ok(AdditivePolicy {
        params,
        train_lambda: lambda,
    })
}

/// Softmax over the pool from pooled query features, trained with cross
/// entropy on the best observed model of each training trace.
#[derive(Debug, Clone)]
pub struct DirectClassifierPolicy {
    params: RouterParams,
}

impl DirectClassifierPolicy {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut tape = Tape::new();
        let v = attach(&mut tape, &self.params, false)?;
        let o = mlp(&mut tape, x, &v)?;
        Ok(tape.value(o).to_vec())
    }
}

impl RouterPolicy for DirectClassifierPolicy {
    fn name(&self) -> &str {
        "direct_classifier"
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let z = self.logits(&input.query.pooled_features())?;
        if z.len() != input.omega.len() {
            return Err(EvalError::Invalid("classifier fitted on a different pool size".into()));
        }
        let p = masked_softmax(&z, input.omega)?;
        let chosen = (0..z.len())
            .filter(|&i| input.omega[i])
            .fold(None, |b: Option<usize>, i| match b {
                Some(j) if z[j] >= z[i] => Some(j),
                _ => Some(i),
            })
            .ok_or_else(|| EvalError::Invalid("no available model".into()))?;
        Ok(Decision {
            chosen,
            scores: Some(p.into_iter().zip(input.omega).map(|(x, &a)| a.then_some(x)).collect()),
        })
    }
}

pub fn train_direct_classifier(
    train: &[RoutingTrace],
    val: &[RoutingTrace],
    candidates: &CandidateSet,
    cfg: &AuxTrainConfig,
) -> Result<DirectClassifierPolicy, EvalError> {
    let f = train
        .first()
        .map(|t| t.query.pooled_features().len())
        .ok_or_else(|| EvalError::Invalid("classifier needs training traces".into()))?;
    let k = candidates.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = RouterParams {
        blocks: vec![
            block("c_w1", f, cfg.hidden, &mut rng, false),
            block("c_b1", 1, cfg.hidden, &mut rng, true),
            block("c_w2", cfg.hidden, k, &mut rng, false),
            block("c_b2", 1, k, &mut rng, true),
        ],
    };
    let lambda = cfg.lambda;
    let params = fit(
        init,
        train,
        val,
        candidates,
        cfg,
        |tape, v, t| {
            let y: Vec<f64> = t.y.iter().map(|v| v.unwrap_or(0.0)).collect();
            let label = route(&y, candidates.costs(), &t.omega, lambda)?.1;
            let avail: Vec<usize> = t.available().collect();
            let at = avail.iter().position(|&i| i == label).expect("label is available");
            let z = mlp(tape, &t.query.pooled_features(), v)?;
            let zt = tape.transpose(z);
            let za = tape.gather_rows(zt, &avail)?;
            let row = tape.transpose(za);
            let lp = tape.log_softmax_rows(row);
            let pick = tape.column(lp, at)?;
            let s = tape.sum(pick);
            Ok(tape.scale(s, -1.0))
        },
        |p| Box::new(DirectClassifierPolicy { params: p.clone() }),
    )?;
    Ok(DirectClassifierPolicy { params })
}
