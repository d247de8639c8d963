//! Objective, optimizer and the training loop with validation selection.

mod adam;
pub mod loss;

pub use adam::{global_norm, optimizer_step, AdamState};
pub use loss::{total_loss, LossInputs, LossTerms, LossWeights};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{compute_utility, ModelPool, RoutingTrace, UtilitySpec};
use crate::network::{self, CandidateSet, NetworkError, RouterConfig, RouterParams};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Network(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Mean utility of the selected model on validation traces.
    ValidationUtility,
    /// Mean observed quality of the selected model on validation traces.
    ValidationQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection: SelectionMetric,
    pub gradient_clip: f64,
    /// Cost weight used in the training utilities and validation selection.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            selection: SelectionMetric::ValidationUtility,
            gradient_clip: 1.0,
            lambda: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.gradient_clip >= 0.0) {
            return Err(TrainError::Config("gradient_clip must be non-negative".into()));
        }
        if UtilitySpec::new(self.lambda).is_none() {
            return Err(TrainError::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-epoch mean loss terms (absent for epoch 0, which only measures the
/// initialization) and the validation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub losses: Option<[f64; 6]>,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub const HEADER: [&'static str; 8] = ["epoch", "L_dist", "L_pair", "L_list", "L_util", "L_res", "L_total", "val_metric"];

    pub fn best_metric(&self) -> f64 {
        self.rows[self.best_epoch].val_metric
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.epoch.to_string()];
            match r.losses {
                Some(l) => rec.extend(l.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 6)),
            }
            rec.push(r.val_metric.to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv_string()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn dense_y(trace: &RoutingTrace) -> Vec<f64> {
    trace.y.iter().map(|v| v.unwrap_or(0.0)).collect()
}

/// Loss terms `[dist, pair, list, util, res, total]` of one trace, and the
/// gradient of its total for every parameter block when `with_grad`.
pub fn trace_objective(
    params: &RouterParams,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
    trace: &RoutingTrace,
    weights: &LossWeights,
    lambda: f64,
    with_grad: bool,
) -> Result<([f64; 6], Option<Vec<Vec<f64>>>), TrainError> {
    let mut tape = Tape::new();
    let pv = params.attach(&mut tape, cfg, with_grad)?;
    let f = network::forward_on_tape(&mut tape, &pv, cfg, &trace.query, candidates, &trace.omega)?;
    let y = dense_y(trace);
    let inp = LossInputs {
        mu: f.mu,
        sigma: f.sigma,
        corrected: f.corrected,
        delta: f.delta,
        costs: candidates.costs(),
        y: &y,
        omega: &trace.omega,
        lambda,
        distributional: cfg.variant.distributional,
    };
    let t = total_loss(&mut tape, &inp, weights)?;
    let values = [t.dist, t.pair, t.list, t.util, t.res, t.total].map(|v| tape.scalar(v));
    if !with_grad {
        return Ok((values, None));
    }
    if !values[5].is_finite() {
        return Ok((values, None));
    }
    let grads = tape.backward(t.total)?;
    let g = pv
        .all
        .iter()
        .map(|&v| grads.get(v).expect("parameter leaf").to_vec())
        .collect();
    Ok((values, Some(g)))
}

/// Mean of the per-trace objective and its gradient over `traces`.
pub fn batch_objective(
    params: &RouterParams,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
    traces: &[&RoutingTrace],
    weights: &LossWeights,
    lambda: f64,
) -> Result<([f64; 6], Vec<Vec<f64>>), TrainError> {
    let results: Vec<_> = traces
        .par_iter()
        .map(|t| trace_objective(params, cfg, candidates, t, weights, lambda, true))
        .collect();
    let mut sums = [0.0; 6];
    let mut acc: Vec<Vec<f64>> = params.blocks.iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
    for (i, r) in results.into_iter().enumerate() {
        let (values, grads) = r?;
        let grads = grads.ok_or_else(|| {
            TrainError::NonFinite(format!("loss of trace {}", traces[i].query.query_id))
        })?;
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let n = traces.len() as f64;
    for s in &mut sums {
        *s /= n;
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= n;
        }
    }
    Ok((sums, acc))
}

/// Mean utility and mean quality of the router's choices on `traces`.
pub fn selected_outcomes(
    params: &RouterParams,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
    traces: &[RoutingTrace],
    lambda: f64,
) -> Result<(f64, f64), TrainError> {
    let spec = UtilitySpec::new(lambda).ok_or_else(|| TrainError::Config(format!("invalid lambda {lambda}")))?;
    let picks: Vec<Result<(f64, f64), TrainError>> = traces
        .par_iter()
        .map(|t| {
            let rec = network::forward(&t.query, candidates, &t.omega, params, cfg, lambda)?;
            let y = t.quality(rec.chosen).ok_or_else(|| {
                TrainError::Config(format!("trace {} lacks an outcome for its chosen model", t.query.query_id))
            })?;
            Ok((compute_utility(y, candidates.costs()[rec.chosen], spec), y))
        })
        .collect();
    let (mut u, mut q) = (0.0, 0.0);
    for p in picks {
        let (a, b) = p?;
        u += a;
        q += b;
    }
    let n = traces.len().max(1) as f64;
    Ok((u / n, q / n))
}

fn validation_metric(
    params: &RouterParams,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
    val: &[RoutingTrace],
    tc: &TrainConfig,
) -> Result<f64, TrainError> {
    let (u, q) = selected_outcomes(params, cfg, candidates, val, tc.lambda)?;
    Ok(match tc.selection {
        SelectionMetric::ValidationUtility => u,
        SelectionMetric::ValidationQuality => q,
    })
}

/// Trains from a seeded initialization and returns the parameters of the
/// best validation epoch (ties go to the earliest epoch).
pub fn train(
    train: &[RoutingTrace],
    val: &[RoutingTrace],
    pool: &ModelPool,
    cfg: &RouterConfig,
    tc: &TrainConfig,
    weights: &LossWeights,
) -> Result<(RouterParams, TrainReport), TrainError> {
    let candidates = CandidateSet::from_pool(pool);
    let params = RouterParams::init(cfg, tc.seed)?;
    train_from(params, train, val, &candidates, cfg, tc, weights)
}

pub fn train_from(
    mut params: RouterParams,
    train: &[RoutingTrace],
    val: &[RoutingTrace],
    candidates: &CandidateSet,
    cfg: &RouterConfig,
    tc: &TrainConfig,
    weights: &LossWeights,
) -> Result<(RouterParams, TrainReport), TrainError> {
    tc.validate()?;
    weights.validate().map_err(TrainError::Config)?;
    cfg.validate()?;
    params.check(cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_7e41);
    let mut state = AdamState::new(&params);
    let mut rows = vec![EpochRow {
        epoch: 0,
        losses: None,
        val_metric: validation_metric(&params, cfg, candidates, val, tc)?,
    }];
    let mut best: Option<(usize, f64, RouterParams)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&RoutingTrace> = chunk.iter().map(|&i| &train[i]).collect();
            let (values, grads) = batch_objective(&params, cfg, candidates, &batch, weights, tc.lambda)
                .map_err(|e| match e {
                    TrainError::NonFinite(what) => TrainError::NonFinite(format!("{what} (epoch {epoch}, batch {bi})")),
                    other => other,
                })?;
            optimizer_step(&mut params, &grads, &mut state, tc.learning_rate, tc.gradient_clip).map_err(|e| match e {
                TrainError::NonFinite(what) => TrainError::NonFinite(format!("{what} (epoch {epoch}, batch {bi})")),
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
        }
        for s in &mut sums {
            *s /= train.len() as f64;
        }
        let metric = validation_metric(&params, cfg, candidates, val, tc)?;
        rows.push(EpochRow {
            epoch,
            losses: Some(sums),
            val_metric: metric,
        });
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, params.clone()));
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok((best_params, TrainReport { rows, best_epoch }))
}

/// Largest relative error, per parameter block, between the analytic
/// gradient of the mean objective over `traces` and central differences.
/// A coordinate's error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_model(
    params: &RouterParams,
    cfg: &RouterConfig,
    candidates: &CandidateSet,
    traces: &[RoutingTrace],
    weights: &LossWeights,
    lambda: f64,
    step: f64,
) -> Result<Vec<(String, f64)>, TrainError> {
    let refs: Vec<&RoutingTrace> = traces.iter().collect();
    let (_, analytic) = batch_objective(params, cfg, candidates, &refs, weights, lambda)?;
    let objective = |p: &RouterParams| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for t in traces {
            total += trace_objective(p, cfg, candidates, t, weights, lambda, false)?.0[5];
        }
        Ok(total / traces.len() as f64)
    };
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.blocks.len());
    for bi in 0..params.blocks.len() {
        let mut worst = 0.0f64;
        for j in 0..params.blocks[bi].tensor.numel() {
            let orig = params.blocks[bi].tensor.data()[j];
            work.blocks[bi].tensor.data_mut()[j] = orig + step;
            let plus = objective(&work)?;
            work.blocks[bi].tensor.data_mut()[j] = orig - step;
            let minus = objective(&work)?;
            work.blocks[bi].tensor.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[bi][j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        out.push((params.blocks[bi].name.clone(), worst));
    }
    Ok(out)
}
