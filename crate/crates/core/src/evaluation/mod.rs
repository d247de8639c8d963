//! Baseline routers, evaluation harness, frontiers, ranking metrics,
//! pool-change and cold-start experiments, latency and significance tests.

mod learned;
mod metrics;
mod policies;
mod report;
mod scenarios;

pub use learned::{train_additive, train_direct_classifier, AdditivePolicy, AuxTrainConfig, DirectClassifierPolicy};
pub use metrics::{
    common_interval, cost_quality_frontier, dominates, frontier_area, lambda_grid, nauc, pareto_front,
    quality_at, ranking_metrics, welch_test, FrontierPoint, RankingMetrics, WelchResult,
};
pub use policies::{
    mean_quality_by_model, CheapestPolicy, KnnPolicy, LatentPolicy, OraclePolicy, RandomPolicy, StrongestPolicy,
};
pub use report::{
    latency_probe, write_eval_csv, write_frontier_csv, write_frontier_svg, EvalRow, FrontierRow, LatencyStats,
};
pub use scenarios::{cold_start_eval, pool_change_eval, ColdStartPoint, ColdStartSize, Scenario, ScenarioResult};

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{DomainError, MultimodalQuery, RoutingTrace};
use crate::network::{CandidateSet, NetworkError};
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation input error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<crate::tensor::TensorError> for EvalError {
    fn from(e: crate::tensor::TensorError) -> Self {
        EvalError::Network(e.into())
    }
}

/// What a policy sees for one routing decision.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub query: &'a MultimodalQuery,
    pub candidates: &'a CandidateSet,
    pub omega: &'a [bool],
    pub lambda: f64,
}

/// A chosen available model and, optionally, per-model predicted quality
/// (`None` for unavailable models).
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub chosen: usize,
    pub scores: Option<Vec<Option<f64>>>,
}

/// Uniform routing interface. Observed outcomes are passed only to
/// policies that declare `reads_labels`.
pub trait RouterPolicy: Send + Sync {
    fn name(&self) -> &str;

    fn reads_labels(&self) -> bool {
        false
    }

    /// Query ids the policy was fitted on, when it keeps them.
    fn calibration_ids(&self) -> Option<&HashSet<String>> {
        None
    }

    fn decide(&self, input: &PolicyInput, labels: Option<&[Option<f64>]>) -> Result<Decision, EvalError>;
}

/// Outcome of running one policy over a trace list.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub policy: String,
    pub lambda: f64,
    /// Traces with at least one available model.
    pub n: usize,
    /// Traces skipped because no model was available.
    pub skipped: usize,
    pub quality: f64,
    pub utility: f64,
    pub regret: f64,
    pub cost: f64,
    /// Mean selected quality and count per slice label.
    pub per_slice: BTreeMap<String, (f64, usize)>,
    /// Index into the evaluated traces, the decision, for every evaluated trace.
    pub decisions: Vec<(usize, Decision)>,
}

/// Runs `policy` on every trace with a non-empty mask.
pub fn evaluate_policy(
    policy: &dyn RouterPolicy,
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    lambda: f64,
) -> Result<PolicyEval, EvalError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EvalError::Invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if let Some(ids) = policy.calibration_ids() {
        if let Some(t) = traces.iter().find(|t| ids.contains(&t.query.query_id)) {
            return Err(EvalError::Invalid(format!(
                "trace {} is part of the calibration data of {}",
                t.query.query_id,
                policy.name()
            )));
        }
    }
    let k = candidates.len();
    if let Some(t) = traces.iter().find(|t| t.omega.len() != k) {
        return Err(EvalError::Invalid(format!(
            "trace {} has {} mask entries for a pool of {k}",
            t.query.query_id,
            t.omega.len()
        )));
    }
    let costs = candidates.costs();
    let results: Vec<Option<Result<Decision, EvalError>>> = traces
        .par_iter()
        .map(|t| {
            if t.available_count() == 0 {
                return None;
            }
            let input = PolicyInput {
                query: &t.query,
                candidates,
                omega: &t.omega,
                lambda,
            };
            let labels = policy.reads_labels().then_some(t.y.as_slice());
            Some(policy.decide(&input, labels))
        })
        .collect();

    let mut decisions = Vec::new();
    let (mut q, mut u, mut r, mut c) = (0.0, 0.0, 0.0, 0.0);
    let mut slices: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut skipped = 0;
    for (i, res) in results.into_iter().enumerate() {
        let Some(res) = res else {
            skipped += 1;
            continue;
        };
        let d = res?;
        let t = &traces[i];
        let y = t.quality(d.chosen).ok_or_else(|| {
            EvalError::Invalid(format!(
                "{} chose unavailable model {} on {}",
                policy.name(),
                d.chosen,
                t.query.query_id
            ))
        })?;
        let best = t
            .available()
            .map(|j| t.y[j].expect("available outcome") - lambda * costs[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let util = y - lambda * costs[d.chosen];
        q += y;
        u += util;
        r += best - util;
        c += costs[d.chosen];
        if let Some(label) = &t.query.slice_label {
            let e = slices.entry(label.clone()).or_insert((0.0, 0));
            e.0 += y;
            e.1 += 1;
        }
        decisions.push((i, d));
    }
    let n = decisions.len();
    let div = n.max(1) as f64;
    for v in slices.values_mut() {
        v.0 /= v.1 as f64;
    }
    Ok(PolicyEval {
        policy: policy.name().to_string(),
        lambda,
        n,
        skipped,
        quality: q / div,
        utility: u / div,
        regret: r / div,
        cost: c / div,
        per_slice: slices,
        decisions,
    })
}

/// Deterministic per-query seed.
pub(crate) fn trace_seed(seed: u64, query_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in query_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
