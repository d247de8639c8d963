use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_policy, mean_quality_by_model, trace_seed, EvalError, LatentPolicy, RouterPolicy};
use crate::domain::{build_capability_profile, neutral_profile, ModelPool, RoutingTrace};
use crate::network::{CandidateSet, RouterConfig};
use crate::training::{train, LossWeights, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Full,
    RemoveStrongest,
    RemoveCheapest,
    RemoveRandom30pct,
    LeaveOneOut,
    SingleModel,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Full,
        Scenario::RemoveStrongest,
        Scenario::RemoveCheapest,
        Scenario::RemoveRandom30pct,
        Scenario::LeaveOneOut,
        Scenario::SingleModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Full => "full",
            Scenario::RemoveStrongest => "remove_strongest",
            Scenario::RemoveCheapest => "remove_cheapest",
            Scenario::RemoveRandom30pct => "remove_random_30pct",
            Scenario::LeaveOneOut => "leave_one_out",
            Scenario::SingleModel => "single_model",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// Aggregate result of one policy under one scenario. Leave-one-out
/// averages over the K single-removal pools.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub policy: String,
    pub quality: f64,
    pub regret: f64,
    pub cost: f64,
    pub n: usize,
    pub skipped: usize,
}

fn without(k: usize, removed: &[usize]) -> Vec<bool> {
    (0..k).map(|i| !removed.contains(&i)).collect()
}

/// Restricted trace sets the scenario evaluates on. `reference` is the
/// per-model mean calibration quality that defines the strongest model.
fn scenario_sets(
    scenario: Scenario,
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    reference: &[Option<f64>],
    seed: u64,
) -> Result<Vec<Vec<RoutingTrace>>, EvalError> {
    let k = candidates.len();
    let costs = candidates.costs();
    let restrict = |mask: &[bool]| traces.iter().map(|t| t.restricted(mask)).collect::<Vec<_>>();
    Ok(match scenario {
        Scenario::Full => vec![traces.to_vec()],
        Scenario::RemoveStrongest => {
            if reference.len() != k {
                return Err(EvalError::Invalid("reference qualities do not match the pool".into()));
            }
            let strongest = (0..k)
                .max_by(|&a, &b| {
                    let (qa, qb) = (reference[a].unwrap_or(f64::MIN), reference[b].unwrap_or(f64::MIN));
                    qa.total_cmp(&qb).then(b.cmp(&a))
                })
                .ok_or_else(|| EvalError::Invalid("empty pool".into()))?;
            vec![restrict(&without(k, &[strongest]))]
        }
        Scenario::RemoveCheapest => {
            let cheapest = (0..k)
                .min_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)))
                .ok_or_else(|| EvalError::Invalid("empty pool".into()))?;
            vec![restrict(&without(k, &[cheapest]))]
        }
        Scenario::RemoveRandom30pct => {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x30_9c7));
            let m = (0.3 * k as f64).round() as usize;
            vec![restrict(&without(k, &order[..m]))]
        }
        Scenario::LeaveOneOut => (0..k).map(|m| restrict(&without(k, &[m]))).collect(),
        Scenario::SingleModel => vec![traces
            .iter()
            .map(|t| {
                let avail: Vec<usize> = t.available().collect();
                let mut mask = vec![false; k];
                if !avail.is_empty() {
                    let mut rng = ChaCha8Rng::seed_from_u64(trace_seed(seed, &t.query.query_id));
                    mask[avail[rng.random_range(0..avail.len())]] = true;
                }
                t.restricted(&mask)
            })
            .collect()],
    })
}

/// Evaluates every policy under `scenario`. Traces whose restricted mask is
/// empty are skipped and counted.
pub fn pool_change_eval(
    policies: &[&dyn RouterPolicy],
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    scenario: Scenario,
    reference: &[Option<f64>],
    lambda: f64,
    seed: u64,
) -> Result<Vec<ScenarioResult>, EvalError> {
    let sets = scenario_sets(scenario, traces, candidates, reference, seed)?;
    policies
        .iter()
        .map(|p| {
            let mut acc = ScenarioResult {
                scenario,
                policy: p.name().to_string(),
                quality: 0.0,
                regret: 0.0,
                cost: 0.0,
                n: 0,
                skipped: 0,
            };
            for set in &sets {
                let e = evaluate_policy(*p, set, candidates, lambda)?;
                acc.quality += e.quality;
                acc.regret += e.regret;
                acc.cost += e.cost;
                acc.n += e.n;
                acc.skipped += e.skipped;
            }
            let s = sets.len() as f64;
            acc.quality /= s;
            acc.regret /= s;
            acc.cost /= s;
            Ok(acc)
        })
        .collect()
}

/// Calibration budget for a newly inserted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStartSize {
    Examples(usize),
    Full,
}

impl ColdStartSize {
    pub fn default_sizes() -> Vec<ColdStartSize> {
        vec![
            ColdStartSize::Examples(0),
            ColdStartSize::Examples(16),
            ColdStartSize::Examples(64),
            ColdStartSize::Examples(128),
            ColdStartSize::Full,
        ]
    }

    pub fn label(self) -> String {
        match self {
            ColdStartSize::Examples(k) => k.to_string(),
            ColdStartSize::Full => "full".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartPoint {
    pub size: String,
    /// Calibration traces used for the inserted model's profile.
    pub examples: usize,
    pub quality: f64,
    pub regret: f64,
    /// Share of test decisions that pick the inserted model.
    pub held_out_share: f64,
}

/// Trains the router with `held_out` masked out of every training and
/// validation trace, then inserts it with a profile built from the first
/// `k` training traces where it was observed and evaluates on `test`.
#[allow(clippy::too_many_arguments)]
pub fn cold_start_eval(
    train_traces: &[RoutingTrace],
    val_traces: &[RoutingTrace],
    test_traces: &[RoutingTrace],
    pool: &ModelPool,
    slices: &[String],
    held_out: usize,
    sizes: &[ColdStartSize],
    cfg: &RouterConfig,
    tc: &TrainConfig,
    weights: &LossWeights,
) -> Result<Vec<ColdStartPoint>, EvalError> {
    let k = pool.len();
    if held_out >= k || k < 2 {
        return Err(EvalError::Invalid(format!("held-out model {held_out} is not in a pool of {k}")));
    }
    let mask = without(k, &[held_out]);
    let keep = |ts: &[RoutingTrace]| -> Vec<RoutingTrace> {
        ts.iter()
            .map(|t| t.restricted(&mask))
            .filter(|t| t.available_count() > 0)
            .collect()
    };
    let (tr, va) = (keep(train_traces), keep(val_traces));
    let (params, _) = train(&tr, &va, pool, cfg, tc, weights)?;
    let policy = LatentPolicy::new("latent_router", params, cfg.clone());

    let ids = &pool.canonical_order;
    let target = &ids[held_out];
    let observed: Vec<RoutingTrace> = train_traces
        .iter()
        .filter(|t| t.quality(held_out).is_some())
        .cloned()
        .collect();
    let others = mean_quality_by_model(&tr, k);
    let prior = {
        let v: Vec<f64> = pool
            .models
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held_out && others[i].is_some())
            .map(|(_, m)| m.profile[0])
            .collect();
        if v.is_empty() {
            0.5
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    sizes
        .iter()
        .map(|&size| {
            let n = match size {
                ColdStartSize::Examples(n) => n.min(observed.len()),
                ColdStartSize::Full => observed.len(),
            };
            let (p, b) = if n == 0 {
                neutral_profile(prior, slices.len(), k)
            } else if matches!(size, ColdStartSize::Full) {
                build_capability_profile(train_traces, ids, target, slices)?
            } else {
                build_capability_profile(&observed[..n], ids, target, slices)?
            };
            let inserted = pool.with_profile(held_out, p, b);
            let cands = CandidateSet::from_pool(&inserted);
            let e = evaluate_policy(&policy, test_traces, &cands, tc.lambda)?;
            let share = e.decisions.iter().filter(|(_, d)| d.chosen == held_out).count() as f64 / e.n.max(1) as f64;
            Ok(ColdStartPoint {
                size: size.label(),
                examples: n,
                quality: e.quality,
                regret: e.regret,
                held_out_share: share,
            })
        })
        .collect()
}
