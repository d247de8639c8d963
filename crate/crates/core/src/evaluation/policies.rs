use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{trace_seed, Decision, EvalError, PolicyInput, RouterPolicy};
use crate::domain::RoutingTrace;
use crate::network::{forward_on_tape, route, RouterConfig, RouterParams};
use crate::tensor::Tape;

fn pick(scores: &[f64], input: &PolicyInput) -> Result<usize, EvalError> {
    Ok(route(scores, input.candidates.costs(), input.omega, input.lambda)?.1)
}

fn masked(scores: Vec<f64>, omega: &[bool]) -> Vec<Option<f64>> {
    scores.into_iter().zip(omega).map(|(s, &a)| a.then_some(s)).collect()
}

/// Mean observed quality of every model over the traces where it is
/// available; `None` for a model never observed.
pub fn mean_quality_by_model(traces: &[RoutingTrace], pool_size: usize) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; pool_size];
    let mut count = vec![0usize; pool_size];
    for t in traces {
        for i in t.available() {
            if let Some(y) = t.y[i] {
                sum[i] += y;
                count[i] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// Upper bound that reads the observed outcomes.
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy;

impl RouterPolicy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn reads_labels(&self) -> bool {
        true
    }

    fn decide(&self, input: &PolicyInput, labels: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let labels = labels.ok_or_else(|| EvalError::Invalid("oracle needs observed outcomes".into()))?;
        let y: Vec<f64> = labels.iter().map(|v| v.unwrap_or(0.0)).collect();
        let chosen = pick(&y, input)?;
        Ok(Decision {
            chosen,
            scores: Some(masked(y, input.omega)),
        })
    }
}

/// The fixed model with the best mean validation utility; when it is
/// unavailable, the best available model by the same criterion.
#[derive(Debug, Clone)]
pub struct StrongestPolicy {
    mean_quality: Vec<Option<f64>>,
}

impl StrongestPolicy {
    pub fn new(mean_quality: Vec<Option<f64>>) -> Self {
        Self { mean_quality }
    }

    pub fn fit(validation: &[RoutingTrace], pool_size: usize) -> Self {
        Self::new(mean_quality_by_model(validation, pool_size))
    }

    pub fn mean_quality(&self) -> &[Option<f64>] {
        &self.mean_quality
    }
}

impl RouterPolicy for StrongestPolicy {
    fn name(&self) -> &str {
        "strongest"
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        if self.mean_quality.len() != input.candidates.len() {
            return Err(EvalError::Invalid("strongest policy fitted on a different pool size".into()));
        }
        let s: Vec<f64> = self.mean_quality.iter().map(|m| m.unwrap_or(f64::MIN)).collect();
        let chosen = pick(&s, input)?;
        Ok(Decision {
            chosen,
            scores: Some(masked(self.mean_quality.iter().map(|m| m.unwrap_or(0.0)).collect(), input.omega)),
        })
    }
}

/// Cheapest available model (earliest on ties).
#[derive(Debug, Clone, Default)]
pub struct CheapestPolicy;

impl RouterPolicy for CheapestPolicy {
    fn name(&self) -> &str {
        "cheapest"
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let costs = input.candidates.costs();
        let chosen = (0..costs.len())
            .filter(|&i| input.omega[i])
            .min_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)))
            .ok_or_else(|| EvalError::Invalid("no available model".into()))?;
        Ok(Decision { chosen, scores: None })
    }
}

/// Uniform over available models, seeded per query id.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub seed: u64,
}

impl RouterPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let avail: Vec<usize> = (0..input.omega.len()).filter(|&i| input.omega[i]).collect();
        if avail.is_empty() {
            return Err(EvalError::Invalid("no available model".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(trace_seed(self.seed, &input.query.query_id));
        Ok(Decision {
            chosen: avail[rng.random_range(0..avail.len())],
            scores: None,
        })
    }
}

/// Per-model quality predicted as the mean over the `k` nearest
/// calibration queries (Euclidean distance on mean-pooled features) where
/// the model was observed.
#[derive(Debug, Clone)]
pub struct KnnPolicy {
    k: usize,
    features: Vec<Vec<f64>>,
    outcomes: Vec<Vec<Option<f64>>>,
    fallback: Vec<f64>,
    ids: HashSet<String>,
}

impl KnnPolicy {
    pub fn fit(calibration: &[RoutingTrace], pool_size: usize, k: usize) -> Result<Self, EvalError> {
        if calibration.is_empty() || k == 0 {
            return Err(EvalError::Invalid("knn needs k >= 1 and calibration traces".into()));
        }
        let features: Vec<Vec<f64>> = calibration.iter().map(|t| t.query.pooled_features()).collect();
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(EvalError::Invalid("calibration features differ in width".into()));
        }
        let outcomes = calibration
            .iter()
            .map(|t| (0..pool_size).map(|i| t.quality(i)).collect())
            .collect();
        let fallback = mean_quality_by_model(calibration, pool_size)
            .into_iter()
            .map(|m| m.unwrap_or(0.0))
            .collect();
        Ok(Self {
            k,
            features,
            outcomes,
            fallback,
            ids: calibration.iter().map(|t| t.query.query_id.clone()).collect(),
        })
    }
}

impl RouterPolicy for KnnPolicy {
    fn name(&self) -> &str {
        "knn"
    }

    fn calibration_ids(&self) -> Option<&HashSet<String>> {
        Some(&self.ids)
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let f = input.query.pooled_features();
        if f.len() != self.features[0].len() {
            return Err(EvalError::Invalid("query features differ from calibration width".into()));
        }
        let mut dist: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, g)| (g.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let k = self.k.min(dist.len());
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &dist[..k];
        let scores: Vec<f64> = (0..input.omega.len())
            .map(|m| {
                let (s, c) = near
                    .iter()
                    .filter_map(|&(_, i)| self.outcomes[i].get(m).copied().flatten())
                    .fold((0.0, 0usize), |(s, c), y| (s + y, c + 1));
                if c == 0 {
                    self.fallback.get(m).copied().unwrap_or(0.0)
                } else {
                    s / c as f64
                }
            })
            .collect();
        let chosen = pick(&scores, input)?;
        Ok(Decision {
            chosen,
            scores: Some(masked(scores, input.omega)),
        })
    }
}

/// A trained router; covers the full model and all its ablations.
#[derive(Debug, Clone)]
pub struct LatentPolicy {
    pub name: String,
    pub params: RouterParams,
    pub config: RouterConfig,
}

impl LatentPolicy {
    pub fn new(name: impl Into<String>, params: RouterParams, config: RouterConfig) -> Self {
        Self {
            name: name.into(),
            params,
            config,
        }
    }

    /// Corrected quality estimates for every model.
    pub fn predict(&self, input: &PolicyInput) -> Result<Vec<f64>, EvalError> {
        let mut tape = Tape::new();
        let pv = self.params.attach(&mut tape, &self.config, false)?;
        let f = forward_on_tape(&mut tape, &pv, &self.config, input.query, input.candidates, input.omega)?;
        Ok(tape.value(f.corrected).to_vec())
    }
}

impl RouterPolicy for LatentPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&self, input: &PolicyInput, _: Option<&[Option<f64>]>) -> Result<Decision, EvalError> {
        let s = self.predict(input)?;
        let chosen = pick(&s, input)?;
        Ok(Decision {
            chosen,
            scores: Some(masked(s, input.omega)),
        })
    }
}
