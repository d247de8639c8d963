use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{evaluate_policy, EvalError, PolicyEval, RouterPolicy};
use crate::domain::RoutingTrace;
use crate::network::CandidateSet;

/// `[0] + {0.01 * 200^(k/16) : k = 0..=16}`, from 0.01 up to 2.
pub fn lambda_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..=16).map(|k| 0.01 * 200f64.powf(k as f64 / 16.0)));
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub cost: f64,
    pub quality: f64,
}

/// Mean cost and quality of the policy's choices at every `lambda`.
pub fn cost_quality_frontier(
    policy: &dyn RouterPolicy,
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    lambdas: &[f64],
) -> Result<Vec<FrontierPoint>, EvalError> {
    lambdas
        .iter()
        .map(|&lambda| {
            let e = evaluate_policy(policy, traces, candidates, lambda)?;
            Ok(FrontierPoint {
                lambda,
                cost: e.cost,
                quality: e.quality,
            })
        })
        .collect()
}

/// Points not dominated by another point (lower or equal cost with higher
/// or equal quality), sorted by cost. Duplicates collapse.
pub fn pareto_front(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut sorted: Vec<FrontierPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.quality.total_cmp(&a.quality)));
    let mut front: Vec<FrontierPoint> = Vec::new();
    for p in sorted {
        if front.last().is_none_or(|last| p.quality > last.quality) {
            front.push(p);
        }
    }
    front
}

/// Quality of the Pareto curve at `cost`: linear between front points and
/// flat beyond either end.
pub fn quality_at(front: &[FrontierPoint], cost: f64) -> f64 {
    let first = front.first().expect("non-empty front");
    let last = front.last().expect("non-empty front");
    if cost <= first.cost {
        return first.quality;
    }
    if cost >= last.cost {
        return last.quality;
    }
    let j = front.partition_point(|p| p.cost <= cost);
    let (a, b) = (front[j - 1], front[j]);
    a.quality + (b.quality - a.quality) * (cost - a.cost) / (b.cost - a.cost)
}

/// Smallest and largest cost over every curve.
pub fn common_interval(curves: &[&[FrontierPoint]]) -> Result<(f64, f64), EvalError> {
    let costs = curves.iter().flat_map(|c| c.iter().map(|p| p.cost));
    let (lo, hi) = costs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| (l.min(c), h.max(c)));
    if !(hi > lo) {
        return Err(EvalError::Invalid(
            "frontier area needs at least two distinct cost values".into(),
        ));
    }
    Ok((lo, hi))
}

/// Trapezoidal area under the Pareto curve of `points` over `[lo, hi]`.
pub fn frontier_area(points: &[FrontierPoint], lo: f64, hi: f64) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::Invalid("empty frontier".into()));
    }
    if !(hi > lo) {
        return Err(EvalError::Invalid("frontier area needs lo < hi".into()));
    }
    let front = pareto_front(points);
    let mut xs = vec![lo];
    xs.extend(front.iter().map(|p| p.cost).filter(|&c| c > lo && c < hi));
    xs.push(hi);
    Ok(xs
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (quality_at(&front, w[0]) + quality_at(&front, w[1])))
        .sum())
}

/// Area of `points` divided by the oracle's area over the same interval.
pub fn nauc(points: &[FrontierPoint], oracle: &[FrontierPoint], lo: f64, hi: f64) -> Result<f64, EvalError> {
    let denom = frontier_area(oracle, lo, hi)?;
    if !(denom > 0.0) {
        return Err(EvalError::Invalid("oracle frontier has zero area".into()));
    }
    Ok(frontier_area(points, lo, hi)? / denom)
}

/// Whether the Pareto curve of `upper` is at least that of `lower` minus
/// `tol` at every point of either curve from the larger of the two minimum
/// costs upwards.
pub fn dominates(upper: &[FrontierPoint], lower: &[FrontierPoint], tol: f64) -> bool {
    if upper.is_empty() || lower.is_empty() {
        return false;
    }
    let (fu, fl) = (pareto_front(upper), pareto_front(lower));
    let from = fu[0].cost.max(fl[0].cost);
    fu.iter()
        .chain(&fl)
        .map(|p| p.cost.max(from))
        .all(|c| quality_at(&fu, c) >= quality_at(&fl, c) - tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mse: f64,
    pub ndcg: f64,
    pub spearman: f64,
    pub top3_recall: f64,
    /// Traces entering the Spearman mean (two or more available models with
    /// non-constant ranks).
    pub spearman_n: usize,
}

fn order_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn dcg(gains_in_order: impl Iterator<Item = f64>) -> f64 {
    gains_in_order
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum()
}

/// Outcome-prediction metrics over the available models of every evaluated
/// trace: MSE of the scores, NDCG with raw outcomes as gains, Spearman
/// correlation with average ranks, and top-3 recall normalized by
/// `min(3, |available|)`.
pub fn ranking_metrics(eval: &PolicyEval, traces: &[RoutingTrace]) -> Result<RankingMetrics, EvalError> {
    let (mut se, mut se_n) = (0.0, 0usize);
    let (mut ndcg, mut top3, mut n) = (0.0, 0.0, 0usize);
    let (mut rho, mut rho_n) = (0.0, 0usize);
    for (i, d) in &eval.decisions {
        let t = &traces[*i];
        let scores = d
            .scores
            .as_ref()
            .ok_or_else(|| EvalError::Invalid(format!("{} does not produce scores", eval.policy)))?;
        let avail: Vec<usize> = t.available().collect();
        let mut s = Vec::with_capacity(avail.len());
        let mut y = Vec::with_capacity(avail.len());
        for &m in &avail {
            s.push(scores[m].ok_or_else(|| EvalError::Invalid("missing score for an available model".into()))?);
            y.push(t.y[m].expect("available outcome"));
        }
        for (a, b) in s.iter().zip(&y) {
            se += (a - b) * (a - b);
            se_n += 1;
        }
        let by_score = order_desc(&s);
        let by_y = order_desc(&y);
        let ideal = dcg(by_y.iter().map(|&j| y[j]));
        ndcg += if ideal > 0.0 { dcg(by_score.iter().map(|&j| y[j])) / ideal } else { 1.0 };
        let m = avail.len().min(3);
        let hits = by_score[..m].iter().filter(|j| by_y[..m].contains(j)).count();
        top3 += hits as f64 / m as f64;
        n += 1;
        if avail.len() >= 2 {
            if let Some(r) = pearson(&average_ranks(&s), &average_ranks(&y)) {
                rho += r;
                rho_n += 1;
            }
        }
    }
    if n == 0 {
        return Err(EvalError::Invalid("no evaluated traces".into()));
    }
    Ok(RankingMetrics {
        mse: se / se_n as f64,
        ndcg: ndcg / n as f64,
        spearman: if rho_n > 0 { rho / rho_n as f64 } else { f64::NAN },
        top3_recall: top3 / n as f64,
        spearman_n: rho_n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test from summary statistics (sample
/// standard deviations).
pub fn welch_test(
    mean_a: f64,
    std_a: f64,
    n_a: usize,
    mean_b: f64,
    std_b: f64,
    n_b: usize,
) -> Result<WelchResult, EvalError> {
    if n_a < 2 || n_b < 2 {
        return Err(EvalError::Invalid("welch test needs at least two samples per group".into()));
    }
    if !(std_a >= 0.0 && std_b >= 0.0) || ![mean_a, mean_b, std_a, std_b].iter().all(|v| v.is_finite()) {
        return Err(EvalError::Invalid("welch test needs finite means and non-negative deviations".into()));
    }
    let va = std_a * std_a / n_a as f64;
    let vb = std_b * std_b / n_b as f64;
    if va + vb == 0.0 {
        return Err(EvalError::Invalid("welch test is undefined when both groups have zero variance".into()));
    }
    let t = (mean_a - mean_b) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (n_a - 1) as f64 + vb * vb / (n_b - 1) as f64);
    Ok(WelchResult {
        t,
        df,
        p: student_two_sided(t, df),
    })
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
pub(crate) fn student_two_sided(t: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}
