//! The five objective terms. Each takes per-model `K x 1` columns and sums
//! over the available models only.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta_res: f64,
    pub tau_list: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            eta_res: 0.01,
            tau_list: 0.1,
        }
    }
}

impl LossWeights {
    /// Only the utility regression term.
    pub fn util_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eta_res: 0.0,
            tau_list: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta_res", self.eta_res),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.tau_list > 0.0 && self.tau_list.is_finite()) {
            return Err(format!("tau_list must be positive, got {}", self.tau_list));
        }
        Ok(())
    }
}

fn available(omega: &[bool]) -> Vec<usize> {
    omega.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

fn gathered(tape: &mut Tape, v: Var, omega: &[bool]) -> Result<Var, TensorError> {
    let idx = available(omega);
    if idx.is_empty() {
        return Err(TensorError::EmptySupport("loss"));
    }
    tape.gather_rows(v, &idx)
}

fn targets(tape: &mut Tape, values: &[f64], omega: &[bool]) -> Result<Var, TensorError> {
    let t: Vec<f64> = values.iter().zip(omega).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    tape.constant(t.len(), 1, t)
}

/// Gaussian negative log-likelihood without the constant:
/// `sum (y - mu)^2 / (2 sigma^2) + log sigma`.
pub fn loss_dist(tape: &mut Tape, mu: Var, sigma: Var, y: &[f64], omega: &[bool]) -> Result<Var, TensorError> {
    let m = gathered(tape, mu, omega)?;
    let s = gathered(tape, sigma, omega)?;
    let t = targets(tape, y, omega)?;
    let r = tape.sub(t, m)?;
    let r2 = tape.square(r);
    let s2 = tape.square(s);
    let s2 = tape.scale(s2, 2.0);
    let q = tape.div(r2, s2)?;
    let ls = tape.log(s)?;
    let terms = tape.add(q, ls)?;
    Ok(tape.sum(terms))
}

/// `sum_{u_i > u_j} log(1 + exp(-(s_i - s_j)))`; tied utilities add nothing.
pub fn loss_pair(tape: &mut Tape, s: Var, u: &[f64], omega: &[bool]) -> Result<Var, TensorError> {
    let avail = available(omega);
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for &i in &avail {
        for &j in &avail {
            if u[i] > u[j] {
                hi.push(i);
                lo.push(j);
            }
        }
    }
    if hi.is_empty() {
        return tape.constant(1, 1, vec![0.0]);
    }
    let a = tape.gather_rows(s, &hi)?;
    let b = tape.gather_rows(s, &lo)?;
    let d = tape.sub(b, a)?;
    let l = tape.softplus(d);
    Ok(tape.sum(l))
}

/// Cross-entropy between `softmax(u / tau)` and `softmax(s / tau)` over the
/// available models.
pub fn loss_list(tape: &mut Tape, s: Var, u: &[f64], omega: &[bool], tau: f64) -> Result<Var, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Invalid(format!("tau_list must be positive, got {tau}")));
    }
    let ua: Vec<f64> = u.iter().zip(omega).filter(|(_, &m)| m).map(|(v, _)| v / tau).collect();
    let p = crate::tensor::masked_softmax(&ua, &vec![true; ua.len()])?;
    let sa = gathered(tape, s, omega)?;
    let row = tape.transpose(sa);
    let row = tape.scale(row, 1.0 / tau);
    let logq = tape.log_softmax_rows(row);
    let pv = tape.constant(1, p.len(), p)?;
    let w = tape.mul(pv, logq)?;
    let total = tape.sum(w);
    Ok(tape.scale(total, -1.0))
}

/// `sum (s - u)^2`.
pub fn loss_util(tape: &mut Tape, s: Var, u: &[f64], omega: &[bool]) -> Result<Var, TensorError> {
    let sa = gathered(tape, s, omega)?;
    let t = targets(tape, u, omega)?;
    let r = tape.sub(sa, t)?;
    let r2 = tape.square(r);
    Ok(tape.sum(r2))
}

/// `sum delta^2`.
pub fn loss_res(tape: &mut Tape, delta: Var, omega: &[bool]) -> Result<Var, TensorError> {
    let d = gathered(tape, delta, omega)?;
    let d2 = tape.square(d);
    Ok(tape.sum(d2))
}

/// The five terms of one trace and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub dist: Var,
    pub pair: Var,
    pub list: Var,
    pub util: Var,
    pub res: Var,
    pub total: Var,
}

/// Per-model inputs of the objective for one trace.
pub struct LossInputs<'a> {
    pub mu: Var,
    pub sigma: Var,
    pub corrected: Var,
    pub delta: Var,
    pub costs: &'a [f64],
    /// Observed quality; entries outside `omega` are ignored.
    pub y: &'a [f64],
    pub omega: &'a [bool],
    pub lambda: f64,
    /// When false the distributional term is replaced by utility regression.
    pub distributional: bool,
}

/// `L_dist + alpha L_pair + beta L_list + gamma L_util + eta L_res`.
pub fn total_loss(tape: &mut Tape, inp: &LossInputs, w: &LossWeights) -> Result<LossTerms, TensorError> {
    let k = inp.costs.len();
    if inp.y.len() != k || inp.omega.len() != k {
        return Err(TensorError::Shape {
            op: "total_loss",
            lhs: vec![inp.y.len(), inp.omega.len()],
            rhs: vec![k],
        });
    }
    let u: Vec<f64> = inp.y.iter().zip(inp.costs).map(|(y, c)| y - inp.lambda * c).collect();
    let costs = tape.constant(k, 1, inp.costs.to_vec())?;
    let penalty = tape.scale(costs, inp.lambda);
    let s = tape.sub(inp.corrected, penalty)?;
    let util = loss_util(tape, s, &u, inp.omega)?;
    let dist = if inp.distributional {
        loss_dist(tape, inp.mu, inp.sigma, inp.y, inp.omega)?
    } else {
        util
    };
    let pair = loss_pair(tape, s, &u, inp.omega)?;
    let list = loss_list(tape, s, &u, inp.omega, w.tau_list)?;
    let res = loss_res(tape, inp.delta, inp.omega)?;
    let mut total = dist;
    for (term, weight) in [(pair, w.alpha), (list, w.beta), (util, w.gamma), (res, w.eta_res)] {
        if weight != 0.0 {
            let t = tape.scale(term, weight);
            total = tape.add(total, t)?;
        }
    }
    Ok(LossTerms {
        dist,
        pair,
        list,
        util,
        res,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn dist_reference_values() {
        let mut t = Tape::new();
        let (mu, sigma) = (col(&mut t, &[0.2, 0.5, 0.9]), col(&mut t, &[1.0; 3]));
        let l = loss_dist(&mut t, mu, sigma, &[0.2, 0.5, 0.9], &[true; 3]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let (mu, sigma) = (col(&mut t, &[0.0, 7.0]), col(&mut t, &[1.0, 3.0]));
        let l = loss_dist(&mut t, mu, sigma, &[1.0, 0.0], &[true, false]).unwrap();
        assert!((t.scalar(l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dist_matches_per_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        let mu: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let omega = [true, false, true, true, false];
        let mut expect = 0.0;
        for i in 0..k {
            if omega[i] {
                expect += (y[i] - mu[i]).powi(2) / (2.0 * sigma[i] * sigma[i]) + sigma[i].ln();
            }
        }
        let mut t = Tape::new();
        let (m, s) = (col(&mut t, &mu), col(&mut t, &sigma));
        let l = loss_dist(&mut t, m, s, &y, &omega).unwrap();
        assert!((t.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn pair_reference_values() {
        let mut t = Tape::new();
        let s = col(&mut t, &[0.3, 0.3]);
        let l = loss_pair(&mut t, s, &[0.9, 0.1], &[true, true]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let s = col(&mut t, &[50.0, 0.0]);
        let l = loss_pair(&mut t, s, &[0.9, 0.1], &[true, true]).unwrap();
        assert!(t.scalar(l) < 1e-20);
        let s = col(&mut t, &[0.1, 0.7, 0.4]);
        let l = loss_pair(&mut t, s, &[0.5, 0.5, 0.5], &[true; 3]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        // Only one of the two pairs involving model 2 is available.
        let s = col(&mut t, &[0.1, 0.2, 0.3]);
        let l = loss_pair(&mut t, s, &[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((t.scalar(l) - (1.0 + (0.2f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn list_reference_values() {
        let mut t = Tape::new();
        let s = col(&mut t, &[0.4, 0.4]);
        let l = loss_list(&mut t, s, &[0.4, 0.4], &[true, true], 0.1).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..1.0)).collect();
        let sv: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..1.0)).collect();
        let tau = 0.3;
        let soft = |v: &[f64]| {
            let e: Vec<f64> = v.iter().map(|x| (x / tau).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let (p, q) = (soft(&u), soft(&sv));
        let expect: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
        let s = col(&mut t, &sv);
        let l = loss_list(&mut t, s, &u, &[true; 3], tau).unwrap();
        assert!((t.scalar(l) - expect).abs() < 1e-12);

        // At s = u the cross-entropy is the entropy of p.
        let entropy: f64 = -p.iter().map(|a| a * a.ln()).sum::<f64>();
        let s = col(&mut t, &u);
        let l = loss_list(&mut t, s, &u, &[true; 3], tau).unwrap();
        assert!((t.scalar(l) - entropy).abs() < 1e-12);
    }

    #[test]
    fn util_and_res_reference_values() {
        let mut t = Tape::new();
        let s = col(&mut t, &[0.2, 0.6]);
        let l = loss_util(&mut t, s, &[0.2, 0.6], &[true, true]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let d = col(&mut t, &[0.0, 0.0, 5.0]);
        let l = loss_res(&mut t, d, &[true, true, false]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let rho = 0.15;
        let d = col(&mut t, &[rho, rho]);
        let l = loss_res(&mut t, d, &[true, true]).unwrap();
        assert!((t.scalar(l) - 2.0 * rho * rho).abs() < 1e-15);
    }

    fn random_inputs(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut r = |lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        (r(0.0, 1.0), r(0.05, 1.0), r(-0.1, 0.1), r(0.0, 1.0), r(0.0, 1.0))
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 4;
        let (mu, sigma, delta, costs, y) = random_inputs(&mut rng, k);
        let omega = [true, true, false, true];
        let w = LossWeights {
            alpha: 0.3,
            beta: 0.7,
            gamma: 1.1,
            eta_res: 0.05,
            tau_list: 0.2,
        };
        let lambda = 0.25;
        let mut t = Tape::new();
        let (m, s, d) = (col(&mut t, &mu), col(&mut t, &sigma), col(&mut t, &delta));
        let corrected = t.add(m, d).unwrap();
        let inp = LossInputs {
            mu: m,
            sigma: s,
            corrected,
            delta: d,
            costs: &costs,
            y: &y,
            omega: &omega,
            lambda,
            distributional: true,
        };
        let terms = total_loss(&mut t, &inp, &w).unwrap();

        // Independent scalar evaluation.
        let avail: Vec<usize> = (0..k).filter(|&i| omega[i]).collect();
        let u: Vec<f64> = (0..k).map(|i| y[i] - lambda * costs[i]).collect();
        let sc: Vec<f64> = (0..k).map(|i| mu[i] + delta[i] - lambda * costs[i]).collect();
        let mut dist = 0.0;
        let mut pair = 0.0;
        let mut util = 0.0;
        let mut res = 0.0;
        for &i in &avail {
            dist += (y[i] - mu[i]).powi(2) / (2.0 * sigma[i].powi(2)) + sigma[i].ln();
            util += (sc[i] - u[i]).powi(2);
            res += delta[i].powi(2);
            for &j in &avail {
                if u[i] > u[j] {
                    pair += (1.0 + (-(sc[i] - sc[j])).exp()).ln();
                }
            }
        }
        let zp: f64 = avail.iter().map(|&i| (u[i] / w.tau_list).exp()).sum();
        let zq: f64 = avail.iter().map(|&i| (sc[i] / w.tau_list).exp()).sum();
        let list: f64 = -avail
            .iter()
            .map(|&i| (u[i] / w.tau_list).exp() / zp * ((sc[i] / w.tau_list).exp() / zq).ln())
            .sum::<f64>();
        let total = dist + w.alpha * pair + w.beta * list + w.gamma * util + w.eta_res * res;
        for (got, expect) in [
            (terms.dist, dist),
            (terms.pair, pair),
            (terms.list, list),
            (terms.util, util),
            (terms.res, res),
            (terms.total, total),
        ] {
            assert!((t.scalar(got) - expect).abs() < 1e-12);
        }

        let only = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            eta_res: 0.0,
            tau_list: 0.2,
        };
        let terms = total_loss(&mut t, &inp, &only).unwrap();
        assert_eq!(t.scalar(terms.total), t.scalar(terms.dist));
    }

    #[test]
    fn ideal_predictions_leave_irreducible_terms() {
        let y = [0.8, 0.3, 0.55];
        let costs = [0.0, 0.0, 0.0];
        let w = LossWeights::default();
        let mut t = Tape::new();
        let mu = col(&mut t, &y);
        let sigma = col(&mut t, &[0.4, 0.4, 0.4]);
        let delta = col(&mut t, &[0.0; 3]);
        let inp = LossInputs {
            mu,
            sigma,
            corrected: mu,
            delta,
            costs: &costs,
            y: &y,
            omega: &[true; 3],
            lambda: 0.0,
            distributional: true,
        };
        let terms = total_loss(&mut t, &inp, &w).unwrap();
        let e: Vec<f64> = y.iter().map(|v| (v / w.tau_list).exp()).collect();
        let z: f64 = e.iter().sum();
        let entropy: f64 = -e.iter().map(|x| x / z * (x / z).ln()).sum::<f64>();
        let pair = t.scalar(terms.pair);
        let expect = 3.0 * 0.4f64.ln() + w.alpha * pair + w.beta * entropy;
        assert!((t.scalar(terms.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn floors_hold_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let k = rng.random_range(1..6);
            let (mu, _, delta, _, y) = random_inputs(&mut rng, k);
            let omega: Vec<bool> = (0..k).map(|i| i == 0 || rng.random_bool(0.6)).collect();
            let mut t = Tape::new();
            let s = col(&mut t, &mu);
            let d = col(&mut t, &delta);
            let tau = 0.1;
            let pair = loss_pair(&mut t, s, &y, &omega).unwrap();
            let list = loss_list(&mut t, s, &y, &omega, tau).unwrap();
            let util = loss_util(&mut t, s, &y, &omega).unwrap();
            let res = loss_res(&mut t, d, &omega).unwrap();
            let ua: Vec<f64> = y.iter().zip(&omega).filter(|(_, &m)| m).map(|(v, _)| v / tau).collect();
            let p = crate::tensor::masked_softmax(&ua, &vec![true; ua.len()]).unwrap();
            let entropy: f64 = -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            assert!(t.scalar(pair) >= 0.0);
            assert!(t.scalar(list) >= entropy - 1e-12);
            assert!(t.scalar(util) >= 0.0);
            assert!(t.scalar(res) >= 0.0);
        }
    }
}
