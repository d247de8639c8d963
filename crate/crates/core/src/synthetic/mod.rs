//! Seeded synthetic routing benchmark.
//!
//! Every model has a skill vector and a base ability; every query has a
//! requirement vector on the simplex. A model's expected quality on a query
//! is `logistic(kappa * <skill, requirement> + base)`. Models 0 and 1 form a
//! specialist pair with opposite skills, so their ordering flips across
//! queries.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    declared_slices, write_pool_file, write_traces_jsonl, DomainError, ModelPool, MultimodalQuery, PoolEntry,
    PoolFile, RoutingTrace, TokenMatrix,
};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator config error: {0}")]
    Config(String),
    #[error("reversal guarantee not met after {attempts} attempts (best {best} of {needed} required)")]
    NoReversals { attempts: usize, best: usize, needed: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub pool_size: usize,
    pub skill_dims: usize,
    pub queries_n: usize,
    /// Standard deviation of the observation noise on quality.
    pub noise_std: f64,
    pub sharpness: f64,
    pub feature_redundancy: usize,
    pub distractor_dims: usize,
    pub slice_count: usize,
    pub availability_drop_rate: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
    pub image_tokens: usize,
    pub question_tokens: usize,
    /// Standard deviation of the noise added to every token feature.
    pub feature_noise_std: f64,
    /// Target share of queries on which the first specialist is better.
    pub specialist_majority: f64,
    /// When set, only the first token of each modality encodes the query;
    /// the others encode unrelated background requirements with every code
    /// entry lowered by this amount. When unset, every token is a copy.
    pub background_shift: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pool_size: 8,
            skill_dims: 4,
            queries_n: 7000,
            noise_std: 0.05,
            sharpness: 4.0,
            feature_redundancy: 2,
            distractor_dims: 8,
            slice_count: 4,
            availability_drop_rate: 0.15,
            split: [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0],
            seed: 7,
            image_tokens: 4,
            question_tokens: 2,
            feature_noise_std: 0.3,
            specialist_majority: 0.65,
            background_shift: Some(1.0),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let fail = |m: &str| Err(GeneratorError::Config(m.to_string()));
        if self.pool_size < 2 {
            return fail("pool_size must be at least 2");
        }
        if self.skill_dims == 0 || self.feature_redundancy == 0 || self.slice_count == 0 {
            return fail("skill_dims, feature_redundancy and slice_count must be at least 1");
        }
        if self.image_tokens == 0 || self.question_tokens == 0 {
            return fail("image_tokens and question_tokens must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.feature_noise_std >= 0.0) {
            return fail("noise levels must be non-negative");
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return fail("sharpness must be positive");
        }
        if !(self.specialist_majority > 0.0 && self.specialist_majority < 1.0) {
            return fail("specialist_majority must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.availability_drop_rate) {
            return fail("availability_drop_rate must lie in [0, 1)");
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("split fractions must be non-negative and sum to 1");
        }
        let (a, b, c) = self.split_sizes();
        if a == 0 || b == 0 || c == 0 {
            return fail("every split must receive at least one query");
        }
        Ok(())
    }

    /// Train, validation and test sizes; rounding remainders go to train.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.queries_n as f64;
        let val = (n * self.split[1]).round() as usize;
        let test = (n * self.split[2]).round() as usize;
        (self.queries_n.saturating_sub(val + test), val, test)
    }

    pub fn token_dim(&self) -> usize {
        self.skill_dims * self.feature_redundancy + self.distractor_dims
    }
}

/// The generating parameters, kept out of the router's reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model_ids: Vec<String>,
    pub skills: Vec<Vec<f64>>,
    pub base: Vec<f64>,
    pub raw_costs: Vec<f64>,
    /// Mixing matrix of the question-token code, `S x S`.
    pub question_code: Vec<Vec<f64>>,
    pub sharpness: f64,
    /// Indices of the two models with opposite skills.
    pub specialist_pair: [usize; 2],
    pub query_ids: Vec<String>,
    pub requirements: Vec<Vec<f64>>,
    /// Closed-form expected quality per query and model.
    pub expected: Vec<Vec<f64>>,
    /// Realized quality per query and model, before masking.
    pub realized: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn write_json(&self, path: &Path) -> Result<(), GeneratorError> {
        let text = serde_json::to_string(self).expect("ground truth serializes");
        std::fs::write(path, text).map_err(|source| GeneratorError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn index_of(&self, query_id: &str) -> Option<usize> {
        self.query_ids.iter().position(|q| q == query_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalReport {
    /// Test queries where the first specialist is truly better.
    pub first_better: usize,
    pub second_better: usize,
    /// Size of the minority side.
    pub reversals: usize,
    pub test_size: usize,
    pub attempt: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub pool_file: PoolFile,
    /// Descriptors built from the training split.
    pub pool: ModelPool,
    pub slices: Vec<String>,
    pub train: Vec<RoutingTrace>,
    pub val: Vec<RoutingTrace>,
    pub test: Vec<RoutingTrace>,
    pub truth: GroundTruth,
    pub reversal: ReversalReport,
}

impl Dataset {
    /// Writes `pool.json`, `train.jsonl`, `val.jsonl`, `test.jsonl`,
    /// `ground_truth.json` and `reversal.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), GeneratorError> {
        let io = |path: &Path, e: std::io::Error| GeneratorError::Io {
            path: path.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        write_pool_file(&dir.join("pool.json"), &self.pool_file)?;
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            write_traces_jsonl(&dir.join(format!("{name}.jsonl")), split)?;
        }
        self.truth.write_json(&dir.join("ground_truth.json"))?;
        let path = dir.join("reversal.json");
        let text = serde_json::to_string_pretty(&self.reversal).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    crate::tensor::sigmoid(x)
}

/// Pool-level ground truth: skills, base abilities and raw costs.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPool {
    pub pool_file: PoolFile,
    pub skills: Vec<Vec<f64>>,
    pub base: Vec<f64>,
    pub raw_costs: Vec<f64>,
    pub question_code: Vec<Vec<f64>>,
}

pub fn model_id(i: usize) -> String {
    format!("m{i:02}")
}

pub fn generate_pool(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> GeneratedPool {
    let (k, s) = (config.pool_size, config.skill_dims);
    let unit = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
    let mut skills: Vec<Vec<f64>> = (0..k).map(|_| (0..s).map(|_| unit(rng)).collect()).collect();
    // Specialist pair: opposite skills, so their margin changes sign with the
    // requirement.
    let v: Vec<f64> = (0..s).map(|_| unit(rng)).collect();
    skills[0] = v.clone();
    skills[1] = v.iter().map(|x| -x).collect();
    let normal = Normal::new(0.0, 0.6).expect("valid normal");
    let mut base: Vec<f64> = (0..k).map(|_| normal.sample(rng)).collect();
    let shared = normal.sample(rng);
    // Offset the pair so that the first model wins on roughly
    // `specialist_majority` of the requirement distribution.
    let mut margins: Vec<f64> = (0..4000)
        .map(|_| {
            let req = sample_requirement(config, rng).0;
            2.0 * config.sharpness * v.iter().zip(&req).map(|(a, r)| a * r).sum::<f64>()
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let q = ((1.0 - config.specialist_majority) * margins.len() as f64) as usize;
    let offset = -margins[q.min(margins.len() - 1)] / 2.0;
    base[0] = shared + offset;
    base[1] = shared - offset;
    let cost_noise = Normal::new(0.0, 0.25).expect("valid normal");
    let raw_costs: Vec<f64> = base.iter().map(|b| (1.2 * b + cost_noise.sample(rng)).exp()).collect();
    let raw_latency: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..2.0)).collect();
    let question_code: Vec<Vec<f64>> = (0..s).map(|_| (0..s).map(|_| unit(rng)).collect()).collect();
    let ids: Vec<String> = (0..k).map(model_id).collect();
    let pool_file = PoolFile {
        models: ids
            .iter()
            .zip(raw_costs.iter().zip(&raw_latency))
            .map(|(id, (c, l))| PoolEntry {
                id: id.clone(),
                raw_cost: *c,
                raw_latency: *l,
            })
            .collect(),
        canonical_order: ids,
    };
    GeneratedPool {
        pool_file,
        skills,
        base,
        raw_costs,
        question_code,
    }
}

/// The requirement as a centered code: `S * r - 1`.
fn centered(req: &[f64]) -> Vec<f64> {
    let s = req.len() as f64;
    req.iter().map(|r| r * s - 1.0).collect()
}

/// Inverse of the image code: reads the first copy block of the first image
/// token.
pub fn decode_requirement(query: &MultimodalQuery, skill_dims: usize) -> Vec<f64> {
    query.image_tokens.row(0)[..skill_dims].iter().map(|c| (c + 1.0) / skill_dims as f64).collect()
}

/// Slice-specific Dirichlet concentration (sampled as normalized gammas): mass favours dimension `slice % S`.
fn concentration(slice: usize, skill_dims: usize) -> Vec<f64> {
    (0..skill_dims).map(|j| if j == slice % skill_dims { 2.5 } else { 0.6 }).collect()
}

fn sample_requirement(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let s = config.skill_dims;
    let slice = rng.random_range(0..config.slice_count);
    if s == 1 {
        return (vec![1.0], slice);
    }
    let g: Vec<f64> = concentration(slice, s)
        .into_iter()
        .map(|a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let total: f64 = g.iter().sum();
    (g.into_iter().map(|x| x / total).collect(), slice)
}

pub fn generate_query(
    config: &GeneratorConfig,
    question_code: &[Vec<f64>],
    query_id: String,
    rng: &mut ChaCha8Rng,
) -> (MultimodalQuery, Vec<f64>, String) {
    let (req, slice) = sample_requirement(config, rng);
    let code = centered(&req);
    let encode = |code: &[f64]| -> Vec<f64> {
        question_code
            .iter()
            .map(|row| row.iter().zip(code).map(|(a, b)| a * b).sum())
            .collect()
    };
    let qcode = encode(&code);
    let noise = Normal::new(0.0, config.feature_noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let jitter = |rng: &mut ChaCha8Rng| if config.feature_noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
    let token = |code: &[f64], rng: &mut ChaCha8Rng| {
        let mut t = Vec::with_capacity(config.token_dim());
        for _ in 0..config.feature_redundancy {
            for c in code {
                t.push(c + jitter(rng));
            }
        }
        for _ in 0..config.distractor_dims {
            t.push(rng.random_range(-1.0..1.0));
        }
        t
    };
    let mut image = Vec::with_capacity(config.image_tokens * config.token_dim());
    let mut question = Vec::with_capacity(config.question_tokens * config.token_dim());
    for t in 0..config.image_tokens.max(config.question_tokens) {
        let (ic, qc) = match config.background_shift {
            Some(shift) if t > 0 => {
                let other = centered(&sample_requirement(config, rng).0);
                let lower = |v: Vec<f64>| v.into_iter().map(|x| x - shift).collect::<Vec<f64>>();
                (lower(other.clone()), lower(encode(&other)))
            }
            _ => (code.clone(), qcode.clone()),
        };
        if t < config.image_tokens {
            image.extend(token(&ic, rng));
        }
        if t < config.question_tokens {
            question.extend(token(&qc, rng));
        }
    }
    let d = config.token_dim();
    let label = format!("s{slice}");
    let query = MultimodalQuery {
        query_id,
        image_tokens: TokenMatrix::new(config.image_tokens, d, image).expect("token shape"),
        question_tokens: TokenMatrix::new(config.question_tokens, d, question).expect("token shape"),
        slice_label: Some(label.clone()),
    };
    (query, req, label)
}

/// Closed-form expected quality of every model on a requirement.
pub fn expected_quality(requirement: &[f64], skills: &[Vec<f64>], base: &[f64], sharpness: f64) -> Vec<f64> {
    skills
        .iter()
        .zip(base)
        .map(|(sk, b)| {
            let dot: f64 = sk.iter().zip(requirement).map(|(a, r)| a * r).sum();
            logistic(sharpness * dot + b)
        })
        .collect()
}

/// Realized quality for every model plus the availability mask. The
/// specialist pair is always available.
pub fn realize_outcomes(
    requirement: &[f64],
    pool: &GeneratedPool,
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<bool>) {
    let mean = expected_quality(requirement, &pool.skills, &pool.base, config.sharpness);
    let y: Vec<f64> = mean
        .iter()
        .map(|m| {
            let e = if config.noise_std > 0.0 {
                Normal::new(0.0, config.noise_std).expect("valid normal").sample(rng)
            } else {
                0.0
            };
            (m + e).clamp(0.0, 1.0)
        })
        .collect();
    let omega = (0..mean.len())
        .map(|i| i < 2 || !rng.random_bool(config.availability_drop_rate))
        .collect();
    (y, omega)
}

fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    seed.wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Generates pool, traces and ground truth. Retries with a derived seed
/// until the specialist pair flips on at least 5% of test queries.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset, GeneratorError> {
    config.validate()?;
    const ATTEMPTS: usize = 10;
    let (n_train, n_val, n_test) = config.split_sizes();
    let needed = (0.05 * n_test as f64).ceil() as usize;
    let mut best = 0;
    for attempt in 0..ATTEMPTS {
        let seed = attempt_seed(config.seed, attempt);
        let mut pool_rng = ChaCha8Rng::seed_from_u64(seed);
        let gp = generate_pool(config, &mut pool_rng);
        let mut traces = Vec::with_capacity(config.queries_n);
        let mut truth = GroundTruth {
            model_ids: gp.pool_file.canonical_order.clone(),
            skills: gp.skills.clone(),
            base: gp.base.clone(),
            raw_costs: gp.raw_costs.clone(),
            question_code: gp.question_code.clone(),
            sharpness: config.sharpness,
            specialist_pair: [0, 1],
            query_ids: Vec::with_capacity(config.queries_n),
            requirements: Vec::with_capacity(config.queries_n),
            expected: Vec::with_capacity(config.queries_n),
            realized: Vec::with_capacity(config.queries_n),
        };
        for idx in 0..config.queries_n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64 + 1);
            let (query, req, _) = generate_query(config, &gp.question_code, format!("q{idx:05}"), &mut rng);
            let (y, omega) = realize_outcomes(&req, &gp, config, &mut rng);
            truth.query_ids.push(query.query_id.clone());
            truth.expected.push(expected_quality(&req, &gp.skills, &gp.base, config.sharpness));
            truth.requirements.push(req);
            truth.realized.push(y.clone());
            let y = y.iter().zip(&omega).map(|(v, &m)| m.then_some(*v)).collect();
            traces.push(RoutingTrace { query, omega, y });
        }
        let test = traces.split_off(n_train + n_val);
        let val = traces.split_off(n_train);
        let train = traces;
        let (mut first, mut second) = (0, 0);
        for e in &truth.expected[n_train + n_val..] {
            if e[0] > e[1] {
                first += 1;
            } else if e[1] > e[0] {
                second += 1;
            }
        }
        let reversals = first.min(second);
        best = best.max(reversals);
        if reversals < needed {
            continue;
        }
        let slices = declared_slices(&train);
        let pool = ModelPool::from_calibration(&gp.pool_file, &train, &slices)?;
        return Ok(Dataset {
            config: config.clone(),
            pool_file: gp.pool_file,
            pool,
            slices,
            train,
            val,
            test,
            truth,
            reversal: ReversalReport {
                first_better: first,
                second_better: second,
                reversals,
                test_size: n_test,
                attempt,
            },
        });
    }
    Err(GeneratorError::NoReversals {
        attempts: ATTEMPTS,
        best,
        needed,
    })
}
