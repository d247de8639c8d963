//! Queries, model pools, routing traces and utilities.

mod io;
mod profile;
mod validate;

pub use io::{read_pool_file, read_traces_jsonl, write_pool_file, write_traces_jsonl};
pub use profile::{build_capability_profile, declared_slices, neutral_profile};
pub use validate::{validate_dataset, Violation, ViolationKind, ValidationReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("cost {value} at index {index} is negative")]
    NegativeCost { index: usize, value: f64 },
    #[error("no positive cost in pool")]
    NoPositiveCost,
    #[error("model {0} is available in no calibration trace")]
    InsufficientCalibration(String),
    #[error("unknown model id {0}")]
    UnknownModel(String),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("invalid trace {query_id}: {reason}")]
    InvalidTrace { query_id: String, reason: String },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DomainError>;

/// Row-major `rows x cols` token features, serialized as nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> std::result::Result<Self, String> {
        if rows * cols != data.len() {
            return Err(format!("{rows}x{cols} tokens given {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column means over tokens.
    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= self.rows.max(1) as f64;
        }
        out
    }
}

impl TryFrom<Vec<Vec<f64>>> for TokenMatrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("token rows have differing lengths".into());
        }
        Self::new(n, cols, rows.into_iter().flatten().collect())
    }
}

impl From<TokenMatrix> for Vec<Vec<f64>> {
    fn from(m: TokenMatrix) -> Self {
        m.data.chunks(m.cols.max(1)).map(<[f64]>::to_vec).take(m.rows).collect()
    }
}

/// Pre-extracted image and question token features for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalQuery {
    pub query_id: String,
    pub image_tokens: TokenMatrix,
    pub question_tokens: TokenMatrix,
    pub slice_label: Option<String>,
}

impl MultimodalQuery {
    /// `[mean(V); mean(Q)]`, the feature used by feature-level baselines.
    pub fn pooled_features(&self) -> Vec<f64> {
        let mut f = self.image_tokens.mean_pool();
        f.extend(self.question_tokens.mean_pool());
        f
    }
}

/// One query with its availability mask and observed per-model quality.
///
/// `omega` and `y` follow the pool's canonical order; `y[i]` is present
/// exactly where `omega[i]` is true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraceRecord", into = "TraceRecord")]
pub struct RoutingTrace {
    pub query: MultimodalQuery,
    pub omega: Vec<bool>,
    pub y: Vec<Option<f64>>,
}

impl RoutingTrace {
    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        self.omega.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }

    pub fn available_count(&self) -> usize {
        self.omega.iter().filter(|&&a| a).count()
    }

    /// Observed quality of model `i`; only meaningful where available.
    pub fn quality(&self, i: usize) -> Option<f64> {
        if self.omega.get(i).copied().unwrap_or(false) {
            self.y[i]
        } else {
            None
        }
    }

    /// The same trace under a narrower mask. `y` entries outside the new
    /// mask are dropped so responses stay consistent with it.
    pub fn restricted(&self, mask: &[bool]) -> RoutingTrace {
        let omega: Vec<bool> = self.omega.iter().zip(mask).map(|(a, b)| *a && *b).collect();
        let y = self
            .y
            .iter()
            .zip(&omega)
            .map(|(v, &a)| if a { *v } else { None })
            .collect();
        RoutingTrace {
            query: self.query.clone(),
            omega,
            y,
        }
    }
}

/// Wire form of a trace: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceRecord {
    query_id: String,
    #[serde(default)]
    slice: Option<String>,
    #[serde(rename = "V")]
    image: TokenMatrix,
    #[serde(rename = "Q")]
    question: TokenMatrix,
    omega: Vec<bool>,
    y: Vec<Option<f64>>,
}

impl TryFrom<TraceRecord> for RoutingTrace {
    type Error = String;

    fn try_from(r: TraceRecord) -> std::result::Result<Self, String> {
        if r.omega.len() != r.y.len() {
            return Err(format!(
                "trace {}: omega has {} entries but y has {}",
                r.query_id,
                r.omega.len(),
                r.y.len()
            ));
        }
        Ok(RoutingTrace {
            query: MultimodalQuery {
                query_id: r.query_id,
                image_tokens: r.image,
                question_tokens: r.question,
                slice_label: r.slice,
            },
            omega: r.omega,
            y: r.y,
        })
    }
}

impl From<RoutingTrace> for TraceRecord {
    fn from(t: RoutingTrace) -> Self {
        TraceRecord {
            query_id: t.query.query_id,
            slice: t.query.slice_label,
            image: t.query.image_tokens,
            question: t.query.question_tokens,
            omega: t.omega,
            y: t.y,
        }
    }
}

/// A candidate model as the router sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub model_id: String,
    /// Normalized cost in `[0, 1]`.
    pub cost: f64,
    /// Normalized latency in `[0, 1]`.
    pub latency: f64,
    /// Overall mean quality followed by one mean per declared slice.
    pub profile: Vec<f64>,
    /// Win rate against every other pool member, canonical order, self excluded.
    pub pairwise: Vec<f64>,
}

impl ModelDescriptor {
    /// `[p; c; l; b]`, the input of the capability-token projection.
    pub fn feature_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.profile.len() + 2 + self.pairwise.len());
        v.extend_from_slice(&self.profile);
        v.push(self.cost);
        v.push(self.latency);
        v.extend_from_slice(&self.pairwise);
        v
    }

    pub fn feature_dim(&self) -> usize {
        self.profile.len() + 2 + self.pairwise.len()
    }
}

/// Descriptor length for a pool of `pool_size` models with `slices` slices.
pub fn descriptor_dim(pool_size: usize, slices: usize) -> usize {
    1 + slices + 2 + pool_size.saturating_sub(1)
}

/// An ordered pool of candidate models; `canonical_order` is alphabetical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    pub models: Vec<ModelDescriptor>,
    pub canonical_order: Vec<String>,
}

impl ModelPool {
    pub fn new(models: Vec<ModelDescriptor>) -> Result<Self> {
        let canonical_order: Vec<String> = models.iter().map(|m| m.model_id.clone()).collect();
        let pool = Self {
            models,
            canonical_order,
        };
        pool.check()?;
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.cost).collect()
    }

    pub fn index_of(&self, model_id: &str) -> Option<usize> {
        self.canonical_order.iter().position(|m| m == model_id)
    }

    /// `K x descriptor_dim` row-major descriptor matrix.
    pub fn descriptor_matrix(&self) -> Vec<f64> {
        self.models.iter().flat_map(|m| m.feature_vector()).collect()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.models.first().map_or(0, ModelDescriptor::feature_dim)
    }

    pub fn check(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(DomainError::InvalidPool("pool is empty".into()));
        }
        let ids: Vec<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        if ids.iter().zip(&self.canonical_order).any(|(a, b)| a != b) || ids.len() != self.canonical_order.len() {
            return Err(DomainError::InvalidPool("models do not follow canonical_order".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DomainError::InvalidPool(
                "model ids must be unique and sorted alphabetically".into(),
            ));
        }
        let dim = self.descriptor_dim();
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for m in &self.models {
            if m.feature_dim() != dim {
                return Err(DomainError::InvalidPool(format!("{} has a different descriptor length", m.model_id)));
            }
            if !unit(m.cost) || !unit(m.latency) {
                return Err(DomainError::InvalidPool(format!("{} cost/latency outside [0, 1]", m.model_id)));
            }
            if !m.profile.iter().chain(&m.pairwise).all(|&v| unit(v)) {
                return Err(DomainError::InvalidPool(format!("{} profile outside [0, 1]", m.model_id)));
            }
            if m.pairwise.len() + 1 != self.models.len() {
                return Err(DomainError::InvalidPool(format!(
                    "{} pairwise stats must have K-1 entries",
                    m.model_id
                )));
            }
        }
        Ok(())
    }

    /// Builds descriptors from raw pool metadata and a calibration split.
    pub fn from_calibration(file: &PoolFile, calibration: &[RoutingTrace], slices: &[String]) -> Result<Self> {
        let ids = file.checked_order()?;
        let costs = normalize_pool_costs(&file.models.iter().map(|m| m.raw_cost).collect::<Vec<_>>())?;
        let latencies = min_max(&file.models.iter().map(|m| m.raw_latency).collect::<Vec<_>>())?;
        let mut models = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let (profile, pairwise) = build_capability_profile(calibration, &ids, id, slices)?;
            models.push(ModelDescriptor {
                model_id: id.clone(),
                cost: costs[i],
                latency: latencies[i],
                profile,
                pairwise,
            });
        }
        Self::new(models)
    }

    /// Same pool with one model's profile statistics replaced.
    pub fn with_profile(&self, index: usize, profile: Vec<f64>, pairwise: Vec<f64>) -> Self {
        let mut pool = self.clone();
        pool.models[index].profile = profile;
        pool.models[index].pairwise = pairwise;
        pool
    }
}

/// Raw pool metadata as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFile {
    pub models: Vec<PoolEntry>,
    pub canonical_order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub raw_cost: f64,
    pub raw_latency: f64,
}

impl PoolFile {
    /// Model ids in canonical order, after checking that `models` follows
    /// `canonical_order` and that the order is alphabetical.
    pub fn checked_order(&self) -> Result<Vec<String>> {
        let ids: Vec<String> = self.models.iter().map(|m| m.id.clone()).collect();
        if ids != self.canonical_order {
            return Err(DomainError::InvalidPool("models do not follow canonical_order".into()));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DomainError::InvalidPool(
                "canonical_order must be unique and alphabetical".into(),
            ));
        }
        if ids.is_empty() {
            return Err(DomainError::InvalidPool("pool is empty".into()));
        }
        Ok(ids)
    }
}

/// Trade-off between quality and cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub lambda: f64,
}

impl UtilitySpec {
    pub fn new(lambda: f64) -> Option<Self> {
        (lambda >= 0.0 && lambda.is_finite()).then_some(Self { lambda })
    }
}

/// `y - lambda * c`.
pub fn compute_utility(y: f64, c: f64, spec: UtilitySpec) -> f64 {
    y - spec.lambda * c
}

/// Min-max normalization of raw costs; a constant pool maps to zeros.
pub fn normalize_pool_costs(raw_costs: &[f64]) -> Result<Vec<f64>> {
    if let Some((index, &value)) = raw_costs.iter().enumerate().find(|(_, c)| !(**c >= 0.0)) {
        return Err(DomainError::NegativeCost { index, value });
    }
    if !raw_costs.iter().any(|&c| c > 0.0) {
        return Err(DomainError::NoPositiveCost);
    }
    min_max(raw_costs)
}

fn min_max(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DomainError::InvalidPool("raw metadata must be finite and non-negative".into()));
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(raw.iter().map(|v| (v - lo) / (hi - lo)).collect())
}
