use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::{ModelPool, RoutingTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MaskLength,
    NoAvailableModel,
    OutcomeMaskMismatch,
    OutcomeRange,
    EmptyTokens,
    NonFiniteFeature,
    FeatureDim,
    DuplicateQuery,
    SplitLeak,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub split: String,
    pub query_id: String,
    pub detail: String,
}

/// Counts of each violation kind with the first occurrence of each.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub traces: usize,
    pub per_split: BTreeMap<String, usize>,
    pub counts: BTreeMap<ViolationKind, usize>,
    pub first: BTreeMap<ViolationKind, Violation>,
}

impl ValidationReport {
    pub fn total_violations(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_clean(&self) -> bool {
        self.total_violations() == 0
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    fn flag(&mut self, kind: ViolationKind, split: &str, query_id: &str, detail: String) {
        *self.counts.entry(kind).or_default() += 1;
        self.first.entry(kind).or_insert_with(|| Violation {
            split: split.to_string(),
            query_id: query_id.to_string(),
            detail,
        });
    }
}

/// Checks every trace invariant, feature-dimension consistency and
/// query-id disjointness across the named splits. Never fails; problems
/// are reported.
pub fn validate_dataset(splits: &[(&str, &[RoutingTrace])], pool: &ModelPool) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = pool.len();
    let mut dims: Option<(usize, usize)> = None;
    let mut seen: HashMap<&str, &str> = HashMap::new();

    for (split, traces) in splits {
        report.per_split.insert(split.to_string(), traces.len());
        report.traces += traces.len();
        let mut local: HashMap<&str, ()> = HashMap::new();
        for t in traces.iter() {
            let q = &t.query;
            let id = q.query_id.as_str();
            if t.omega.len() != k || t.y.len() != k {
                report.flag(
                    ViolationKind::MaskLength,
                    split,
                    id,
                    format!("omega/y lengths {}/{} for pool of {k}", t.omega.len(), t.y.len()),
                );
            }
            if !t.omega.iter().any(|&a| a) {
                report.flag(ViolationKind::NoAvailableModel, split, id, "empty availability".into());
            }
            for (i, (a, y)) in t.omega.iter().zip(&t.y).enumerate() {
                match (a, y) {
                    (true, None) | (false, Some(_)) => report.flag(
                        ViolationKind::OutcomeMaskMismatch,
                        split,
                        id,
                        format!("model {i}: available={a} but outcome present={}", y.is_some()),
                    ),
                    (true, Some(v)) if !(0.0..=1.0).contains(v) => {
                        report.flag(ViolationKind::OutcomeRange, split, id, format!("model {i}: y={v}"))
                    }
                    _ => {}
                }
            }
            if q.image_tokens.rows() == 0 || q.question_tokens.rows() == 0 {
                report.flag(ViolationKind::EmptyTokens, split, id, "N and L must be at least 1".into());
            }
            if !q.image_tokens.data().iter().chain(q.question_tokens.data()).all(|v| v.is_finite()) {
                report.flag(ViolationKind::NonFiniteFeature, split, id, "token features".into());
            }
            let d = (q.image_tokens.cols(), q.question_tokens.cols());
            match dims {
                None => dims = Some(d),
                Some(expected) if expected != d => report.flag(
                    ViolationKind::FeatureDim,
                    split,
                    id,
                    format!("token dims {d:?}, expected {expected:?}"),
                ),
                _ => {}
            }
            if local.insert(id, ()).is_some() {
                report.flag(ViolationKind::DuplicateQuery, split, id, "repeated within split".into());
            }
            match seen.get(id) {
                Some(other) if other != split => {
                    report.flag(ViolationKind::SplitLeak, split, id, format!("also in split {other}"))
                }
                None => {
                    seen.insert(id, split);
                }
                _ => {}
            }
        }
    }
    report
}
