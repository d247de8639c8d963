use super::{DomainError, Result, RoutingTrace};

/// Sorted, de-duplicated slice labels present in `traces`.
pub fn declared_slices(traces: &[RoutingTrace]) -> Vec<String> {
    let mut s: Vec<String> = traces.iter().filter_map(|t| t.query.slice_label.clone()).collect();
    s.sort();
    s.dedup();
    s
}

/// Calibration profile `p` and pairwise win rates `b` of `target`.
///
/// `p = [overall mean, mean per slice in `slices` order]`; a slice without
/// coverage takes the overall mean. `b[j]` is the share of joint traces in
/// which `target` beats model `j` (ties count one half), over every other
/// model in `model_ids` order; `0.5` without joint coverage.
pub fn build_capability_profile(
    calibration: &[RoutingTrace],
    model_ids: &[String],
    target: &str,
    slices: &[String],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = model_ids
        .iter()
        .position(|m| m == target)
        .ok_or_else(|| DomainError::UnknownModel(target.to_string()))?;
    let k = model_ids.len();

    let mut total = 0.0;
    let mut count = 0usize;
    let mut slice_sum = vec![0.0; slices.len()];
    let mut slice_count = vec![0usize; slices.len()];
    let mut wins = vec![0.0; k];
    let mut joint = vec![0usize; k];

    for trace in calibration {
        let Some(yt) = trace.quality(t) else {
            continue;
        };
        total += yt;
        count += 1;
        if let Some(label) = &trace.query.slice_label {
            if let Some(s) = slices.iter().position(|x| x == label) {
                slice_sum[s] += yt;
                slice_count[s] += 1;
            }
        }
        for j in 0..k {
            if j == t {
                continue;
            }
            if let Some(yj) = trace.quality(j) {
                joint[j] += 1;
                if yt > yj {
                    wins[j] += 1.0;
                } else if yt == yj {
                    wins[j] += 0.5;
                }
            }
        }
    }
    if count == 0 {
        return Err(DomainError::InsufficientCalibration(target.to_string()));
    }
    let overall = total / count as f64;
    let mut profile = Vec::with_capacity(1 + slices.len());
    profile.push(overall);
    for (s, c) in slice_sum.iter().zip(&slice_count) {
        profile.push(if *c == 0 { overall } else { s / *c as f64 });
    }
    let pairwise = (0..k)
        .filter(|&j| j != t)
        .map(|j| if joint[j] == 0 { 0.5 } else { wins[j] / joint[j] as f64 })
        .collect();
    Ok((profile, pairwise))
}

/// Profile for a model with no calibration examples: every profile entry
/// equals `prior_mean` and every win rate is `0.5`.
pub fn neutral_profile(prior_mean: f64, slice_count: usize, pool_size: usize) -> (Vec<f64>, Vec<f64>) {
    (
        vec![prior_mean; 1 + slice_count],
        vec![0.5; pool_size.saturating_sub(1)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{MultimodalQuery, TokenMatrix};

    fn trace(id: &str, slice: &str, y: &[Option<f64>]) -> RoutingTrace {
        RoutingTrace {
            query: MultimodalQuery {
                query_id: id.into(),
                image_tokens: TokenMatrix::new(1, 1, vec![0.0]).unwrap(),
                question_tokens: TokenMatrix::new(1, 1, vec![0.0]).unwrap(),
                slice_label: Some(slice.into()),
            },
            omega: y.iter().map(Option::is_some).collect(),
            y: y.to_vec(),
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    #[test]
    fn win_rate_and_mean() {
        let cal = vec![
            trace("a", "s0", &[Some(1.0), Some(0.0)]),
            trace("b", "s0", &[Some(0.0), Some(0.5)]),
            trace("c", "s1", &[Some(1.0), Some(0.2)]),
            trace("d", "s1", &[Some(1.0), Some(0.9)]),
        ];
        let slices = vec!["s0".to_string(), "s1".to_string(), "s2".to_string()];
        let (p, b) = build_capability_profile(&cal, &ids(2), "m0", &slices).unwrap();
        assert_eq!(p[0], 0.75);
        assert_eq!(b, vec![0.75]);
        assert_eq!(p[1], 0.5);
        assert_eq!(p[2], 1.0);
        // uncovered slice falls back to the overall mean
        assert_eq!(p[3], 0.75);
    }

    #[test]
    fn no_joint_coverage_is_neutral() {
        let cal = vec![
            trace("a", "s0", &[Some(1.0), None, Some(0.3)]),
            trace("b", "s0", &[None, Some(0.5), Some(0.3)]),
        ];
        let (_, b) = build_capability_profile(&cal, &ids(3), "m0", &[]).unwrap();
        assert_eq!(b, vec![0.5, 1.0]);
    }

    #[test]
    fn absent_target_is_an_error() {
        let cal = vec![trace("a", "s0", &[None, Some(0.5)])];
        assert!(matches!(
            build_capability_profile(&cal, &ids(2), "m0", &[]),
            Err(DomainError::InsufficientCalibration(_))
        ));
        assert!(matches!(
            build_capability_profile(&cal, &ids(2), "zz", &[]),
            Err(DomainError::UnknownModel(_))
        ));
    }

    #[test]
    fn order_of_calibration_traces_is_irrelevant() {
        let mut cal: Vec<RoutingTrace> = (0..40)
            .map(|i| {
                let a = ((i * 37) % 11) as f64 / 10.0;
                let b = ((i * 17) % 13) as f64 / 12.0;
                let c = if i % 3 == 0 { None } else { Some(((i * 7) % 5) as f64 / 4.0) };
                trace(&format!("q{i}"), if i % 2 == 0 { "s0" } else { "s1" }, &[Some(a), Some(b), c])
            })
            .collect();
        let slices = declared_slices(&cal);
        let before = build_capability_profile(&cal, &ids(3), "m2", &slices).unwrap();
        cal.reverse();
        cal.rotate_left(13);
        let after = build_capability_profile(&cal, &ids(3), "m2", &slices).unwrap();
        for (x, y) in before.0.iter().chain(&before.1).zip(after.0.iter().chain(&after.1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_profile_shape() {
        let (p, b) = neutral_profile(0.4, 3, 5);
        assert_eq!(p, vec![0.4; 4]);
        assert_eq!(b, vec![0.5; 4]);
    }
}
