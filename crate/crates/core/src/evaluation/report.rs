use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EvalError, FrontierPoint, PolicyInput, RouterPolicy};
use crate::domain::RoutingTrace;
use crate::network::CandidateSet;

/// One line of an evaluation report. Metrics a row does not measure are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalRow {
    pub experiment: String,
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub lambda: f64,
    pub quality: Option<f64>,
    pub utility: Option<f64>,
    pub regret: Option<f64>,
    pub cost: Option<f64>,
    pub nauc: Option<f64>,
    pub mse: Option<f64>,
    pub ndcg: Option<f64>,
    pub spearman: Option<f64>,
    pub top3_recall: Option<f64>,
    pub latency_ms: Option<f64>,
    pub n: Option<usize>,
    pub skipped: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub policy: String,
    pub seed: u64,
    pub lambda: f64,
    pub cost: f64,
    pub quality: f64,
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<(), EvalError> {
    write_rows(rows, path)
}

pub fn write_frontier_csv(rows: &[FrontierRow], path: &Path) -> Result<(), EvalError> {
    write_rows(rows, path)
}

/// Quality-versus-cost plot with one polyline per named curve.
pub fn write_frontier_svg(curves: &[(String, Vec<FrontierPoint>)], path: &Path) -> Result<(), EvalError> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let pts = curves.iter().flat_map(|(_, c)| c.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.cost);
        x1 = x1.max(p.cost);
        y0 = y0.min(p.quality);
        y1 = y1.max(p.quality);
    }
    if !x0.is_finite() {
        return Err(EvalError::Invalid("no frontier points to plot".into()));
    }
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let (sx, sy) = (span(x0, x1), span(y0, y1));
    let px = |c: f64| M + (c - x0) / sx * (W - 2.0 * M);
    let py = |q: f64| H - M - (q - y0) / sy * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">cost</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">quality</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}">{x0:.3}</text><text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, H - M + 16.0, W - M, H - M + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text><text x="{}" y="{M}" text-anchor="end">{y1:.3}</text>"#, M - 4.0, H - M, M - 4.0);
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut sorted = curve.clone();
        sorted.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        let line: Vec<String> = sorted.iter().map(|p| format!("{:.2},{:.2}", px(p.cost), py(p.quality))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - M - 120.0, M + 16.0 * i as f64);
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub calls: usize,
}

/// Wall-clock time of single routing decisions, after one warm-up pass.
pub fn latency_probe(
    policy: &dyn RouterPolicy,
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    lambda: f64,
    repeats: usize,
) -> Result<LatencyStats, EvalError> {
    if repeats == 0 {
        return Err(EvalError::Invalid("latency probe needs at least one repeat".into()));
    }
    if policy.reads_labels() {
        return Err(EvalError::Invalid("latency probe is for deployable policies".into()));
    }
    let usable: Vec<&RoutingTrace> = traces.iter().filter(|t| t.available_count() > 0).collect();
    if usable.is_empty() {
        return Err(EvalError::Invalid("latency probe needs traces with available models".into()));
    }
    let call = |t: &RoutingTrace| {
        let input = PolicyInput {
            query: &t.query,
            candidates,
            omega: &t.omega,
            lambda,
        };
        policy.decide(&input, None)
    };
    call(usable[0])?;
    let mut times = Vec::with_capacity(repeats * usable.len());
    for _ in 0..repeats {
        for t in &usable {
            let start = Instant::now();
            std::hint::black_box(call(t)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(f64::total_cmp);
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let idx = ((0.95 * times.len() as f64).ceil() as usize).clamp(1, times.len()) - 1;
    Ok(LatencyStats {
        mean_ms: mean,
        p95_ms: times[idx],
        calls: times.len(),
    })
}
