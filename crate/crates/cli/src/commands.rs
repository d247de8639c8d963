use std::collections::BTreeMap;
use std::path::Path;

use latent_router::domain::{declared_slices, read_pool_file, read_traces_jsonl, ModelPool, RoutingTrace};
use latent_router::evaluation::{
    cold_start_eval, common_interval, cost_quality_frontier, evaluate_policy, latency_probe, nauc,
    pool_change_eval, ranking_metrics, train_additive, train_direct_classifier, write_eval_csv,
    write_frontier_csv, write_frontier_svg, AdditivePolicy, CheapestPolicy, DirectClassifierPolicy, EvalRow,
    FrontierPoint, FrontierRow, KnnPolicy, LatentPolicy, OraclePolicy, RandomPolicy, RouterPolicy, Scenario,
    StrongestPolicy,
};
use latent_router::network::{CandidateSet, Checkpoint, RouterConfig, RouterParams};
use latent_router::synthetic::generate_dataset;
use latent_router::training::{grad_check_model, train};

use crate::config::{RunConfig, SeedRun};
use crate::error::CliError;

/// Largest relative error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Result files the `report` command aggregates, written at the top of the
/// output directory.
pub const REPORT_INPUTS: [&str; 6] = [
    "eval.csv",
    "frontier_summary.csv",
    "pool_robustness.csv",
    "cold_start.csv",
    "ablate.csv",
    "latency.csv",
];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("cannot write {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes the resolved config at the top of the output directory.
fn write_root_config(cfg: &RunConfig) -> Result<(), CliError> {
    write_text(&cfg.out.join("config.json"), &cfg.to_json())
}

fn write_seed_config(run: &SeedRun) -> Result<(), CliError> {
    write_text(&run.dir.join("config.json"), &run.config.to_json())?;
    write_text(&run.dir.join("seed.txt"), &format!("{}\n", run.seed))
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {} (run the producing command first)", path.display())))
    }
}

/// A generated dataset read back from disk, with descriptors rebuilt from
/// its training split.
pub struct LoadedData {
    pub pool: ModelPool,
    pub candidates: CandidateSet,
    pub slices: Vec<String>,
    pub train: Vec<RoutingTrace>,
    pub val: Vec<RoutingTrace>,
    pub test: Vec<RoutingTrace>,
}

impl LoadedData {
    pub fn router_config(&self, cfg: &RunConfig) -> RouterConfig {
        let q = &self.train[0].query;
        cfg.router.router_config(
            q.image_tokens.cols(),
            q.question_tokens.cols(),
            self.pool.descriptor_dim(),
            self.pool.len(),
        )
    }
}

pub fn load_data(dir: &Path) -> Result<LoadedData, CliError> {
    let split = |name: &str| -> Result<Vec<RoutingTrace>, CliError> {
        let path = dir.join(format!("{name}.jsonl"));
        require(&path, "dataset split")?;
        Ok(read_traces_jsonl(&path)?)
    };
    let (train, val, test) = (split("train")?, split("val")?, split("test")?);
    let pool_path = dir.join("pool.json");
    require(&pool_path, "pool file")?;
    let pool_file = read_pool_file(&pool_path)?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(CliError::Validation(format!("dataset {} has an empty split", dir.display())));
    }
    let slices = declared_slices(&train);
    let pool = ModelPool::from_calibration(&pool_file, &train, &slices)?;
    let candidates = CandidateSet::from_pool(&pool);
    Ok(LoadedData {
        pool,
        candidates,
        slices,
        train,
        val,
        test,
    })
}

fn load_router(run: &SeedRun, data: &LoadedData) -> Result<LatentPolicy, CliError> {
    let path = run.checkpoint();
    require(&path, "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    let expected = data.router_config(&run.config);
    if (ck.config.image_dim, ck.config.question_dim, ck.config.descriptor_dim, ck.config.slot_count)
        != (expected.image_dim, expected.question_dim, expected.descriptor_dim, expected.slot_count)
    {
        return Err(CliError::Validation(format!(
            "checkpoint {} does not match the dataset widths",
            path.display()
        )));
    }
    Ok(LatentPolicy::new("latent_router", ck.params, ck.config))
}

/// The baseline lineup fitted for one seed.
struct Baselines {
    strongest: StrongestPolicy,
    random: RandomPolicy,
    knn: KnnPolicy,
    additive: AdditivePolicy,
    direct: DirectClassifierPolicy,
}

impl Baselines {
    fn fit(run: &SeedRun, data: &LoadedData) -> Result<Self, CliError> {
        let k = data.pool.len();
        let aux = run.aux();
        Ok(Self {
            strongest: StrongestPolicy::fit(&data.val, k),
            random: RandomPolicy { seed: run.seed },
            knn: KnnPolicy::fit(&data.train, k, run.config.baselines.knn_k)?,
            additive: train_additive(&data.train, &data.val, &data.candidates, &aux)?,
            direct: train_direct_classifier(&data.train, &data.val, &data.candidates, &aux)?,
        })
    }

    fn lineup<'a>(&'a self, router: &'a LatentPolicy) -> Vec<&'a dyn RouterPolicy> {
        vec![
            &OraclePolicy,
            router,
            &self.strongest,
            &CheapestPolicy,
            &self.random,
            &self.knn,
            &self.additive,
            &self.direct,
        ]
    }
}

fn eval_row(experiment: &str, scenario: &str, seed: u64, lambda: f64) -> EvalRow {
    EvalRow {
        experiment: experiment.into(),
        scenario: scenario.into(),
        seed,
        lambda,
        ..EvalRow::default()
    }
}

/// Evaluates `policy` on `traces`, adding ranking metrics when it scores
/// every available model.
fn measured_row(
    experiment: &str,
    scenario: &str,
    seed: u64,
    policy: &dyn RouterPolicy,
    traces: &[RoutingTrace],
    candidates: &CandidateSet,
    lambda: f64,
) -> Result<EvalRow, CliError> {
    let e = evaluate_policy(policy, traces, candidates, lambda)?;
    let mut row = eval_row(experiment, scenario, seed, lambda);
    row.policy = e.policy.clone();
    row.quality = Some(e.quality);
    row.utility = Some(e.utility);
    row.regret = Some(e.regret);
    row.cost = Some(e.cost);
    row.n = Some(e.n);
    row.skipped = Some(e.skipped);
    if !policy.reads_labels() {
        if let Ok(m) = ranking_metrics(&e, traces) {
            row.mse = Some(m.mse);
            row.ndcg = Some(m.ndcg);
            row.spearman = Some(m.spearman).filter(|v| v.is_finite());
            row.top3_recall = Some(m.top3_recall);
        }
    }
    Ok(row)
}

/// Runs `per_seed` for every seed, writing each seed's rows into its own
/// directory and all rows into `out/<name>`.
fn for_each_seed(
    cfg: &RunConfig,
    name: &str,
    mut per_seed: impl FnMut(&SeedRun) -> Result<Vec<EvalRow>, CliError>,
) -> Result<Vec<EvalRow>, CliError> {
    write_root_config(cfg)?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        create_dir(&run.dir)?;
        write_seed_config(&run)?;
        let rows = per_seed(&run)?;
        write_eval_csv(&rows, &run.dir.join(name))?;
        all.extend(rows);
    }
    write_eval_csv(&all, &cfg.out.join(name))?;
    Ok(all)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    write_root_config(cfg)?;
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let ds = generate_dataset(&run.generator())?;
        ds.write_dir(&run.data_dir())?;
        write_seed_config(&run)?;
        println!(
            "seed {seed}: {} train / {} val / {} test traces, {} specialist reversals -> {}",
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            ds.reversal.reversals,
            run.data_dir().display()
        );
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    write_root_config(cfg)?;
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let data = load_data(&run.data_dir())?;
        let rc = data.router_config(cfg);
        let tc = run.train();
        let (params, report) = train(&data.train, &data.val, &data.pool, &rc, &tc, &cfg.loss)?;
        write_seed_config(&run)?;
        report.write_csv(&run.dir.join("train_report.csv"))?;
        let mut ck = Checkpoint::new(rc, params, tc.seed)?;
        ck.training_meta = serde_json::json!({
            "best_epoch": report.best_epoch,
            "best_val_metric": report.best_metric(),
            "epochs": tc.epochs,
        });
        ck.save(&run.checkpoint())?;
        println!(
            "seed {seed}: best epoch {} with validation metric {:.4} -> {}",
            report.best_epoch,
            report.best_metric(),
            run.checkpoint().display()
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, latency: bool) -> Result<(), CliError> {
    let lambda = cfg.lambda;
    let mut latency_rows = Vec::new();
    let rows = for_each_seed(cfg, "eval.csv", |run| {
        let data = load_data(&run.data_dir())?;
        let router = load_router(run, &data)?;
        let base = Baselines::fit(run, &data)?;
        let mut rows = Vec::new();
        for p in base.lineup(&router) {
            rows.push(measured_row("eval", "full", run.seed, p, &data.test, &data.candidates, lambda)?);
            if latency && !p.reads_labels() {
                let stats = latency_probe(p, &data.test, &data.candidates, lambda, 1)?;
                let mut row = eval_row("latency", "full", run.seed, lambda);
                row.policy = p.name().into();
                row.latency_ms = Some(stats.mean_ms);
                row.n = Some(stats.calls);
                latency_rows.push(row);
            }
        }
        Ok(rows)
    })?;
    if latency {
        write_eval_csv(&latency_rows, &cfg.out.join("latency.csv"))?;
    }
    print_rows(&rows);
    Ok(())
}

pub fn frontier(cfg: &RunConfig) -> Result<(), CliError> {
    write_root_config(cfg)?;
    let mut all_points = Vec::new();
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let run = cfg.for_seed(seed);
        let data = load_data(&run.data_dir())?;
        let router = load_router(&run, &data)?;
        let base = Baselines::fit(&run, &data)?;
        create_dir(&run.dir)?;
        write_seed_config(&run)?;
        let mut curves: Vec<(String, Vec<FrontierPoint>)> = Vec::new();
        for p in base.lineup(&router) {
            curves.push((
                p.name().to_string(),
                cost_quality_frontier(p, &data.test, &data.candidates, &cfg.lambda_grid)?,
            ));
        }
        let refs: Vec<&[FrontierPoint]> = curves.iter().map(|(_, c)| c.as_slice()).collect();
        let (lo, hi) = common_interval(&refs)?;
        let oracle = &curves[0].1;
        let mut points = Vec::new();
        let mut rows = Vec::new();
        for (name, curve) in &curves {
            let mut row = eval_row("frontier", "full", seed, 0.0);
            row.policy = name.clone();
            row.nauc = Some(nauc(curve, oracle, lo, hi)?);
            rows.push(row);
            points.extend(curve.iter().map(|f| FrontierRow {
                policy: name.clone(),
                seed,
                lambda: f.lambda,
                cost: f.cost,
                quality: f.quality,
            }));
        }
        write_frontier_csv(&points, &run.dir.join("frontier.csv"))?;
        write_frontier_svg(&curves, &run.dir.join("frontier.svg"))?;
        write_eval_csv(&rows, &run.dir.join("frontier_summary.csv"))?;
        all_points.extend(points);
        summary.extend(rows);
    }
    write_frontier_csv(&all_points, &cfg.out.join("frontier.csv"))?;
    write_eval_csv(&summary, &cfg.out.join("frontier_summary.csv"))?;
    print_rows(&summary);
    Ok(())
}

pub fn pool_robustness(cfg: &RunConfig, only: Option<Scenario>) -> Result<(), CliError> {
    let scenarios: Vec<Scenario> = match only {
        Some(s) => vec![s],
        None => Scenario::ALL.to_vec(),
    };
    let rows = for_each_seed(cfg, "pool_robustness.csv", |run| {
        let data = load_data(&run.data_dir())?;
        let router = load_router(run, &data)?;
        let base = Baselines::fit(run, &data)?;
        let lineup = base.lineup(&router);
        let reference = base.strongest.mean_quality().to_vec();
        let mut rows = Vec::new();
        for &s in &scenarios {
            for r in pool_change_eval(&lineup, &data.test, &data.candidates, s, &reference, cfg.lambda, run.seed)? {
                let mut row = eval_row("pool_robustness", s.as_str(), run.seed, cfg.lambda);
                row.policy = r.policy;
                row.quality = Some(r.quality);
                row.regret = Some(r.regret);
                row.cost = Some(r.cost);
                row.n = Some(r.n);
                row.skipped = Some(r.skipped);
                rows.push(row);
            }
        }
        Ok(rows)
    })?;
    print_rows(&rows);
    Ok(())
}

pub fn cold_start(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = for_each_seed(cfg, "cold_start.csv", |run| {
        let data = load_data(&run.data_dir())?;
        let rc = data.router_config(cfg);
        let tc = run.train();
        let points = cold_start_eval(
            &data.train,
            &data.val,
            &data.test,
            &data.pool,
            &data.slices,
            cfg.cold_start.held_out,
            &cfg.cold_start.sizes,
            &rc,
            &tc,
            &cfg.loss,
        )?;
        Ok(points
            .into_iter()
            .map(|p| {
                let mut row = eval_row("cold_start", &format!("calibration_{}", p.size), run.seed, tc.lambda);
                row.policy = "latent_router".into();
                row.quality = Some(p.quality);
                row.regret = Some(p.regret);
                row.n = Some(p.examples);
                row
            })
            .collect())
    })?;
    print_rows(&rows);
    Ok(())
}

/// Architecture changes of the ablation grid and the depth and capsule sweeps.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<(&'static str, String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    let mut grid = vec![
        ("ablation", "full".to_string(), cfg.clone()),
        ("ablation", "no_capsules".into(), with(&|c| c.router.variant.capsules = false)),
        ("ablation", "no_model_tokens".into(), with(&|c| c.router.variant.model_tokens = false)),
        ("ablation", "no_communication".into(), with(&|c| c.router.comm_layers = 0)),
        ("ablation", "no_distributional".into(), with(&|c| c.router.variant.distributional = false)),
        ("ablation", "no_correction".into(), with(&|c| c.router.correction_bound = 0.0)),
    ];
    for h in 0..=4 {
        grid.push(("depth_sweep", format!("H={h}"), with(&|c| c.router.comm_layers = h)));
    }
    for cap in [1, 4, 7, 12] {
        grid.push(("capsule_sweep", format!("C={cap}"), with(&|c| c.router.capsule_count = cap)));
    }
    grid
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let grid = ablation_grid(cfg);
    let rows = for_each_seed(cfg, "ablate.csv", |run| {
        let data = load_data(&run.data_dir())?;
        let tc = run.train();
        let mut rows = Vec::new();
        for (experiment, name, variant) in &grid {
            let rc = data.router_config(variant);
            let (params, _) = train(&data.train, &data.val, &data.pool, &rc, &tc, &variant.loss)?;
            let router = LatentPolicy::new("latent_router", params, rc);
            rows.push(measured_row(experiment, name, run.seed, &router, &data.test, &data.candidates, cfg.lambda)?);
        }
        Ok(rows)
    })?;
    print_rows(&rows);
    Ok(())
}

/// Finite-difference check of every parameter block on a few generated
/// training traces. Fails with a numeric error above [`GRAD_TOLERANCE`].
pub fn grad_check(cfg: &RunConfig) -> Result<(), CliError> {
    write_root_config(cfg)?;
    let run = cfg.for_seed(cfg.seeds[0]);
    let ds = generate_dataset(&run.generator())?;
    let d = ds.config.token_dim();
    let rc = cfg
        .router
        .router_config(d, d, ds.pool.descriptor_dim(), ds.pool.len());
    let params = RouterParams::init(&rc, run.train().seed)?;
    let cands = CandidateSet::from_pool(&ds.pool);
    let traces = &ds.train[..ds.train.len().min(4)];
    let report = grad_check_model(&params, &rc, &cands, traces, &cfg.loss, cfg.train.lambda, 1e-5)?;
    let mut csv = String::from("block,max_rel_error\n");
    let mut worst = 0.0f64;
    for (name, err) in &report {
        csv.push_str(&format!("{name},{err:e}\n"));
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(*err) };
    }
    write_text(&cfg.out.join("grad_check.csv"), &csv)?;
    println!("{} parameter blocks, max relative error {worst:.3e}", report.len());
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        let bad: Vec<&str> = report
            .iter()
            .filter(|(_, e)| !(*e < GRAD_TOLERANCE))
            .map(|(n, _)| n.as_str())
            .collect();
        Err(CliError::Numeric(format!(
            "gradient check failed above {GRAD_TOLERANCE:e} in {}",
            bad.join(", ")
        )))
    }
}

const METRICS: [&str; 11] = [
    "quality", "utility", "regret", "cost", "nauc", "mse", "ndcg", "spearman", "top3_recall", "latency_ms", "n",
];

fn metric_values(r: &EvalRow) -> [Option<f64>; 11] {
    [
        r.quality,
        r.utility,
        r.regret,
        r.cost,
        r.nauc,
        r.mse,
        r.ndcg,
        r.spearman,
        r.top3_recall,
        r.latency_ms,
        r.n.map(|n| n as f64),
    ]
}

/// Mean and sample standard deviation (absent below two values).
fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.len() > 1).then(|| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt());
    (m, s)
}

fn fmt_num(v: f64) -> String {
    format!("{v:.4}")
}

/// Aggregates every result CSV in the output directory into
/// `summary.csv`: one line per experiment, scenario, policy and lambda
/// with means and standard deviations over seeds.
pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rows: Vec<EvalRow> = Vec::new();
    for name in REPORT_INPUTS {
        let path = cfg.out.join(name);
        if !path.exists() {
            continue;
        }
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        for r in rdr.deserialize() {
            rows.push(r.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?);
        }
    }
    if rows.is_empty() {
        return Err(CliError::Missing(format!(
            "no result CSVs ({}) in {}",
            REPORT_INPUTS.join(", "),
            cfg.out.display()
        )));
    }
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, String), Vec<&EvalRow>> = BTreeMap::new();
    for r in &rows {
        let key = (r.experiment.clone(), r.scenario.clone(), r.policy.clone(), r.lambda.to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["experiment".to_string(), "scenario".into(), "policy".into(), "lambda".into(), "seeds".into()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header).expect("in-memory write");
    let mut table = Vec::new();
    for key in &order {
        let group = &groups[key];
        let mut rec = vec![key.0.clone(), key.1.clone(), key.2.clone(), key.3.clone(), group.len().to_string()];
        let mut shown = Vec::new();
        for (j, m) in METRICS.iter().enumerate() {
            let v: Vec<f64> = group.iter().filter_map(|r| metric_values(r)[j]).collect();
            if v.is_empty() {
                rec.extend([String::new(), String::new()]);
                continue;
            }
            let (mean, std) = mean_std(&v);
            rec.push(mean.to_string());
            rec.push(std.map(|s| s.to_string()).unwrap_or_default());
            if *m != "n" {
                shown.push(match std {
                    Some(s) => format!("{m} {} ± {}", fmt_num(mean), fmt_num(s)),
                    None => format!("{m} {}", fmt_num(mean)),
                });
            }
        }
        w.write_record(&rec).expect("in-memory write");
        table.push(format!("{:<16} {:<22} {:<18} {}", key.0, key.1, key.2, shown.join(", ")));
    }
    let text = String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv");
    write_text(&cfg.out.join("summary.csv"), &text)?;
    write_root_config(cfg)?;
    for line in table {
        println!("{line}");
    }
    Ok(())
}

fn print_rows(rows: &[EvalRow]) {
    for r in rows {
        let mut parts = Vec::new();
        for (m, v) in METRICS.iter().zip(metric_values(r)) {
            if let Some(v) = v {
                if *m != "n" {
                    parts.push(format!("{m} {}", fmt_num(v)));
                }
            }
        }
        println!("seed {} {:<16} {:<22} {:<18} {}", r.seed, r.experiment, r.scenario, r.policy, parts.join(", "));
    }
}
