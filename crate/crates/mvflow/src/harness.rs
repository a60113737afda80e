//! Experiment orchestration: dispatches configured suites, collects result
//! records, and writes the output layout
//! `<out>/resolved-config.json`, `<out>/records.csv`, `<out>/report.json`,
//! `<out>/checkpoints/*.jsonl`, `<out>/trajectory.csv`.
//!
//! Failed checks are data (records with `pass = false`), not aborts; only
//! configuration errors abort a run. Every number in the records traces back
//! to `(config hash, seed)`.

use crate::calculus::{
    chain_rule_residual, default_substeps, empirical_gradient_identity, fd_intrinsic_directional,
    ito_formula_residual, DeterministicPath, DirectionField,
};
use crate::chaos::{
    clark_ocone_kernel, kernel_grid, kv_kernel_order1, kv_kernel_order2, projection_kernel_order1,
    projection_kernel_order2, truncation_diagnostics, ChaosKernelEstimate, NestedBudget,
    NestedBudget2,
};
use crate::config::{BuiltExperiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::measure::{sample_iid, EmpiricalMeasure, SampleSpec};
use crate::noise::{grid_steps, simulate_noise};
use crate::rng::{derive_stream, derive_stream_indexed, CounterRng};
use crate::solver::{
    convergence_order, estimate_stability, picard_solve, solve_interacting_flow, sup_measure_gap,
    SolverConfig,
};
use crate::Manifold;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

/// One emitted measurement or check.
#[derive(Debug, Clone)]
pub struct ResultRecord {
    pub experiment: String,
    pub config_hash: String,
    pub test: String,
    pub params: String,
    pub value: f64,
    /// Standard error for estimates, tolerance for checks.
    pub stderr_or_tol: f64,
    /// `None` for plain measurements.
    pub pass: Option<bool>,
    pub wall_ms: u128,
}

pub struct RunSummary {
    pub records: Vec<ResultRecord>,
    pub failures: usize,
    pub report: serde_json::Value,
}

/// Set up the global worker pool from `MVFLOW_WORKERS`; call once, early.
/// Results are bitwise independent of the worker count either way.
pub fn init_workers() {
    if let Ok(v) = std::env::var("MVFLOW_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

struct Recorder {
    experiment: String,
    config_hash: String,
    records: Vec<ResultRecord>,
    started: Instant,
}

impl Recorder {
    fn new(cfg: &ExperimentConfig) -> Self {
        Recorder {
            experiment: cfg.name.clone(),
            config_hash: cfg.config_hash(),
            records: Vec::new(),
            started: Instant::now(),
        }
    }

    fn push(&mut self, test: &str, params: String, value: f64, tol: f64, pass: Option<bool>) {
        self.records.push(ResultRecord {
            experiment: self.experiment.clone(),
            config_hash: self.config_hash.clone(),
            test: test.to_string(),
            params,
            value,
            stderr_or_tol: tol,
            pass,
            wall_ms: self.started.elapsed().as_millis(),
        });
    }

    fn kernel(&mut self, test: &str, est: &ChaosKernelEstimate, extra: &str) {
        let taus = est.taus.iter().map(|t| format!("{t:.6}")).collect::<Vec<_>>().join("/");
        let params = format!(
            "method={};i={};tau={};outer={};inner={};eps={}{}",
            est.method.as_str(),
            est.noise_index,
            taus,
            est.outer_n,
            est.inner_n,
            est.eps,
            extra
        );
        self.push(test, params, est.value, est.stderr, None);
    }
}

/// Run every configured suite and write the output files.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    init_workers();
    let built = cfg.build()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::OutputUnwritable(format!("{}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("resolved-config.json"), cfg.to_resolved_json())
        .map_err(|e| Error::OutputUnwritable(e.to_string()))?;

    let mut rec = Recorder::new(cfg);
    let mut report = serde_json::Map::new();
    report.insert("experiment".into(), cfg.name.clone().into());
    report.insert("config_hash".into(), cfg.config_hash().into());
    report.insert("seed".into(), cfg.seed.into());

    for suite in &cfg.suites {
        match suite.as_str() {
            "simulate" => run_simulate(cfg, &built, out_dir, &mut rec)?,
            "check-calculus" => run_check_calculus(cfg, &built, out_dir, &mut rec)?,
            "kv-kernels" => run_kv_kernels(cfg, &built, out_dir, &mut rec, 1)?,
            "kv-kernels-2" => run_kv_kernels(cfg, &built, out_dir, &mut rec, 2)?,
            "kv-diagnostics" => run_kv_diagnostics(cfg, &built, &mut rec, &mut report)?,
            "stability" => run_stability(cfg, &built, &mut rec)?,
            "convergence" => run_convergence(cfg, &built, &mut rec)?,
            "picard" => run_picard(cfg, &built, &mut rec)?,
            other => return Err(Error::ConfigInvalid(format!("unknown suite `{other}`"))),
        }
    }

    let failures = rec.records.iter().filter(|r| r.pass == Some(false)).count();
    report.insert("records".into(), (rec.records.len() as u64).into());
    report.insert("failures".into(), (failures as u64).into());

    write_records_csv(&rec.records, &out_dir.join("records.csv"))?;
    let report = serde_json::Value::Object(report);
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::OutputUnwritable(e.to_string()))?;

    Ok(RunSummary { records: rec.records, failures, report })
}

fn write_records_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    w.write_record([
        "experiment",
        "config_hash",
        "test",
        "params",
        "value",
        "stderr_or_tol",
        "pass",
        "wall_ms",
    ])
    .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    for r in records {
        w.write_record([
            r.experiment.as_str(),
            r.config_hash.as_str(),
            r.test.as_str(),
            r.params.as_str(),
            &format!("{:.17e}", r.value),
            &format!("{:.17e}", r.stderr_or_tol),
            &r.pass.map(|p| p.to_string()).unwrap_or_default(),
            &r.wall_ms.to_string(),
        ])
        .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    Ok(())
}

/// Records file with the wall-time column stripped; rerunning a config must
/// reproduce this content bitwise (wall times are the one timestamp-like
/// column).
pub fn canonical_records(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let mut out = String::new();
    for line in text.lines() {
        match line.rsplit_once(',') {
            Some((head, _wall)) => {
                out.push_str(head);
                out.push('\n');
            }
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Full trajectory/checkpoint files are written for this many replicas;
/// terminal functional records cover every replica.
const FILE_REPLICA_CAP: usize = 8;

fn run_simulate(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    out_dir: &Path,
    rec: &mut Recorder,
) -> Result<()> {
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    let mut traj = csv::Writer::from_path(out_dir.join("trajectory.csv"))
        .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    let n_amb = built.manifold.ambient_dim();
    let mut header = vec!["replica".to_string(), "time".to_string(), "particle_id".to_string()];
    for k in 0..n_amb {
        header.push(format!("x{k}"));
    }
    traj.write_record(&header).map_err(|e| Error::OutputUnwritable(e.to_string()))?;

    let replicas = cfg.budgets.replicas;
    for r in 0..replicas {
        let stream = derive_stream_indexed(cfg.seed, &["simulate"], r as u64);
        let noise = simulate_noise(
            built.fields.n_noise(),
            cfg.solver.horizon,
            built.solver.dt,
            cfg.seed,
            stream,
        )?;
        match solve_interacting_flow(
            &built.initial,
            &built.fields,
            &noise,
            &built.tracked,
            &built.solver,
        ) {
            Ok(sol) => {
                if r < FILE_REPLICA_CAP {
                    // Checkpoints: one JSONL per replica, lines tagged by time.
                    let mut file =
                        std::fs::File::create(ckpt_dir.join(format!("replica_{r}.jsonl")))
                            .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
                    for (t, m) in sol.times.iter().zip(&sol.measures) {
                        for (p, w) in m.points().iter().zip(m.weights()) {
                            let coords: Vec<f64> = p.iter().copied().collect();
                            writeln!(
                                file,
                                "{}",
                                serde_json::json!({"t": t, "coords": coords, "weight": w})
                            )
                            .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
                        }
                    }
                    // Trajectories: carriers then tracked points.
                    for (ti, t) in sol.times.iter().enumerate() {
                        for (pid, _) in sol.measures[ti].points().iter().enumerate() {
                            let mut row = vec![r.to_string(), format!("{t:.9}"), format!("c{pid}")];
                            for c in sol.measures[ti].points()[pid].iter() {
                                row.push(format!("{c:.17e}"));
                            }
                            traj.write_record(&row)
                                .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
                        }
                        for (j, path) in sol.tracked.iter().enumerate() {
                            let mut row = vec![r.to_string(), format!("{t:.9}"), format!("t{j}")];
                            for c in path[ti].iter() {
                                row.push(format!("{c:.17e}"));
                            }
                            traj.write_record(&row)
                                .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
                        }
                    }
                }
                for (name, func) in &built.functionals {
                    rec.push(
                        "simulate-terminal",
                        format!("replica={r};functional={name}"),
                        func.value(sol.final_measure()),
                        0.0,
                        None,
                    );
                }
            }
            Err(Error::NonFinite(msg)) => {
                rec.push("simulate-diverged", format!("replica={r};{msg}"), f64::NAN, 0.0, None);
            }
            Err(e) => return Err(e),
        }
    }
    traj.flush().map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    Ok(())
}

fn resample_like(
    built: &BuiltExperiment,
    seed: u64,
    label: &str,
    idx: usize,
) -> Result<EmpiricalMeasure> {
    let n = built.initial.len();
    let stream = derive_stream_indexed(seed, &["resample", label], idx as u64);
    let mut rng = CounterRng::new(stream, 0);
    match built.manifold {
        Manifold::Euclidean { .. } => {
            sample_iid(built.manifold, &SampleSpec::Gaussian { sigma: 1.0 }, n, &mut rng)
        }
        _ => sample_iid(built.manifold, &SampleSpec::Uniform, n, &mut rng),
    }
}

fn probe_directions(
    built: &BuiltExperiment,
    mu: &EmpiricalMeasure,
) -> Vec<(String, DirectionField)> {
    let mut dirs = Vec::new();
    for (i, f) in built.fields.diffusions.iter().enumerate() {
        if !f.is_zero() {
            dirs.push((format!("V{}", i + 1), DirectionField::frozen(f.clone(), mu.clone())));
        }
    }
    match built.manifold {
        Manifold::Euclidean { dim } => {
            let v = crate::Vector::from_element(dim, 0.7);
            dirs.push((
                "translate".into(),
                DirectionField::from_fn(built.manifold, move |_| v.clone()),
            ));
        }
        Manifold::Sphere { .. } => {
            dirs.push(("rotate".into(), DirectionField::rotation(built.manifold, 2, 1.0)));
        }
        Manifold::FlatTorus { dim } => {
            let m = built.manifold;
            dirs.push((
                "advance".into(),
                DirectionField::from_fn(m, move |x: &crate::Vector| {
                    let mut out = crate::Vector::zeros(2 * dim);
                    for k in 0..dim {
                        out[2 * k] = -x[2 * k + 1];
                        out[2 * k + 1] = x[2 * k];
                    }
                    out
                }),
            ));
        }
    }
    dirs
}

fn run_check_calculus(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    _out_dir: &Path,
    rec: &mut Recorder,
) -> Result<()> {
    let eps_ladder = [1e-2, 1e-3, 1e-4];
    for (name, func) in &built.functionals {
        for rep in 0..5usize {
            let mu = if rep == 0 {
                built.initial.clone()
            } else {
                resample_like(built, cfg.seed, "calc", rep)?
            };
            for (dname, dir) in probe_directions(built, &mu) {
                let analytic = func.pairing(&mu, |x| dir.eval(x));
                let mut errs = Vec::new();
                for &eps in &eps_ladder {
                    let fd = fd_intrinsic_directional(func, &mu, &dir, eps, default_substeps(eps));
                    errs.push((fd - analytic).abs());
                }
                let scale = analytic.abs().max(0.1);
                let slope = if errs[2] > 0.0 && errs[0] > 0.0 {
                    (errs[0] / errs[2]).log10() / 2.0
                } else {
                    2.0 // errors at the noise floor: treat as passing
                };
                // The slope is meaningful only above the fd roundoff floor.
                let slope_ok = slope >= 1.8 || errs[0] < 1e-7 * scale;
                rec.push(
                    "fd-slope",
                    format!("functional={name};dir={dname};rep={rep}"),
                    slope,
                    1.8,
                    Some(slope_ok),
                );
                let rel = errs[2] / scale;
                rec.push(
                    "fd-terminal-rel",
                    format!("functional={name};dir={dname};rep={rep};eps=1e-4"),
                    rel,
                    1e-4,
                    Some(rel <= 1e-4),
                );
            }
        }

        // Empirical-gradient identity on resampled supports.
        for rep in 0..5usize {
            let mu = if rep == 0 {
                built.initial.clone()
            } else {
                resample_like(built, cfg.seed, "grad", rep)?
            };
            let dev = empirical_gradient_identity(func, built.manifold, mu.points(), 1e-5)?;
            rec.push(
                "empirical-gradient",
                format!("functional={name};rep={rep};n={}", mu.len()),
                dev,
                1e-5,
                Some(dev < 1e-5),
            );
        }

        // Chain rule along a built-in deterministic path.
        let path = match built.manifold {
            Manifold::Euclidean { dim } => {
                DeterministicPath::Translation { v: crate::Vector::from_element(dim, 1.0) }
            }
            Manifold::Sphere { .. } => DeterministicPath::Rotation { axis: 2, rate: 1.0 },
            Manifold::FlatTorus { dim } => {
                DeterministicPath::TorusAdvance { rates: vec![1.0; dim] }
            }
        };
        for &theta in &[0.0, 0.3] {
            let res = chain_rule_residual(func, &path, &built.initial, theta, 1e-5);
            rec.push(
                "chain-rule",
                format!("functional={name};theta={theta}"),
                res,
                1e-6,
                Some(res < 1e-6),
            );
        }
    }

    // Measure-Lipschitz estimates per field, against closed-form bounds.
    for (i, field) in
        std::iter::once(&built.fields.drift).chain(&built.fields.diffusions).enumerate()
    {
        if field.is_zero() {
            continue;
        }
        let mut est: f64 = 0.0;
        let mut rng = CounterRng::new(derive_stream(cfg.seed, &["lipschitz"]), 0);
        for rep in 0..8usize {
            let mu = resample_like(built, cfg.seed, "lip-a", rep)?;
            let nu = resample_like(built, cfg.seed, "lip-b", rep)?;
            let g2 = mu.wasserstein2(&nu)?;
            if g2 < 1e-12 {
                continue;
            }
            let x = match built.manifold {
                Manifold::Euclidean { dim } => crate::Vector::from_fn(dim, |_, _| rng.normal()),
                _ => built.manifold.sample_uniform(1, &mut rng)?.pop().unwrap(),
            };
            let dv = (field.evaluate(&x, &mu)? - field.evaluate(&x, &nu)?).norm();
            est = est.max(dv / g2);
        }
        let (tol, pass) = match field.lipschitz_bound() {
            Some(bound) => (bound, Some(est <= bound + 1e-9)),
            None => (f64::NAN, None),
        };
        rec.push("lipschitz-constant", format!("field={i}"), est, tol, pass);
    }

    // Change-of-variables residual on a dyadic ladder: the terminal RMS
    // should halve with the step.
    if !built.fields.diffusions.is_empty() {
        let ladder = cfg.dt_ladder();
        for (name, func) in &built.functionals {
            let mut rms = Vec::new();
            for &dt in &ladder {
                let reps = 16usize;
                let mut acc = 0.0;
                for r in 0..reps {
                    let stream = derive_stream_indexed(cfg.seed, &["ito", name], r as u64);
                    let noise = simulate_noise(
                        built.fields.n_noise(),
                        cfg.solver.horizon,
                        dt,
                        cfg.seed,
                        stream,
                    )?;
                    let run_cfg = SolverConfig { dt, ..built.solver };
                    let res = ito_formula_residual(
                        func,
                        &built.initial,
                        &built.fields,
                        &noise,
                        &run_cfg,
                    )?;
                    let last = res.residual.last().copied().unwrap_or(0.0);
                    acc += last * last;
                }
                rms.push((acc / reps as f64).sqrt());
            }
            for (dt, r) in ladder.iter().zip(&rms) {
                rec.push("ito-residual-rms", format!("functional={name};dt={dt}"), *r, 0.0, None);
            }
            for (k, w) in rms.windows(2).enumerate() {
                // Below the roundoff floor the formula holds exactly (the
                // midpoint sums telescope); the ratio is then meaningless.
                let at_floor = w[0] < 1e-12 && w[1] < 1e-12;
                let ratio = if w[1] > 0.0 { w[0] / w[1] } else { f64::NAN };
                let pass = Some(at_floor || (1.4..=2.6).contains(&ratio));
                rec.push(
                    "ito-residual-halving",
                    format!("functional={name};from_dt={};to_dt={}", ladder[k], ladder[k + 1]),
                    ratio,
                    2.0,
                    pass,
                );
            }
        }
    }
    Ok(())
}

fn pairwise_pass(a: &ChaosKernelEstimate, b: &ChaosKernelEstimate) -> (f64, f64, bool) {
    let diff = (a.value - b.value).abs();
    let tol = 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt().max(1e-9);
    (diff, tol, diff <= tol)
}

fn run_kv_kernels(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    out_dir: &Path,
    rec: &mut Recorder,
    order: usize,
) -> Result<()> {
    let t = cfg.solver.horizon;
    let mut kernels_csv = csv::Writer::from_path(out_dir.join("kernels.csv"))
        .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    kernels_csv
        .write_record([
            "method",
            "i",
            "tau1",
            "tau2",
            "value",
            "stderr",
            "outer_n",
            "inner_n",
            "eps",
            "functional",
        ])
        .map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    let mut emit = |est: &ChaosKernelEstimate, functional: &str| -> Result<()> {
        kernels_csv
            .write_record([
                est.method.as_str(),
                &est.noise_index.to_string(),
                &format!("{:.9}", est.taus[0]),
                &est.taus.get(1).map(|t| format!("{t:.9}")).unwrap_or_default(),
                &format!("{:.17e}", est.value),
                &format!("{:.17e}", est.stderr),
                &est.outer_n.to_string(),
                &est.inner_n.to_string(),
                &format!("{:.6}", est.eps),
                functional,
            ])
            .map_err(|e| Error::OutputUnwritable(e.to_string()))
    };
    let budget = NestedBudget::new(cfg.budgets.outer, cfg.budgets.inner, cfg.budgets.eps);
    if order == 1 {
        let grid = kernel_grid(t, built.solver.dt, cfg.budgets.kernel_nodes)?;
        for (name, func) in &built.functionals {
            for i in 0..built.fields.n_noise() {
                let seed = derive_stream(cfg.seed, &["kv", name, &i.to_string()]);
                let proj = projection_kernel_order1(
                    func,
                    &built.initial,
                    t,
                    cfg.budgets.bins,
                    i,
                    &built.fields,
                    cfg.budgets.replicas,
                    &built.solver,
                    seed,
                )?;
                for p in &proj {
                    rec.kernel("kv1", p, &format!(";functional={name}"));
                    emit(p, name)?;
                }
                let bin_width = t / cfg.budgets.bins as f64;
                for (node, &tau) in grid.iter().enumerate() {
                    let sg = kv_kernel_order1(
                        func,
                        &built.initial,
                        t,
                        tau,
                        i,
                        &built.fields,
                        &budget,
                        &built.solver,
                        seed,
                    )?;
                    rec.kernel("kv1", &sg, &format!(";functional={name}"));
                    emit(&sg, name)?;
                    let co = clark_ocone_kernel(
                        func,
                        &built.initial,
                        t,
                        tau,
                        i,
                        &built.fields,
                        cfg.budgets.replicas.min(2000),
                        &built.solver,
                        seed,
                    )?;
                    rec.kernel("kv1", &co, &format!(";functional={name}"));
                    emit(&co, name)?;
                    let bin_idx = ((tau / bin_width) as usize).min(cfg.budgets.bins - 1);
                    let pr = &proj[bin_idx];
                    for (label, x, y) in
                        [("sg-proj", &sg, pr), ("sg-co", &sg, &co), ("proj-co", pr, &co)]
                    {
                        let (diff, tol, ok) = pairwise_pass(x, y);
                        rec.push(
                            "kv1-agreement",
                            format!("pair={label};functional={name};i={i};tau={tau:.6}"),
                            diff,
                            tol,
                            Some(ok),
                        );
                    }
                    // Epsilon sweep at one interior node.
                    if node == grid.len() / 2 && tau < t {
                        let sweep = NestedBudget { eps: 2.0 * budget.eps, ..budget };
                        let sg2 = kv_kernel_order1(
                            func,
                            &built.initial,
                            t,
                            tau,
                            i,
                            &built.fields,
                            &sweep,
                            &built.solver,
                            seed,
                        )?;
                        rec.kernel("kv1-eps-sweep", &sg2, &format!(";functional={name}"));
                        emit(&sg2, name)?;
                    }
                }
            }
        }
    } else {
        let (tau1, tau2) = if cfg.budgets.kv2_taus.len() == 2 {
            (cfg.budgets.kv2_taus[0], cfg.budgets.kv2_taus[1])
        } else {
            let steps = grid_steps(t, built.solver.dt)?;
            let q = (steps / 4).max(1);
            (q as f64 * built.solver.dt, (2 * q) as f64 * built.solver.dt)
        };
        let budget2 = NestedBudget2 {
            outer: cfg.budgets.outer,
            mid: cfg.budgets.mid,
            inner: cfg.budgets.inner,
            eps_outer: cfg.budgets.eps,
            eps_inner: cfg.budgets.eps_inner,
            max_inner_solves: None,
        };
        for (name, func) in &built.functionals {
            if !func.has_second_derivative() {
                continue;
            }
            for i in 0..built.fields.n_noise() {
                let seed = derive_stream(cfg.seed, &["kv2", name, &i.to_string()]);
                let sg = kv_kernel_order2(
                    func,
                    &built.initial,
                    t,
                    tau1,
                    tau2,
                    i,
                    &built.fields,
                    &budget2,
                    &built.solver,
                    seed,
                )?;
                rec.kernel("kv2", &sg, &format!(";functional={name}"));
                emit(&sg, name)?;
                // Projection over the bins containing tau1 and tau2.
                let bins = cfg.budgets.bins;
                let bin_width = t / bins as f64;
                let snap = |tau: f64| -> (f64, f64) {
                    let b = ((tau / bin_width) as usize).min(bins - 1);
                    (b as f64 * bin_width, (b + 1) as f64 * bin_width)
                };
                let (b1, b2) = (snap(tau1), snap(tau2));
                if b1.1 <= b2.0 {
                    let pr = projection_kernel_order2(
                        func,
                        &built.initial,
                        t,
                        b1,
                        b2,
                        i,
                        &built.fields,
                        cfg.budgets.replicas,
                        &built.solver,
                        seed,
                    )?;
                    rec.kernel("kv2", &pr, &format!(";functional={name}"));
                    emit(&pr, name)?;
                    let (diff, tol, ok) = pairwise_pass(&sg, &pr);
                    rec.push(
                        "kv2-agreement",
                        format!("functional={name};i={i};tau1={tau1:.6};tau2={tau2:.6}"),
                        diff,
                        tol,
                        Some(ok),
                    );
                }
            }
        }
    }
    kernels_csv.flush().map_err(|e| Error::OutputUnwritable(e.to_string()))?;
    Ok(())
}

fn run_kv_diagnostics(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    rec: &mut Recorder,
    report: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut diag_reports = Vec::new();
    for (name, func) in &built.functionals {
        let seed = derive_stream(cfg.seed, &["diag", name]);
        let rep = truncation_diagnostics(
            func,
            &built.initial,
            cfg.solver.horizon,
            &built.fields,
            cfg.budgets.replicas,
            cfg.budgets.bins,
            &built.solver,
            seed,
            cfg.budgets.antithetic,
        )?;
        rec.push("diag-mean", format!("functional={name}"), rep.mean, 0.0, None);
        rec.push("diag-variance", format!("functional={name}"), rep.variance, 0.0, None);
        rec.push(
            "diag-first-order-share",
            format!("functional={name};t={}", rep.t),
            rep.first_order_share,
            0.0,
            None,
        );
        rec.push(
            "diag-residual-share",
            format!("functional={name};t={}", rep.t),
            rep.residual_share,
            0.0,
            None,
        );
        let mut worst_mixed = 0.0f64;
        for m in &rep.mixed {
            if m.stderr > 0.0 {
                worst_mixed = worst_mixed.max(m.value.abs() / m.stderr);
            }
        }
        rec.push("diag-mixed-max-sigmas", format!("functional={name}"), worst_mixed, 3.0, None);

        let kernels: Vec<serde_json::Value> = rep
            .kernels
            .iter()
            .enumerate()
            .map(|(i, bins)| {
                serde_json::json!({
                    "noise_index": i,
                    "bins": bins.iter().map(|(v, se)| serde_json::json!([v, se])).collect::<Vec<_>>(),
                })
            })
            .collect();
        diag_reports.push(serde_json::json!({
            "functional": name,
            "t": rep.t,
            "replicas": rep.replicas,
            "mean": rep.mean,
            "variance": rep.variance,
            "bin_width": rep.bin_width,
            "first_order_integrals": rep.first_order_integrals,
            "first_order_share": rep.first_order_share,
            "residual_share": rep.residual_share,
            "kernels": kernels,
            "mixed_projections": rep.mixed.iter().map(|m| serde_json::json!({
                "i": m.i, "j": m.j, "bin_i": m.bin_i, "bin_j": m.bin_j,
                "value": m.value, "stderr": m.stderr,
            })).collect::<Vec<_>>(),
        }));
    }
    report.insert("kv_diagnostics".into(), serde_json::Value::Array(diag_reports));
    Ok(())
}

/// Build a perturbed copy of the initial measure at roughly the requested
/// Wasserstein distance by pushing along an isometry-like direction.
fn perturbed_initial(built: &BuiltExperiment, size: f64) -> EmpiricalMeasure {
    let m = built.manifold;
    match m {
        Manifold::Euclidean { dim } => built.initial.pushforward(|x| {
            let mut y = x.clone();
            y[0] += size;
            let _ = dim;
            y
        }),
        Manifold::Sphere { .. } => {
            let (s, c) = size.sin_cos();
            built.initial.pushforward(|x| {
                let mut y = x.clone();
                y[0] = c * x[0] - s * x[1];
                y[1] = s * x[0] + c * x[1];
                y
            })
        }
        Manifold::FlatTorus { .. } => {
            let (s, c) = size.sin_cos();
            built.initial.pushforward(|x| {
                let mut y = x.clone();
                y[0] = c * x[0] - s * x[1];
                y[1] = s * x[0] + c * x[1];
                y
            })
        }
    }
}

fn run_stability(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    rec: &mut Recorder,
) -> Result<()> {
    let mut ratios_p2 = Vec::new();
    for &size in &cfg.budgets.perturbation_sizes {
        let nu = perturbed_initial(built, size);
        let tracked_pairs: Vec<_> = built.tracked.iter().map(|u| (u.clone(), u.clone())).collect();
        let report = estimate_stability(
            &built.initial,
            &nu,
            &built.fields,
            &built.solver,
            cfg.solver.horizon,
            &tracked_pairs,
            cfg.budgets.replicas,
            derive_stream(cfg.seed, &["stability", &format!("{size}")]),
        )?;
        rec.push(
            "stability-ratio-p2",
            format!("size={size};gap0={:.6};replicas={}", report.initial_gap, report.replicas),
            report.ratio_p2.0,
            report.ratio_p2.1,
            Some(report.ratio_p2.0.is_finite()),
        );
        rec.push(
            "stability-ratio-p4",
            format!("size={size};gap0={:.6}", report.initial_gap),
            report.ratio_p4.0,
            report.ratio_p4.1,
            Some(report.ratio_p4.0.is_finite()),
        );
        if let Some((v, se)) = report.tracked_ratio_p2 {
            rec.push("stability-tracked-p2", format!("size={size}"), v, se, None);
        }
        if report.diverged > 0 {
            rec.push(
                "stability-diverged",
                format!("size={size}"),
                report.diverged as f64,
                0.0,
                Some(false),
            );
        }
        ratios_p2.push(report.ratio_p2.0);
    }
    // Zero perturbation: the coupled gap must be exactly zero.
    let zero = estimate_stability(
        &built.initial,
        &built.initial,
        &built.fields,
        &built.solver,
        cfg.solver.horizon,
        &[],
        4.min(cfg.budgets.replicas),
        derive_stream(cfg.seed, &["stability", "zero"]),
    )?;
    rec.push(
        "stability-zero-perturbation",
        "size=0".into(),
        zero.ratio_p2.0,
        0.0,
        Some(zero.ratio_p2.0 == 0.0),
    );
    // Mutual boundedness across sizes (factor 2).
    let (lo, hi) =
        ratios_p2.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if hi > 0.0 {
        rec.push(
            "stability-ratio-spread",
            format!("sizes={:?}", cfg.budgets.perturbation_sizes),
            hi / lo,
            2.0,
            Some(hi / lo <= 2.0),
        );
    }
    Ok(())
}

fn run_convergence(
    cfg: &ExperimentConfig,
    built: &BuiltExperiment,
    rec: &mut Recorder,
) -> Result<()> {
    let ladder = cfg.dt_ladder();
    let report = convergence_order(
        &built.initial,
        &built.fields,
        &built.solver,
        cfg.solver.horizon,
        &built.tracked,
        &ladder,
        cfg.budgets.replicas.min(256),
        derive_stream(cfg.seed, &["convergence"]),
    )?;
    for (gap, dts) in report.gaps.iter().zip(ladder.windows(2)) {
        rec.push(
            "convergence-gap",
            format!("dt_coarse={};dt_fine={}", dts[0], dts[1]),
            *gap,
            0.0,
            None,
        );
    }
    match report.order {
        Some(order) => {
            let pass = if built.fields.is_all_zero_diffusion() {
                order >= 0.45
            } else {
                (0.45..=1.1).contains(&order)
            };
            rec.push("convergence-order", format!("ladder={ladder:?}"), order, 0.45, Some(pass));
        }
        None => {
            // All gaps zero: trivially convergent.
            rec.push(
                "convergence-order",
                format!("ladder={ladder:?}"),
                f64::INFINITY,
                0.45,
                Some(true),
            );
        }
    }
    Ok(())
}

fn run_picard(cfg: &ExperimentConfig, built: &BuiltExperiment, rec: &mut Recorder) -> Result<()> {
    let stream = derive_stream(cfg.seed, &["picard"]);
    let noise = simulate_noise(
        built.fields.n_noise(),
        cfg.solver.horizon,
        built.solver.dt,
        cfg.seed,
        stream,
    )?;
    let iterations = cfg.budgets.picard_iterations.max(2);
    let sols = picard_solve(
        &built.initial,
        &built.fields,
        &noise,
        &built.tracked,
        &built.solver,
        iterations,
    )?;
    let mut gaps = Vec::new();
    for (k, pair) in sols.windows(2).enumerate() {
        let gap = sup_measure_gap(&pair[0], &pair[1])?;
        rec.push("picard-gap", format!("k={}", k + 1), gap, 0.0, None);
        gaps.push(gap);
    }
    for (k, w) in gaps.windows(2).enumerate() {
        let ratio = if w[0] > 0.0 { w[1] / w[0] } else { 0.0 };
        rec.push("picard-contraction", format!("k={}", k + 2), ratio, 0.8, Some(ratio < 0.8));
    }
    let direct = solve_interacting_flow(
        &built.initial,
        &built.fields,
        &noise,
        &built.tracked,
        &built.solver,
    )?;
    let final_gap = sup_measure_gap(sols.last().unwrap(), &direct)?;
    let last_iter_gap = gaps.last().copied().unwrap_or(0.0);
    rec.push(
        "picard-vs-direct",
        format!("iterations={iterations};last_gap={last_iter_gap:.3e}"),
        final_gap,
        3.0 * last_iter_gap,
        Some(final_gap <= 3.0 * last_iter_gap + 1e-12),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_config() -> ExperimentConfig {
        ExperimentConfig::from_json(include_str!("../configs/additive-gaussian.json")).unwrap()
    }

    #[test]
    fn empty_suites_emit_resolved_config_only() {
        let mut cfg = reference_config();
        cfg.suites.clear();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(summary.failures, 0);
        assert!(summary.records.is_empty());
        assert!(dir.path().join("resolved-config.json").exists());
        assert!(dir.path().join("records.csv").exists());
    }

    #[test]
    fn rerun_is_bitwise_identical_modulo_wall_times() {
        let mut cfg = reference_config();
        cfg.suites = vec!["check-calculus".into()];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&cfg, d1.path()).unwrap();
        run_experiment(&cfg, d2.path()).unwrap();
        let a = canonical_records(&d1.path().join("records.csv")).unwrap();
        let b = canonical_records(&d2.path().join("records.csv")).unwrap();
        assert_eq!(a, b);
    }
}
