//! Semigroup and chaos-kernel estimation.
//!
//! The semigroup `T_t f(mu) = E[f(mu_t)]` is a plain Monte Carlo mean with
//! antithetic pairing. First-order chaos kernels are estimated three
//! independent ways:
//!
//! * `SemigroupFormula` — the nested sandwich `T_tau A_i T_{t-tau} f(mu)`,
//!   with `A_i` realized as a common-random-number central difference along
//!   the frozen direction `V_i(., mu)` (analytic at the `tau = t` edge);
//! * `ProjectionRegression` — bin averages of `E[f(mu_t) dB^i] / |bin|`,
//!   which chaos orthogonality identifies with bin averages of the kernel;
//! * `ClarkOcone` — the expected Malliavin derivative `E[D^i_s f(mu_t)]`.
//!
//! Order-2 kernels get the doubly nested sandwich and the double-increment
//! projection. `truncation_diagnostics` assembles the variance budget of the
//! expansion and reports mixed-index projections separately.

use crate::calculus::{
    default_substeps, malliavin_flow, malliavin_functional, perturb_measure, DirectionField,
};
use crate::error::{Error, Result};
use crate::functionals::MeasureFunctional;
use crate::measure::EmpiricalMeasure;
use crate::noise::{grid_steps, simulate_noise, NoisePath};
use crate::rng::derive_stream;
use crate::solver::{solve_interacting_flow, FieldSet, SolverConfig};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMethod {
    SemigroupFormula,
    ProjectionRegression,
    ClarkOcone,
}

impl KernelMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelMethod::SemigroupFormula => "semigroup",
            KernelMethod::ProjectionRegression => "projection",
            KernelMethod::ClarkOcone => "clark-ocone",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemigroupEstimate {
    pub value: f64,
    pub stderr: f64,
    pub replicas: usize,
    pub t: f64,
    pub diverged: usize,
}

#[derive(Debug, Clone)]
pub struct ChaosKernelEstimate {
    pub order: usize,
    pub noise_index: usize,
    pub taus: Vec<f64>,
    pub method: KernelMethod,
    pub value: f64,
    pub stderr: f64,
    pub outer_n: usize,
    pub inner_n: usize,
    pub eps: f64,
}

/// Replica budgets for the nested order-1 estimator.
#[derive(Debug, Clone, Copy)]
pub struct NestedBudget {
    pub outer: usize,
    pub inner: usize,
    pub eps: f64,
    /// Upper bound on inner-path solves; exceeded budgets error out rather
    /// than silently running for hours.
    pub max_inner_solves: Option<u64>,
}

impl NestedBudget {
    pub fn new(outer: usize, inner: usize, eps: f64) -> Self {
        NestedBudget { outer, inner, eps, max_inner_solves: None }
    }
}

/// Budgets for the doubly nested order-2 estimator.
#[derive(Debug, Clone, Copy)]
pub struct NestedBudget2 {
    pub outer: usize,
    pub mid: usize,
    pub inner: usize,
    pub eps_outer: f64,
    pub eps_inner: f64,
    pub max_inner_solves: Option<u64>,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn stream_for(seed: u64, labels: &[&str], idx: usize) -> u64 {
    let tail = idx.to_string();
    let mut all: Vec<&str> = labels.to_vec();
    all.push(&tail);
    derive_stream(seed, &all)
}

/// Simulate terminal functional values (and optionally the driving paths).
///
/// With `antithetic` on, replica `2p` and `2p+1` share the stream of pair
/// `p` with negated increments. Used by both the semigroup estimator and
/// the diagnostics so their zeroth-order statistics agree exactly.
#[allow(clippy::too_many_arguments)]
fn terminal_samples(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    fields: &FieldSet,
    cfg: &SolverConfig,
    replicas: usize,
    seed: u64,
    antithetic: bool,
    want_paths: bool,
) -> Result<(Vec<f64>, Vec<NoisePath>, usize)> {
    if replicas < 2 {
        return Err(Error::InvalidInput("semigroup estimation needs replicas >= 2".into()));
    }
    let steps = grid_steps(t, cfg.dt)?;
    if steps == 0 {
        let v = func.value(mu);
        return Ok((vec![v; replicas], Vec::new(), 0));
    }
    #[allow(clippy::type_complexity)]
    let results: Vec<Result<Option<(f64, Option<NoisePath>)>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = if antithetic {
                stream_for(seed, &["sg"], r / 2)
            } else {
                stream_for(seed, &["sg"], r)
            };
            let mut noise = simulate_noise(fields.n_noise(), t, cfg.dt, seed, stream)?;
            if antithetic && r % 2 == 1 {
                noise = noise.negated();
            }
            let run_cfg = SolverConfig { save_stride: steps, ..*cfg };
            match solve_interacting_flow(mu, fields, &noise, &[], &run_cfg) {
                Ok(sol) => {
                    let v = func.value(sol.final_measure());
                    Ok(Some((v, want_paths.then_some(noise))))
                }
                Err(Error::NonFinite(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut values = Vec::with_capacity(replicas);
    let mut paths = Vec::new();
    let mut diverged = 0usize;
    for r in results {
        match r? {
            Some((v, p)) => {
                values.push(v);
                if let Some(p) = p {
                    paths.push(p);
                }
            }
            None => diverged += 1,
        }
    }
    Ok((values, paths, diverged))
}

/// Monte Carlo estimate of `T_t f(mu) = E[f(mu_t)]`.
///
/// Antithetic pairing on by default elsewhere in the crate; the standard
/// error is over pair means when pairing is on, `std/sqrt(replicas)` when
/// off. Deterministic given `(seed, replicas)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_semigroup(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    fields: &FieldSet,
    cfg: &SolverConfig,
    replicas: usize,
    seed: u64,
    antithetic: bool,
) -> Result<SemigroupEstimate> {
    let (values, _, diverged) =
        terminal_samples(func, mu, t, fields, cfg, replicas, seed, antithetic, false)?;
    let (value, stderr) = if antithetic {
        let pair_means: Vec<f64> =
            values.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        mean_stderr(&pair_means)
    } else {
        mean_stderr(&values)
    };
    Ok(SemigroupEstimate { value, stderr, replicas: values.len(), t, diverged })
}

/// Result of one `A_i` application.
#[derive(Debug, Clone, Copy)]
pub struct AppliedA {
    pub fd: f64,
    /// Analytic pairing, present when the target is a built-in functional.
    pub analytic: Option<f64>,
    pub eps: f64,
}

/// Target of an `A_i` application: a built-in functional or an arbitrary
/// estimator of one (e.g. an inner semigroup estimate).
pub enum SemigroupTarget<'a> {
    Functional(&'a MeasureFunctional),
    Estimator(&'a (dyn Fn(&EmpiricalMeasure) -> Result<f64> + Sync)),
}

/// `A_i g(mu)` as a central difference along the frozen direction
/// `V_i(., mu)`; estimator targets must reuse one seed across the two signs
/// (common random numbers) to keep the difference variance bounded.
pub fn apply_a(
    i: usize,
    target: &SemigroupTarget<'_>,
    mu: &EmpiricalMeasure,
    fields: &FieldSet,
    eps: f64,
) -> Result<AppliedA> {
    let diffusion = fields
        .diffusions
        .get(i)
        .ok_or_else(|| Error::InvalidInput(format!("no diffusion field with index {i}")))?;
    let dir = DirectionField::frozen(diffusion.clone(), mu.clone());
    let substeps = default_substeps(eps);
    let plus = perturb_measure(mu, &dir, eps, substeps);
    let minus = perturb_measure(mu, &dir, -eps, substeps);
    let (gp, gm, analytic) = match target {
        SemigroupTarget::Functional(f) => {
            (f.value(&plus), f.value(&minus), Some(f.apply_a(fields, i, mu)?))
        }
        SemigroupTarget::Estimator(g) => (g(&plus)?, g(&minus)?, None),
    };
    Ok(AppliedA { fd: (gp - gm) / (2.0 * eps), analytic, eps })
}

/// Evolve `mu` to time `tau` under one replica stream; identity at `tau = 0`.
fn evolve_once(
    mu: &EmpiricalMeasure,
    fields: &FieldSet,
    tau: f64,
    cfg: &SolverConfig,
    seed: u64,
    labels: &[&str],
    idx: usize,
) -> Result<EmpiricalMeasure> {
    let steps = grid_steps(tau, cfg.dt)?;
    if steps == 0 {
        return Ok(mu.clone());
    }
    let stream = stream_for(seed, labels, idx);
    let noise = simulate_noise(fields.n_noise(), tau, cfg.dt, seed, stream)?;
    let run_cfg = SolverConfig { save_stride: steps, ..*cfg };
    Ok(solve_interacting_flow(mu, fields, &noise, &[], &run_cfg)?.final_measure().clone())
}

/// Order-1 kernel by the semigroup sandwich `T_tau A_i T_{t-tau} f(mu)`.
///
/// Outer replicas evolve to `tau`; each applies `A_i` to an inner semigroup
/// estimate of horizon `t - tau` with common random numbers across the
/// central-difference pair. At `tau = t` the analytic `A_i f` replaces the
/// inner estimate.
#[allow(clippy::too_many_arguments)]
pub fn kv_kernel_order1(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    tau: f64,
    i: usize,
    fields: &FieldSet,
    budget: &NestedBudget,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<ChaosKernelEstimate> {
    let t_steps = grid_steps(t, cfg.dt)?;
    let tau_steps = grid_steps(tau, cfg.dt)?;
    if tau_steps > t_steps {
        return Err(Error::InvalidInput(format!("tau {tau} exceeds horizon {t}")));
    }
    if budget.outer < 2 {
        return Err(Error::BudgetExhausted("order-1 kernel needs outer >= 2".into()));
    }
    if let Some(cap) = budget.max_inner_solves {
        let projected = budget.outer as u64 * 2 * budget.inner as u64;
        if projected > cap {
            return Err(Error::BudgetExhausted(format!(
                "projected {projected} inner solves exceed cap {cap}"
            )));
        }
    }
    let at_edge = tau_steps == t_steps;
    let inner_t = t - tau;

    let per_outer: Vec<Result<f64>> = (0..budget.outer)
        .into_par_iter()
        .map(|o| {
            let mu_tau = evolve_once(mu, fields, tau, cfg, seed, &["kv1", "outer"], o)?;
            if at_edge {
                return func.apply_a(fields, i, &mu_tau);
            }
            let inner_seed = stream_for(seed, &["kv1", "inner"], o);
            let estimator = |nu: &EmpiricalMeasure| -> Result<f64> {
                Ok(estimate_semigroup(
                    func,
                    nu,
                    inner_t,
                    fields,
                    cfg,
                    budget.inner,
                    inner_seed,
                    true,
                )?
                .value)
            };
            let target = SemigroupTarget::Estimator(&estimator);
            Ok(apply_a(i, &target, &mu_tau, fields, budget.eps)?.fd)
        })
        .collect();

    let values: Vec<f64> = per_outer.into_iter().collect::<Result<_>>()?;
    let (value, stderr) = mean_stderr(&values);
    Ok(ChaosKernelEstimate {
        order: 1,
        noise_index: i,
        taus: vec![tau],
        method: KernelMethod::SemigroupFormula,
        value,
        stderr,
        outer_n: budget.outer,
        inner_n: if at_edge { 0 } else { budget.inner },
        eps: if at_edge { 0.0 } else { budget.eps },
    })
}

/// Bin-averaged order-1 kernel from the first-chaos projection
/// `E[f(mu_t) dB^i(bin)] / |bin|`. Returns one estimate per bin, `tau` at
/// the bin midpoint.
#[allow(clippy::too_many_arguments)]
pub fn projection_kernel_order1(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    bins: usize,
    i: usize,
    fields: &FieldSet,
    replicas: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Vec<ChaosKernelEstimate>> {
    let steps = grid_steps(t, cfg.dt)?;
    if bins == 0 || steps % bins != 0 {
        return Err(Error::InvalidGrid(format!("{steps} steps not divisible into {bins} bins")));
    }
    if i >= fields.n_noise() {
        return Err(Error::InvalidInput(format!("no diffusion field with index {i}")));
    }
    let steps_per_bin = steps / bins;
    let bin_width = t / bins as f64;

    #[allow(clippy::type_complexity)]
    let rows: Vec<Result<Option<(f64, Vec<f64>)>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = stream_for(seed, &["proj1"], r);
            let noise = simulate_noise(fields.n_noise(), t, cfg.dt, seed, stream)?;
            let run_cfg = SolverConfig { save_stride: steps, ..*cfg };
            match solve_interacting_flow(mu, fields, &noise, &[], &run_cfg) {
                Ok(sol) => {
                    let y = func.value(sol.final_measure());
                    let mut row = Vec::with_capacity(bins);
                    for b in 0..bins {
                        row.push(noise.window_sum(i, b * steps_per_bin, (b + 1) * steps_per_bin));
                    }
                    Ok(Some((y, row)))
                }
                Err(Error::NonFinite(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut ys = Vec::with_capacity(replicas);
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(replicas);
    for row in rows {
        if let Some((y, s)) = row? {
            ys.push(y);
            sums.push(s);
        }
    }
    // Centering y is a control variate: E[(y - c) dB] = E[y dB] for any
    // constant, and with c = mean(y) constant functionals project to an
    // exact zero instead of Monte Carlo noise.
    let y_mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::with_capacity(replicas); bins];
    for (y, row) in ys.iter().zip(&sums) {
        for (b, s) in row.iter().enumerate() {
            per_bin[b].push((y - y_mean) * s / bin_width);
        }
    }
    Ok(per_bin
        .into_iter()
        .enumerate()
        .map(|(b, vals)| {
            let (value, stderr) = mean_stderr(&vals);
            ChaosKernelEstimate {
                order: 1,
                noise_index: i,
                taus: vec![(b as f64 + 0.5) * bin_width],
                method: KernelMethod::ProjectionRegression,
                value,
                stderr,
                outer_n: vals.len(),
                inner_n: 0,
                eps: 0.0,
            }
        })
        .collect())
}

/// Order-1 kernel as the expected Malliavin derivative `E[D^i_s f(mu_t)]`.
#[allow(clippy::too_many_arguments)]
pub fn clark_ocone_kernel(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    s: f64,
    i: usize,
    fields: &FieldSet,
    replicas: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<ChaosKernelEstimate> {
    if s > t {
        return Ok(ChaosKernelEstimate {
            order: 1,
            noise_index: i,
            taus: vec![s],
            method: KernelMethod::ClarkOcone,
            value: 0.0,
            stderr: 0.0,
            outer_n: replicas,
            inner_n: 0,
            eps: 0.0,
        });
    }
    let steps = grid_steps(t, cfg.dt)?;
    let values: Vec<Result<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = stream_for(seed, &["co"], r);
            let noise = simulate_noise(fields.n_noise(), t, cfg.dt, seed, stream)?;
            let run_cfg = SolverConfig { save_stride: steps.max(1), ..*cfg };
            let tracked = mu.points()[0].clone();
            let sol = malliavin_flow(mu, fields, &noise, &tracked, &[s], &run_cfg)?;
            let d = malliavin_functional(func, &sol, 0, sol.times.len() - 1)?;
            Ok(d[i])
        })
        .collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    let (value, stderr) = mean_stderr(&values);
    Ok(ChaosKernelEstimate {
        order: 1,
        noise_index: i,
        taus: vec![s],
        method: KernelMethod::ClarkOcone,
        value,
        stderr,
        outer_n: replicas,
        inner_n: 0,
        eps: 0.0,
    })
}

/// Order-2 kernel by the doubly nested sandwich
/// `T_{tau1} A_i T_{tau2-tau1} A_i T_{t-tau2} f(mu)`.
#[allow(clippy::too_many_arguments)]
pub fn kv_kernel_order2(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    tau1: f64,
    tau2: f64,
    i: usize,
    fields: &FieldSet,
    budget: &NestedBudget2,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<ChaosKernelEstimate> {
    let t_steps = grid_steps(t, cfg.dt)?;
    let t1_steps = grid_steps(tau1, cfg.dt)?;
    let t2_steps = grid_steps(tau2, cfg.dt)?;
    if !(t1_steps < t2_steps && t2_steps <= t_steps) {
        return Err(Error::InvalidInput(format!(
            "order-2 kernel needs tau1 < tau2 <= t on the grid, got {tau1}, {tau2}, {t}"
        )));
    }
    if let Some(cap) = budget.max_inner_solves {
        let projected =
            budget.outer as u64 * 2 * budget.mid as u64 * 2 * budget.inner.max(1) as u64;
        if projected > cap {
            return Err(Error::BudgetExhausted(format!(
                "projected {projected} inner solves exceed cap {cap}"
            )));
        }
    }
    let at_edge = t2_steps == t_steps;
    let mid_horizon = tau2 - tau1;
    let inner_horizon = t - tau2;

    let per_outer: Vec<Result<f64>> = (0..budget.outer)
        .into_par_iter()
        .map(|o| {
            let mu1 = evolve_once(mu, fields, tau1, cfg, seed, &["kv2", "outer"], o)?;
            let o_label = o.to_string();
            // Mid-level estimator of (A_i T_{t - tau2} f)(nu), CRN in `m`.
            let mid_value = |nu: &EmpiricalMeasure| -> Result<f64> {
                let mut acc = 0.0;
                for m_idx in 0..budget.mid {
                    let nu_m = evolve_once(
                        nu,
                        fields,
                        mid_horizon,
                        cfg,
                        seed,
                        &["kv2", "mid", &o_label],
                        m_idx,
                    )?;
                    let inner = if at_edge {
                        func.apply_a(fields, i, &nu_m)?
                    } else {
                        let inner_seed = stream_for(seed, &["kv2", "inner", &o_label], m_idx);
                        let estimator = |xi: &EmpiricalMeasure| -> Result<f64> {
                            Ok(estimate_semigroup(
                                func,
                                xi,
                                inner_horizon,
                                fields,
                                cfg,
                                budget.inner,
                                inner_seed,
                                true,
                            )?
                            .value)
                        };
                        apply_a(
                            i,
                            &SemigroupTarget::Estimator(&estimator),
                            &nu_m,
                            fields,
                            budget.eps_inner,
                        )?
                        .fd
                    };
                    acc += inner;
                }
                Ok(acc / budget.mid as f64)
            };
            let target = SemigroupTarget::Estimator(&mid_value);
            Ok(apply_a(i, &target, &mu1, fields, budget.eps_outer)?.fd)
        })
        .collect();

    let values: Vec<f64> = per_outer.into_iter().collect::<Result<_>>()?;
    let (value, stderr) = mean_stderr(&values);
    Ok(ChaosKernelEstimate {
        order: 2,
        noise_index: i,
        taus: vec![tau1, tau2],
        method: KernelMethod::SemigroupFormula,
        value,
        stderr,
        outer_n: budget.outer,
        inner_n: budget.mid * budget.inner.max(1),
        eps: budget.eps_outer,
    })
}

/// Order-2 kernel from the double-increment projection
/// `E[f(mu_t) dB^i(bin1) dB^i(bin2)] / (|bin1| |bin2|)` over disjoint bins.
#[allow(clippy::too_many_arguments)]
pub fn projection_kernel_order2(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    bin1: (f64, f64),
    bin2: (f64, f64),
    i: usize,
    fields: &FieldSet,
    replicas: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<ChaosKernelEstimate> {
    let steps = grid_steps(t, cfg.dt)?;
    let to_range = |bin: (f64, f64)| -> Result<(usize, usize)> {
        let a = grid_steps(bin.0, cfg.dt)?;
        let b = grid_steps(bin.1, cfg.dt)?;
        if a >= b || b > steps {
            return Err(Error::InvalidGrid(format!("bad bin {bin:?}")));
        }
        Ok((a, b))
    };
    let (a1, b1) = to_range(bin1)?;
    let (a2, b2) = to_range(bin2)?;
    if b1 > a2 {
        return Err(Error::InvalidGrid(
            "order-2 projection bins must be disjoint and ordered".into(),
        ));
    }
    let w1 = (b1 - a1) as f64 * cfg.dt;
    let w2 = (b2 - a2) as f64 * cfg.dt;

    let vals: Vec<Result<Option<(f64, f64)>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = stream_for(seed, &["proj2"], r);
            let noise = simulate_noise(fields.n_noise(), t, cfg.dt, seed, stream)?;
            let run_cfg = SolverConfig { save_stride: steps, ..*cfg };
            match solve_interacting_flow(mu, fields, &noise, &[], &run_cfg) {
                Ok(sol) => {
                    let y = func.value(sol.final_measure());
                    let s1 = noise.window_sum(i, a1, b1);
                    let s2 = noise.window_sum(i, a2, b2);
                    Ok(Some((y, s1 * s2 / (w1 * w2))))
                }
                Err(Error::NonFinite(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut ys = Vec::with_capacity(replicas);
    let mut ss = Vec::with_capacity(replicas);
    for v in vals {
        if let Some((y, s)) = v? {
            ys.push(y);
            ss.push(s);
        }
    }
    // Same centering control variate as the order-1 projection (disjoint
    // bins give E[dB(b1) dB(b2)] = 0).
    let y_mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    let values: Vec<f64> = ys.iter().zip(&ss).map(|(y, s)| (y - y_mean) * s).collect();
    let (value, stderr) = mean_stderr(&values);
    Ok(ChaosKernelEstimate {
        order: 2,
        noise_index: i,
        taus: vec![(bin1.0 + bin1.1) / 2.0, (bin2.0 + bin2.1) / 2.0],
        method: KernelMethod::ProjectionRegression,
        value,
        stderr,
        outer_n: values.len(),
        inner_n: 0,
        eps: 0.0,
    })
}

/// One mixed-index projection `E[f(mu_t) dB^i(b1) dB^j(b2)]`, `i != j`.
#[derive(Debug, Clone)]
pub struct MixedProjection {
    pub i: usize,
    pub j: usize,
    pub bin_i: usize,
    pub bin_j: usize,
    pub value: f64,
    pub stderr: f64,
}

/// Variance budget of the chaos expansion at horizon `t`.
#[derive(Debug, Clone)]
pub struct TruncationReport {
    pub t: f64,
    pub replicas: usize,
    /// Zeroth coefficient; equals `estimate_semigroup` with the same inputs.
    pub mean: f64,
    pub variance: f64,
    /// Bin width of the projection grid.
    pub bin_width: f64,
    /// Per noise index: bin-averaged kernel estimates with standard errors.
    pub kernels: Vec<Vec<(f64, f64)>>,
    /// Per noise index: `∫ a_1(tau)^2 dtau` from the binned projections.
    pub first_order_integrals: Vec<f64>,
    /// Share of the variance captured by the first chaos.
    pub first_order_share: f64,
    pub residual_share: f64,
    /// Mixed-index projections, reported but never folded into the budget.
    pub mixed: Vec<MixedProjection>,
}

/// Assemble the variance budget `Var f(mu_t) ~ sum_i ∫ a_1^i(tau)^2 dtau +
/// higher order` from one batch of simulations.
#[allow(clippy::too_many_arguments)]
pub fn truncation_diagnostics(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    t: f64,
    fields: &FieldSet,
    replicas: usize,
    bins: usize,
    cfg: &SolverConfig,
    seed: u64,
    antithetic: bool,
) -> Result<TruncationReport> {
    let steps = grid_steps(t, cfg.dt)?;
    if bins == 0 || steps % bins != 0 {
        return Err(Error::InvalidGrid(format!("{steps} steps not divisible into {bins} bins")));
    }
    let (values, paths, _diverged) =
        terminal_samples(func, mu, t, fields, cfg, replicas, seed, antithetic, true)?;
    let n = values.len();
    let steps_per_bin = steps / bins;
    let bin_width = t / bins as f64;
    let n_noise = fields.n_noise();

    let mean = if antithetic {
        let pair_means: Vec<f64> =
            values.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        mean_stderr(&pair_means).0
    } else {
        mean_stderr(&values).0
    };
    let variance = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };

    // First-order projections per noise index and bin, with the mean of f
    // subtracted as a control variate (exact zeros for constant f). With
    // antithetic pairing, statistics run over pair aggregates (the partner's
    // window sum has flipped sign).
    let mut kernels: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n_noise);
    let mut integrals = Vec::with_capacity(n_noise);
    for i in 0..n_noise {
        let mut per_bin = Vec::with_capacity(bins);
        let mut integral = 0.0;
        for b in 0..bins {
            let samples: Vec<f64> = if antithetic {
                values
                    .chunks(2)
                    .zip(paths.chunks(2))
                    .map(|(vs, ps)| {
                        let mut acc = 0.0;
                        for (v, p) in vs.iter().zip(ps) {
                            let s = p.window_sum(i, b * steps_per_bin, (b + 1) * steps_per_bin);
                            acc += (v - mean) * s;
                        }
                        acc / vs.len() as f64 / bin_width
                    })
                    .collect()
            } else {
                values
                    .iter()
                    .zip(&paths)
                    .map(|(v, p)| {
                        (v - mean) * p.window_sum(i, b * steps_per_bin, (b + 1) * steps_per_bin)
                            / bin_width
                    })
                    .collect()
            };
            let (est, se) = mean_stderr(&samples);
            // est^2 overshoots a_1^2 by its own sampling variance; debias so
            // near-pure-first-chaos models do not report shares above one.
            integral += (est * est - se * se).max(0.0) * bin_width;
            per_bin.push((est, se));
        }
        kernels.push(per_bin);
        integrals.push(integral);
    }

    let first_sum: f64 = integrals.iter().sum();
    let first_order_share = if variance > 0.0 { (first_sum / variance).min(1.0) } else { 0.0 };

    // Mixed-index projections over ordered disjoint bin pairs.
    let mut mixed = Vec::new();
    for i in 0..n_noise {
        for j in 0..n_noise {
            if i == j {
                continue;
            }
            for b1 in 0..bins {
                for b2 in (b1 + 1)..bins {
                    let samples: Vec<f64> = values
                        .iter()
                        .zip(&paths)
                        .map(|(v, p)| {
                            let s1 = p.window_sum(i, b1 * steps_per_bin, (b1 + 1) * steps_per_bin);
                            let s2 = p.window_sum(j, b2 * steps_per_bin, (b2 + 1) * steps_per_bin);
                            (v - mean) * s1 * s2 / (bin_width * bin_width)
                        })
                        .collect();
                    let (value, stderr) = mean_stderr(&samples);
                    mixed.push(MixedProjection { i, j, bin_i: b1, bin_j: b2, value, stderr });
                }
            }
        }
    }

    Ok(TruncationReport {
        t,
        replicas: n,
        mean,
        variance,
        bin_width,
        kernels,
        first_order_integrals: integrals,
        first_order_share,
        residual_share: (1.0 - first_order_share).max(0.0),
        mixed,
    })
}

/// Chebyshev-Lobatto nodes on `[0, t]` snapped to the solver grid, endpoints
/// included, deduplicated.
pub fn kernel_grid(t: f64, dt: f64, count: usize) -> Result<Vec<f64>> {
    let steps = grid_steps(t, dt)?;
    let count = count.max(2);
    let mut out: Vec<usize> = Vec::new();
    for j in 0..count {
        let theta = std::f64::consts::PI * j as f64 / (count - 1) as f64;
        let tau = 0.5 * t * (1.0 - theta.cos());
        let idx = ((tau / dt).round() as usize).min(steps);
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out.sort_unstable();
    Ok(out.into_iter().map(|k| k as f64 * dt).collect())
}
