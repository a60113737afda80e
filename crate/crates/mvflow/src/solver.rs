//! The interacting-flow solver.
//!
//! Carrier particles define the empirical measure; tracked points ride the
//! same noise without feeding back into it. Within a step the measure is
//! frozen at its start-of-step snapshot and updated only after every entity
//! has moved, matching the frozen-measure Picard structure the iterative
//! construction uses.
//!
//! Primary scheme: Stratonovich-Heun with exact retractions. Cross-check
//! scheme: Ito-Euler with the analytic drift correction. Both consume the
//! same counter-based [`NoisePath`], so any two runs that share a path are
//! driven by literally the same Brownian increments (common random numbers).

use crate::error::{Error, Result};
use crate::fields::{ito_correction, FrozenField, InteractionField};
use crate::geometry::Manifold;
use crate::measure::EmpiricalMeasure;
use crate::noise::{simulate_noise, NoisePath};
use crate::rng::derive_stream_indexed;
use crate::Vector;
use rayon::prelude::*;

/// Drift plus diffusion fields on one manifold.
#[derive(Debug, Clone)]
pub struct FieldSet {
    pub drift: InteractionField,
    pub diffusions: Vec<InteractionField>,
}

impl FieldSet {
    pub fn new(drift: InteractionField, diffusions: Vec<InteractionField>) -> Result<Self> {
        let m = drift.manifold;
        if diffusions.iter().any(|f| f.manifold != m) {
            return Err(Error::ManifoldMismatch("field set spans several manifolds".into()));
        }
        Ok(FieldSet { drift, diffusions })
    }

    pub fn manifold(&self) -> Manifold {
        self.drift.manifold
    }

    pub fn n_noise(&self) -> usize {
        self.diffusions.len()
    }

    pub fn is_all_zero_diffusion(&self) -> bool {
        self.diffusions.iter().all(InteractionField::is_zero)
    }

    pub(crate) fn freeze<'a>(&'a self, support: &'a [Vector], weights: &'a [f64]) -> FrozenSet<'a> {
        FrozenSet {
            manifold: self.manifold(),
            drift: self.drift.freeze(support, weights),
            diffusions: self.diffusions.iter().map(|f| f.freeze(support, weights)).collect(),
        }
    }
}

/// All fields frozen against one measure snapshot.
pub(crate) struct FrozenSet<'a> {
    pub manifold: Manifold,
    pub drift: FrozenField<'a>,
    pub diffusions: Vec<FrozenField<'a>>,
}

impl<'a> FrozenSet<'a> {
    /// Tangent increment `V_0(x) dt + sum_i V_i(x) dB_i` at `x`.
    pub fn combined_increment(&self, x: &Vector, dt: f64, db: &[f64]) -> Vector {
        let mut acc = self.drift.eval(x) * dt;
        for (f, &b) in self.diffusions.iter().zip(db) {
            acc.axpy(b, &f.eval(x), 1.0);
        }
        acc
    }

    /// One Stratonovich-Heun step; returns `(predictor, new_state)`.
    pub fn heun_step(&self, x: &Vector, dt: f64, db: &[f64]) -> (Vector, Vector) {
        let m = self.manifold;
        let d1 = self.combined_increment(x, dt, db);
        let star = m.retract(x, &d1);
        let d2 = self.combined_increment(&star, dt, db);
        let avg = (d1 + m.project_tangent(x, &d2)) * 0.5;
        let new = m.retract(x, &avg);
        (star, new)
    }

    /// One Ito-Euler step with the Stratonovich-matching drift correction.
    pub fn ito_step(&self, x: &Vector, dt: f64, db: &[f64], renormalize: bool) -> Result<Vector> {
        let m = self.manifold;
        let mut step = self.drift.eval(x);
        if !self.diffusions.is_empty() {
            step += ito_correction(&self.diffusions, x)?;
        }
        step *= dt;
        for (f, &b) in self.diffusions.iter().zip(db) {
            step.axpy(b, &f.eval(x), 1.0);
        }
        let raw = x + step;
        if renormalize {
            m.project(&raw)
        } else {
            Ok(raw)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    StratonovichHeun,
    ItoEulerCorrected,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub dt: f64,
    /// Keep every `save_stride`-th snapshot (t = 0 and the endpoint always).
    pub save_stride: usize,
    /// Project states back to the manifold each step (Ito scheme only; the
    /// Heun scheme retracts and needs no renormalization).
    pub renormalize: bool,
}

impl SolverConfig {
    pub fn heun(dt: f64) -> Self {
        SolverConfig { scheme: Scheme::StratonovichHeun, dt, save_stride: 1, renormalize: true }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.save_stride = stride.max(1);
        self
    }
}

/// Trajectory of the measure and of tracked points on the save grid.
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub manifold: Manifold,
    /// Save times, starting at 0 and ending at the horizon.
    pub times: Vec<f64>,
    /// Measure snapshots at `times` (pushforwards of the initial measure).
    pub measures: Vec<EmpiricalMeasure>,
    /// `tracked[j]` is the trajectory of tracked point `j` over `times`.
    pub tracked: Vec<Vec<Vector>>,
}

impl FlowSolution {
    pub fn initial_measure(&self) -> &EmpiricalMeasure {
        &self.measures[0]
    }

    pub fn final_measure(&self) -> &EmpiricalMeasure {
        self.measures.last().expect("nonempty path")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("nonempty path")
    }
}

pub(crate) enum MeasureSource<'a> {
    /// Freeze against the current carrier positions (the coupled system).
    SelfConsistent,
    /// Freeze against a prescribed per-step support path (Picard iterate).
    FrozenPath(&'a [Vec<Vector>]),
}

fn check_setup(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    cfg: &SolverConfig,
) -> Result<()> {
    if fields.manifold() != initial.manifold() {
        return Err(Error::ManifoldMismatch(format!(
            "fields on {}, initial measure on {}",
            fields.manifold().spec_string(),
            initial.manifold().spec_string()
        )));
    }
    if noise.n_noise != fields.n_noise() {
        return Err(Error::InvalidGrid(format!(
            "{} diffusion fields driven by {} Brownian motions",
            fields.n_noise(),
            noise.n_noise
        )));
    }
    if (noise.dt - cfg.dt).abs() > 1e-12 * cfg.dt.max(1.0) {
        return Err(Error::InvalidGrid(format!(
            "noise dt {} does not match solver dt {}",
            noise.dt, cfg.dt
        )));
    }
    Ok(())
}

/// Integrate the coupled system: carriers define the measure, tracked points
/// follow the same increments.
pub fn solve_interacting_flow(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    tracked: &[Vector],
    cfg: &SolverConfig,
) -> Result<FlowSolution> {
    solve_with_source(initial, fields, noise, tracked, cfg, MeasureSource::SelfConsistent, None)
}

/// As [`solve_interacting_flow`], but records the carrier support at every
/// grid step into `full_path` (needed by Picard and the Ito-formula checks).
pub(crate) fn solve_with_source(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    tracked: &[Vector],
    cfg: &SolverConfig,
    source: MeasureSource<'_>,
    mut full_path: Option<&mut Vec<Vec<Vector>>>,
) -> Result<FlowSolution> {
    check_setup(initial, fields, noise, cfg)?;
    let m = fields.manifold();
    let weights = initial.weights().to_vec();
    let mut carriers: Vec<Vector> = initial.points().to_vec();
    let mut carriers_next = carriers.clone();
    let mut tracked_state: Vec<Vector> = tracked.to_vec();
    for u in &tracked_state {
        if !m.is_on_manifold(u, 1e-8) {
            return Err(Error::ManifoldMismatch("tracked point off manifold".into()));
        }
    }

    let steps = noise.steps;
    let mut times = vec![0.0];
    let mut measures = vec![initial.clone()];
    let mut tracked_path: Vec<Vec<Vector>> =
        tracked_state.iter().map(|u| vec![u.clone()]).collect();
    if let Some(path) = full_path.as_deref_mut() {
        path.clear();
        path.push(carriers.clone());
    }

    let mut db = vec![0.0f64; noise.n_noise];
    for step in 0..steps {
        for (i, b) in db.iter_mut().enumerate() {
            *b = noise.increments[(i, step)];
        }
        {
            let support: &[Vector] = match &source {
                MeasureSource::SelfConsistent => &carriers,
                MeasureSource::FrozenPath(path) => &path[step],
            };
            let frozen = fields.freeze(support, &weights);
            match cfg.scheme {
                Scheme::StratonovichHeun => {
                    for (x, out) in carriers.iter().zip(carriers_next.iter_mut()) {
                        *out = frozen.heun_step(x, cfg.dt, &db).1;
                    }
                    for u in tracked_state.iter_mut() {
                        *u = frozen.heun_step(u, cfg.dt, &db).1;
                    }
                }
                Scheme::ItoEulerCorrected => {
                    for (x, out) in carriers.iter().zip(carriers_next.iter_mut()) {
                        *out = frozen.ito_step(x, cfg.dt, &db, cfg.renormalize)?;
                    }
                    for u in tracked_state.iter_mut() {
                        *u = frozen.ito_step(u, cfg.dt, &db, cfg.renormalize)?;
                    }
                }
            }
        }
        std::mem::swap(&mut carriers, &mut carriers_next);

        // Divergence guard: poison nothing, report the replica.
        for x in carriers.iter().chain(tracked_state.iter()) {
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "state diverged at step {step} (t = {})",
                    (step + 1) as f64 * cfg.dt
                )));
            }
        }

        if let Some(path) = full_path.as_deref_mut() {
            path.push(carriers.clone());
        }
        let is_save = (step + 1) % cfg.save_stride == 0 || step + 1 == steps;
        if is_save {
            times.push((step + 1) as f64 * cfg.dt);
            let snap = if cfg.renormalize || cfg.scheme == Scheme::StratonovichHeun {
                EmpiricalMeasure::new(m, carriers.clone(), weights.clone())?
            } else {
                // No-renormalize mode stores the raw, slightly off-manifold states.
                EmpiricalMeasure::new_unchecked(m, carriers.clone(), weights.clone())
            };
            measures.push(snap);
            for (j, u) in tracked_state.iter().enumerate() {
                tracked_path[j].push(u.clone());
            }
        }
    }

    Ok(FlowSolution { manifold: m, times, measures, tracked: tracked_path })
}

/// Frozen-measure Picard iteration.
///
/// Iterate 0 freezes the constant path `mu_t = mu_0`; iterate `k` solves the
/// classical SDE against iterate `k-1`'s measure path, all under one noise
/// path. Returns all `iterations` iterates in order.
pub fn picard_solve(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    tracked: &[Vector],
    cfg: &SolverConfig,
    iterations: usize,
) -> Result<Vec<FlowSolution>> {
    if iterations == 0 {
        return Err(Error::InvalidInput("picard_solve needs at least one iteration".into()));
    }
    let steps = noise.steps;
    let mut prev_path: Vec<Vec<Vector>> = vec![initial.points().to_vec(); steps + 1];
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut next_path = Vec::with_capacity(steps + 1);
        let sol = solve_with_source(
            initial,
            fields,
            noise,
            tracked,
            cfg,
            MeasureSource::FrozenPath(&prev_path),
            Some(&mut next_path),
        )?;
        prev_path = next_path;
        out.push(sol);
    }
    Ok(out)
}

/// Largest Wasserstein gap between two solutions over their common save grid.
pub fn sup_measure_gap(a: &FlowSolution, b: &FlowSolution) -> Result<f64> {
    let mut sup = 0.0f64;
    for (ma, mb) in a.measures.iter().zip(&b.measures) {
        sup = sup.max(ma.wasserstein2(mb)?);
    }
    Ok(sup)
}

/// Monte Carlo statistics from [`estimate_stability`].
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub initial_gap: f64,
    /// Mean and standard error of `sup_t w2(mu_t, nu_t)^p / w2(mu_0, nu_0)^p`
    /// for p = 2 and p = 4 (ratio is 0 when the initial gap vanishes).
    pub ratio_p2: (f64, f64),
    pub ratio_p4: (f64, f64),
    /// Same ratio for tracked pairs against `d(u,v)^p + w2(mu_0,nu_0)^p`.
    pub tracked_ratio_p2: Option<(f64, f64)>,
    pub replicas: usize,
    pub diverged: usize,
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

/// Couple two initial measures through common noise and measure how the
/// Wasserstein gap propagates.
#[allow(clippy::too_many_arguments)]
pub fn estimate_stability(
    mu0: &EmpiricalMeasure,
    nu0: &EmpiricalMeasure,
    fields: &FieldSet,
    cfg: &SolverConfig,
    horizon: f64,
    tracked_pairs: &[(Vector, Vector)],
    replicas: usize,
    seed: u64,
) -> Result<StabilityReport> {
    let initial_gap = mu0.wasserstein2(nu0)?;
    let tracked_mu: Vec<Vector> = tracked_pairs.iter().map(|(u, _)| u.clone()).collect();
    let tracked_nu: Vec<Vector> = tracked_pairs.iter().map(|(_, v)| v.clone()).collect();

    #[allow(clippy::type_complexity)]
    let results: Vec<Result<Option<(f64, f64, Option<f64>)>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = derive_stream_indexed(seed, &["stability"], r as u64);
            let noise = simulate_noise(fields.n_noise(), horizon, cfg.dt, seed, stream)?;
            let sol_mu = solve_interacting_flow(mu0, fields, &noise, &tracked_mu, cfg);
            let sol_nu = solve_interacting_flow(nu0, fields, &noise, &tracked_nu, cfg);
            let (sol_mu, sol_nu) = match (sol_mu, sol_nu) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(Error::NonFinite(_)), _) | (_, Err(Error::NonFinite(_))) => return Ok(None),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            // Sup over t > 0: the t = 0 gap is deterministic and would pin
            // the statistic at 1 for contractive dynamics.
            let mut sup2 = 0.0f64;
            for (ma, mb) in sol_mu.measures.iter().zip(&sol_nu.measures).skip(1) {
                let g = ma.wasserstein2(mb)?;
                sup2 = sup2.max(g * g);
            }
            let tracked_sup = if tracked_pairs.is_empty() {
                None
            } else {
                let m = fields.manifold();
                let mut sup = 0.0f64;
                for (pa, pb) in sol_mu.tracked.iter().zip(&sol_nu.tracked) {
                    for (xa, xb) in pa.iter().zip(pb).skip(1) {
                        let d = m.distance(xa, xb);
                        sup = sup.max(d * d);
                    }
                }
                Some(sup)
            };
            Ok(Some((sup2, sup2 * sup2, tracked_sup)))
        })
        .collect();

    let mut sups2 = Vec::new();
    let mut sups4 = Vec::new();
    let mut tracked2 = Vec::new();
    let mut diverged = 0usize;
    for r in results {
        match r? {
            Some((s2, s4, t2)) => {
                sups2.push(s2);
                sups4.push(s4);
                if let Some(t) = t2 {
                    tracked2.push(t);
                }
            }
            None => diverged += 1,
        }
    }

    let normalize = |(mean, se): (f64, f64), denom: f64| {
        if mean == 0.0 {
            (0.0, 0.0)
        } else {
            (mean / denom, se / denom)
        }
    };

    let g2 = initial_gap * initial_gap;
    let ratio_p2 = normalize(mean_stderr(&sups2), g2.max(f64::MIN_POSITIVE));
    let ratio_p4 = normalize(mean_stderr(&sups4), (g2 * g2).max(f64::MIN_POSITIVE));
    let tracked_ratio_p2 = if tracked2.is_empty() {
        None
    } else {
        let m = fields.manifold();
        let denom: f64 = tracked_pairs.iter().map(|(u, v)| m.distance(u, v).powi(2)).sum::<f64>()
            / tracked_pairs.len() as f64
            + g2;
        Some(normalize(mean_stderr(&tracked2), denom.max(f64::MIN_POSITIVE)))
    };

    Ok(StabilityReport {
        initial_gap,
        ratio_p2,
        ratio_p4,
        tracked_ratio_p2,
        replicas: replicas - diverged,
        diverged,
    })
}

/// Strong self-convergence study over a dyadic step ladder with common noise.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub dts: Vec<f64>,
    /// Mean sup-distance between consecutive ladder levels.
    pub gaps: Vec<f64>,
    /// Fitted order: least-squares slope of log2(gap) against ladder level.
    pub order: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn convergence_order(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    base_cfg: &SolverConfig,
    horizon: f64,
    tracked: &[Vector],
    dts: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if dts.len() < 2 {
        return Err(Error::InvalidInput("convergence ladder needs at least two dts".into()));
    }
    for w in dts.windows(2) {
        let ratio = w[0] / w[1];
        if (ratio - 2.0).abs() > 1e-9 {
            return Err(Error::InvalidGrid(
                "convergence ladder must be dyadic (coarse to fine)".into(),
            ));
        }
    }
    let finest = *dts.last().unwrap();

    let per_replica: Vec<Result<Vec<f64>>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = derive_stream_indexed(seed, &["convergence"], r as u64);
            let fine_noise = simulate_noise(fields.n_noise(), horizon, finest, seed, stream)?;
            let mut solutions = Vec::with_capacity(dts.len());
            for &dt in dts {
                let factor = (dt / finest).round() as usize;
                let noise =
                    if factor == 1 { fine_noise.clone() } else { fine_noise.coarsen(factor)? };
                // Compare on the coarsest grid save times.
                let stride = (dts[0] / dt).round() as usize;
                let cfg = SolverConfig { dt, save_stride: stride, ..*base_cfg };
                solutions.push(solve_interacting_flow(initial, fields, &noise, tracked, &cfg)?);
            }
            let m = fields.manifold();
            let mut gaps = Vec::with_capacity(dts.len() - 1);
            for pair in solutions.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let mut sup = 0.0f64;
                for (ma, mb) in a.measures.iter().zip(&b.measures) {
                    sup = sup.max(ma.wasserstein2(mb)?);
                }
                for (pa, pb) in a.tracked.iter().zip(&b.tracked) {
                    for (xa, xb) in pa.iter().zip(pb) {
                        sup = sup.max(m.distance(xa, xb));
                    }
                }
                gaps.push(sup);
            }
            Ok(gaps)
        })
        .collect();

    let mut gaps = vec![0.0f64; dts.len() - 1];
    let mut count = 0usize;
    for r in per_replica {
        let g = r?;
        for (acc, v) in gaps.iter_mut().zip(&g) {
            *acc += v;
        }
        count += 1;
    }
    for g in gaps.iter_mut() {
        *g /= count as f64;
    }

    // Ladder regression: levels are log2-equispaced, so the order is the
    // least-squares slope of log2(gap) against the level index.
    let order = if gaps.iter().all(|&g| g > 1e-15) {
        let n = gaps.len() as f64;
        let lbar = (n - 1.0) / 2.0;
        let ybar = gaps.iter().map(|g| g.log2()).sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for (l, g) in gaps.iter().enumerate() {
            let dl = l as f64 - lbar;
            num += dl * (g.log2() - ybar);
            den += dl * dl;
        }
        if den > 0.0 {
            Some(-num / den)
        } else {
            None
        }
    } else {
        None
    };

    Ok(ConvergenceReport { dts: dts.to_vec(), gaps, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{InteractionKernel, MomentMap};
    use crate::rng::CounterRng;
    use crate::vec_from;

    fn sphere_measure(n: usize, seed: u64) -> EmpiricalMeasure {
        let mut rng = CounterRng::new(seed, 0);
        let pts = Manifold::sphere(2).sample_uniform(n, &mut rng).unwrap();
        EmpiricalMeasure::uniform(Manifold::sphere(2), pts).unwrap()
    }

    fn rotation_field(scale: f64) -> InteractionField {
        InteractionField::autonomous(
            Manifold::sphere(2),
            MomentMap::AxisRotation { axis: 2, scale },
        )
    }

    fn zero_fields(m: Manifold, n_noise: usize) -> FieldSet {
        FieldSet::new(
            InteractionField::zero(m),
            (0..n_noise).map(|_| InteractionField::zero(m)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_fields_identity_flow() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(10, 1);
        let fields = zero_fields(m, 2);
        let noise = simulate_noise(2, 0.5, 0.01, 7, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(10);
        let tracked = [mu.points()[0].clone()];
        let sol = solve_interacting_flow(&mu, &fields, &noise, &tracked, &cfg).unwrap();
        for snap in &sol.measures {
            for (a, b) in snap.points().iter().zip(mu.points()) {
                assert_eq!(a, b, "zero fields must give a bitwise identity flow");
            }
        }
        for x in &sol.tracked[0] {
            assert_eq!(x, &tracked[0]);
        }
    }

    #[test]
    fn deterministic_rotation_oracle() {
        // Drift = rotation about e3; the tracked equator point advances by
        // the elapsed angle exactly.
        let _m = Manifold::sphere(2);
        let mu = sphere_measure(5, 2);
        let fields = FieldSet::new(rotation_field(1.0), vec![]).unwrap();
        let t = std::f64::consts::FRAC_PI_2;
        let steps = 1571usize;
        let dt = t / steps as f64;
        let noise = simulate_noise(0, t, dt, 0, 0).unwrap();
        let cfg = SolverConfig::heun(dt).with_stride(steps);
        let tracked = [vec_from(&[1.0, 0.0, 0.0])];
        let sol = solve_interacting_flow(&mu, &fields, &noise, &tracked, &cfg).unwrap();
        let end = sol.tracked[0].last().unwrap();
        assert!(
            (end - vec_from(&[0.0, 1.0, 0.0])).norm() < 1e-6,
            "rotation endpoint error {}",
            (end - vec_from(&[0.0, 1.0, 0.0])).norm()
        );
    }

    #[test]
    fn carrier_permutation_equivariance() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(12, 3);
        let permuted =
            EmpiricalMeasure::uniform(m, mu.points().iter().rev().cloned().collect()).unwrap();
        let drift = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let fields = FieldSet::new(drift, vec![rotation_field(0.5)]).unwrap();
        let noise = simulate_noise(1, 0.2, 0.01, 11, 4).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(5);
        let tracked = [mu.points()[2].clone()];
        let a = solve_interacting_flow(&mu, &fields, &noise, &tracked, &cfg).unwrap();
        let b = solve_interacting_flow(&permuted, &fields, &noise, &tracked, &cfg).unwrap();
        for (ma, mb) in a.measures.iter().zip(&b.measures) {
            assert!(ma.wasserstein2(mb).unwrap() < 1e-10);
        }
        for (xa, xb) in a.tracked[0].iter().zip(&b.tracked[0]) {
            assert!((xa - xb).norm() < 1e-10);
        }
    }

    #[test]
    fn on_manifold_invariant_after_every_step() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(8, 5);
        let drift = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let fields = FieldSet::new(drift, vec![rotation_field(0.6), rotation_field(-0.3)]).unwrap();
        let noise = simulate_noise(2, 0.3, 5e-3, 13, 1).unwrap();
        let cfg = SolverConfig::heun(5e-3);
        let sol = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
        for snap in &sol.measures {
            for p in snap.points() {
                assert!(m.off_manifold_residual(p) < 1e-10);
            }
        }
    }

    #[test]
    fn ito_without_renormalize_drifts_off_slowly() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(6, 6);
        let fields = FieldSet::new(InteractionField::zero(m), vec![rotation_field(1.0)]).unwrap();
        let dt = 1e-3;
        let noise = simulate_noise(1, 0.1, dt, 17, 2).unwrap();
        let cfg = SolverConfig {
            scheme: Scheme::ItoEulerCorrected,
            dt,
            save_stride: 1,
            renormalize: false,
        };
        let sol = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
        // Off-manifold drift accumulates like O(dt^{3/2}) per step; after
        // 100 steps it stays around 100 * dt^{3/2} but clearly nonzero.
        let worst = sol
            .measures
            .last()
            .unwrap()
            .points()
            .iter()
            .map(|p| m.off_manifold_residual(p))
            .fold(0.0f64, f64::max);
        assert!(worst > 0.0);
        assert!(worst < 100.0 * dt, "drift {worst} too large");
    }

    #[test]
    fn common_noise_zero_fields_keeps_gap_constant() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(10, 7);
        let nu = sphere_measure(10, 8);
        let fields = zero_fields(m, 1);
        let cfg = SolverConfig::heun(0.01).with_stride(5);
        let report = estimate_stability(&mu, &nu, &fields, &cfg, 0.2, &[], 4, 99).unwrap();
        assert!((report.ratio_p2.0 - 1.0).abs() < 1e-9);
        assert!((report.ratio_p4.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stability_zero_perturbation_is_exactly_zero() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(10, 9);
        let drift = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let fields = FieldSet::new(drift, vec![rotation_field(0.4)]).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(5);
        let report = estimate_stability(&mu, &mu, &fields, &cfg, 0.1, &[], 3, 5).unwrap();
        assert_eq!(report.initial_gap, 0.0);
        assert_eq!(report.ratio_p2.0, 0.0);
    }

    #[test]
    fn picard_measure_free_fields_converge_in_one_iteration() {
        let _m = Manifold::sphere(2);
        let mu = sphere_measure(10, 10);
        let fields = FieldSet::new(rotation_field(1.0), vec![rotation_field(0.5)]).unwrap();
        let noise = simulate_noise(1, 0.3, 0.01, 23, 5).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(6);
        let sols = picard_solve(&mu, &fields, &noise, &[], &cfg, 3).unwrap();
        // Measure-independent dynamics: all iterates identical bitwise.
        for k in 1..sols.len() {
            for (ma, mb) in sols[0].measures.iter().zip(&sols[k].measures) {
                for (a, b) in ma.points().iter().zip(mb.points()) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn picard_contracts_and_matches_direct_solver() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(30, 11);
        let drift = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let fields = FieldSet::new(drift, vec![rotation_field(0.5)]).unwrap();
        let noise = simulate_noise(1, 0.3, 5e-3, 31, 6).unwrap();
        let cfg = SolverConfig::heun(5e-3).with_stride(10);
        let k = 6;
        let sols = picard_solve(&mu, &fields, &noise, &[], &cfg, k).unwrap();
        let mut gaps = Vec::new();
        for pair in sols.windows(2) {
            gaps.push(sup_measure_gap(&pair[0], &pair[1]).unwrap());
        }
        // Geometric decay of iterate gaps.
        for w in gaps.windows(2) {
            assert!(w[1] < 0.9 * w[0], "gaps not contracting: {gaps:?}");
        }
        // The limit matches the direct coupled solver.
        let direct = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
        let final_gap = sup_measure_gap(sols.last().unwrap(), &direct).unwrap();
        assert!(final_gap <= 3.0 * gaps.last().unwrap() + 1e-12, "{final_gap} vs {gaps:?}");
    }

    #[test]
    fn convergence_zero_fields_all_gaps_zero() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(6, 12);
        let fields = zero_fields(m, 1);
        let cfg = SolverConfig::heun(0.01);
        let report =
            convergence_order(&mu, &fields, &cfg, 0.16, &[], &[0.04, 0.02, 0.01], 2, 77).unwrap();
        assert!(report.gaps.iter().all(|&g| g == 0.0));
        assert!(report.order.is_none());
    }

    #[test]
    fn convergence_deterministic_drift_is_second_order() {
        // Measure-free smooth drift: Heun is second order. (With measure
        // coupling the frozen-measure step caps the deterministic order at
        // one; that regime is covered by the noisy ladder elsewhere.)
        let _m = Manifold::sphere(2);
        let mu = sphere_measure(6, 13);
        let fields = FieldSet::new(rotation_field(1.0), vec![]).unwrap();
        let cfg = SolverConfig::heun(0.01);
        let report = convergence_order(
            &mu,
            &fields,
            &cfg,
            0.32,
            &[mu.points()[0].clone()],
            &[0.04, 0.02, 0.01, 0.005],
            1,
            78,
        )
        .unwrap();
        let order = report.order.unwrap();
        assert!((1.7..=2.3).contains(&order), "order {order}, gaps {:?}", report.gaps);
    }

    fn scheme_gap_slope(fields: &FieldSet, mu: &EmpiricalMeasure, seed: u64) -> f64 {
        let m = fields.manifold();
        let tracked = [mu.points()[0].clone()];
        let mut gaps = vec![0.0f64; 3];
        let replicas = 8;
        for r in 0..replicas {
            for (level, &dt) in [4e-3, 2e-3, 1e-3].iter().enumerate() {
                let noise = simulate_noise(fields.n_noise(), 0.256, dt, seed, r as u64).unwrap();
                let heun = SolverConfig::heun(dt).with_stride(noise.steps);
                let ito = SolverConfig {
                    scheme: Scheme::ItoEulerCorrected,
                    dt,
                    save_stride: noise.steps,
                    renormalize: true,
                };
                let a = solve_interacting_flow(mu, fields, &noise, &tracked, &heun).unwrap();
                let b = solve_interacting_flow(mu, fields, &noise, &tracked, &ito).unwrap();
                gaps[level] += m
                    .distance(a.tracked[0].last().unwrap(), b.tracked[0].last().unwrap())
                    / replicas as f64;
            }
        }
        (gaps[0] / gaps[2]).log2() / 2.0
    }

    #[test]
    fn scheme_consistency_heun_vs_corrected_ito() {
        // The two schemes converge to each other on a dyadic ladder. With
        // additive noise the gap is O(dt); with multiplicative noise the
        // (dB^2 - dt) fluctuation term caps the strong rate near O(sqrt(dt)).
        let e1 = Manifold::euclidean(1);
        let mu1 = EmpiricalMeasure::dirac(e1, vec_from(&[0.2])).unwrap();
        let additive = FieldSet::new(
            InteractionField::autonomous(e1, MomentMap::Identity { scale: -0.5 }),
            vec![InteractionField::autonomous(e1, MomentMap::Constant { v: vec_from(&[1.0]) })],
        )
        .unwrap();
        let slope = scheme_gap_slope(&additive, &mu1, 41);
        assert!((0.75..=2.0).contains(&slope), "additive slope {slope}");

        let m = Manifold::sphere(2);
        let mu = sphere_measure(8, 14);
        let drift = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let multiplicative = FieldSet::new(drift, vec![rotation_field(0.8)]).unwrap();
        let slope = scheme_gap_slope(&multiplicative, &mu, 43);
        assert!((0.3..=2.0).contains(&slope), "multiplicative slope {slope}");
    }

    #[test]
    fn ito_correction_matches_scheme_gap() {
        // Richardson-extrapolated drift gap between the Heun scheme and the
        // uncorrected projected Euler scheme recovers the analytic
        // correction: E[Heun_T - RawEuler_T] ~ T * correction(x0).
        let m = Manifold::sphere(2);
        let x0 = {
            let raw = vec_from(&[0.6, 0.3, 0.74]);
            m.project(&raw).unwrap()
        };
        let field = rotation_field(1.0);
        let mu = EmpiricalMeasure::dirac(m, x0.clone()).unwrap();
        let fields = FieldSet::new(InteractionField::zero(m), vec![field.clone()]).unwrap();
        let t = 0.05;
        let replicas = 20_000;

        let mean_gap = |dt: f64| -> Vector {
            let mut acc = Vector::zeros(3);
            for r in 0..replicas {
                let noise = simulate_noise(1, t, dt, 9000, r as u64).unwrap();
                let cfg = SolverConfig::heun(dt).with_stride(noise.steps);
                let heun =
                    solve_interacting_flow(&mu, &fields, &noise, &[x0.clone()], &cfg).unwrap();
                // Raw Euler without the correction, same path.
                let mut x = x0.clone();
                let frozen = field.at_measure(&mu);
                for j in 0..noise.steps {
                    let step = frozen.eval(&x) * noise.increments[(0, j)];
                    x = m.project(&(x + step)).unwrap();
                }
                acc += heun.tracked[0].last().unwrap() - x;
            }
            acc / replicas as f64
        };
        let g1 = mean_gap(2e-3);
        let g2 = mean_gap(1e-3);
        let extrapolated = (&g2 * 2.0 - g1) / t;
        let frozen = [field.at_measure(&mu)];
        let analytic = ito_correction(&frozen, &x0).unwrap();
        let rel = (extrapolated - &analytic).norm() / analytic.norm();
        assert!(rel < 5e-2, "scheme-gap mismatch {rel}");
    }

    #[test]
    fn torus_flow_matches_angle_advance() {
        // Constant angle advance on the flat torus integrates exactly.
        let m = Manifold::flat_torus(2);
        let theta0 = [0.4f64, 1.9];
        let x0 = crate::geometry::torus_point_from_angles(&theta0);
        let mu = EmpiricalMeasure::dirac(m, x0.clone()).unwrap();
        let advance = InteractionField::autonomous(
            m,
            MomentMap::Custom {
                name: "advance".into(),
                value: std::sync::Arc::new(|x: &Vector, _: &[f64]| {
                    vec_from(&[-x[1], x[0], -0.5 * x[3], 0.5 * x[2]])
                }),
                jacobian_u: std::sync::Arc::new(|_, _| {
                    crate::Matrix::from_row_slice(
                        4,
                        4,
                        &[0., -1., 0., 0., 1., 0., 0., 0., 0., 0., 0., -0.5, 0., 0., 0.5, 0.],
                    )
                }),
                grad_m: std::sync::Arc::new(|x: &Vector, _: &[f64], _| Vector::zeros(x.len())),
            },
        );
        let fields = FieldSet::new(advance, vec![]).unwrap();
        let t = 0.8;
        let dt = 1e-3;
        let noise = simulate_noise(0, t, dt, 0, 0).unwrap();
        let cfg = SolverConfig::heun(dt).with_stride(noise.steps);
        let sol = solve_interacting_flow(&mu, &fields, &noise, &[], &cfg).unwrap();
        let expect =
            crate::geometry::torus_point_from_angles(&[theta0[0] + t, theta0[1] + 0.5 * t]);
        let got = &sol.final_measure().points()[0];
        let err = (got - expect).norm();
        assert!(err < 5e-7, "torus endpoint error {err}");
    }

    #[test]
    fn nonfinite_states_are_reported() {
        // An aggressively unstable scalar SDE blows up in finite time.
        let e1 = Manifold::euclidean(1);
        let mu = EmpiricalMeasure::dirac(e1, vec_from(&[10.0])).unwrap();
        let cubic = InteractionField::autonomous(
            e1,
            MomentMap::Custom {
                name: "cubic".into(),
                value: std::sync::Arc::new(|u: &Vector, _: &[f64]| u * u.norm_squared()),
                jacobian_u: std::sync::Arc::new(|u: &Vector, _: &[f64]| {
                    crate::Matrix::identity(1, 1) * 3.0 * u.norm_squared()
                }),
                grad_m: std::sync::Arc::new(|u: &Vector, _: &[f64], _| Vector::zeros(u.len())),
            },
        );
        let fields = FieldSet::new(cubic, vec![]).unwrap();
        let noise = simulate_noise(0, 10.0, 0.1, 0, 0).unwrap();
        let cfg = SolverConfig::heun(0.1);
        assert!(matches!(
            solve_interacting_flow(&mu, &fields, &noise, &[], &cfg),
            Err(Error::NonFinite(_))
        ));
    }
}
