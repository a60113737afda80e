//! Intrinsic-derivative calculus on the Wasserstein space.
//!
//! Perturbation flows push a measure along a tangent field for a short time
//! `eps`; the induced finite differences are the universal oracle every
//! analytic derivative in this crate is validated against. On top of those
//! sit the empirical-gradient identity, the chain rule residual, and the
//! linearized flows: the Jacobian flow `∇x`, the variational flow
//! `D_I^psi x` (derivative of the solution in its measure argument) and the
//! Malliavin flow `D_s x`. Linearized states are integrated in ambient
//! coordinates with the same Stratonovich-Heun stages as the positions and
//! re-projected onto the current tangent space after every step.

use crate::error::{Error, Result};
use crate::fields::InteractionField;
use crate::functionals::MeasureFunctional;
use crate::geometry::Manifold;
use crate::measure::EmpiricalMeasure;
use crate::noise::NoisePath;
use crate::solver::{FieldSet, SolverConfig};
use crate::{Matrix, Vector};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Direction fields and perturbation flows
// ---------------------------------------------------------------------------

/// A tangent field used as a perturbation direction. Interaction fields are
/// frozen at a fixed measure so the direction does not move with the points
/// it transports.
#[derive(Clone)]
pub enum DirectionField {
    Frozen { field: InteractionField, at: EmpiricalMeasure },
    Closure { manifold: Manifold, f: Arc<dyn Fn(&Vector) -> Vector + Send + Sync> },
}

impl DirectionField {
    pub fn frozen(field: InteractionField, at: EmpiricalMeasure) -> Self {
        DirectionField::Frozen { field, at }
    }

    pub fn from_fn<F>(manifold: Manifold, f: F) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        DirectionField::Closure { manifold, f: Arc::new(f) }
    }

    /// Rotation generator about a coordinate axis (ambient dim 3).
    pub fn rotation(manifold: Manifold, axis: usize, scale: f64) -> Self {
        Self::from_fn(manifold, move |x: &Vector| {
            let (a, b, c) = (axis % 3, (axis + 1) % 3, (axis + 2) % 3);
            let mut out = Vector::zeros(3);
            out[a] = 0.0;
            out[b] = -scale * x[c];
            out[c] = scale * x[b];
            manifold.project_tangent(x, &out)
        })
    }

    pub fn zero(manifold: Manifold) -> Self {
        Self::from_fn(manifold, move |_| Vector::zeros(manifold.ambient_dim()))
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            DirectionField::Frozen { field, .. } => field.manifold,
            DirectionField::Closure { manifold, .. } => *manifold,
        }
    }

    /// Tangent value at `x`.
    pub fn eval(&self, x: &Vector) -> Vector {
        match self {
            DirectionField::Frozen { field, at } => {
                field.manifold.project_tangent(x, &field.at_measure(at).eval(x))
            }
            DirectionField::Closure { manifold, f } => manifold.project_tangent(x, &f(x)),
        }
    }
}

/// Default substep count for a perturbation of size `eps`.
pub fn default_substeps(eps: f64) -> usize {
    ((eps.abs() / 1e-3).ceil() as usize).max(1)
}

/// RK4 integration of `dx/dθ = V(x)` from `x` over time `eps`.
fn flow_point(m: Manifold, dir: &DirectionField, x: &Vector, eps: f64, substeps: usize) -> Vector {
    let h = eps / substeps as f64;
    let mut p = x.clone();
    for _ in 0..substeps {
        let k1 = dir.eval(&p);
        let k2 = dir.eval(&(&p + &k1 * (h / 2.0)));
        let k3 = dir.eval(&(&p + &k2 * (h / 2.0)));
        let k4 = dir.eval(&(&p + &k3 * h));
        let inc = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if inc.norm() == 0.0 {
            continue; // keep stationary points bitwise fixed
        }
        p = m.project(&(&p + inc)).unwrap_or(p);
    }
    p
}

/// Pushforward of `mu` under the time-`eps` flow of `dir` (RK4, projected).
pub fn perturb_measure(
    mu: &EmpiricalMeasure,
    dir: &DirectionField,
    eps: f64,
    substeps: usize,
) -> EmpiricalMeasure {
    if eps == 0.0 {
        return mu.clone();
    }
    let m = mu.manifold();
    mu.pushforward(|x| flow_point(m, dir, x, eps, substeps))
}

/// Central finite difference of `F` along the perturbation flow of `dir`:
/// `(F(mu^{+eps}) - F(mu^{-eps})) / (2 eps)`. The universal derivative oracle.
pub fn fd_intrinsic_directional(
    func: &MeasureFunctional,
    mu: &EmpiricalMeasure,
    dir: &DirectionField,
    eps: f64,
    substeps: usize,
) -> f64 {
    let plus = perturb_measure(mu, dir, eps, substeps);
    let minus = perturb_measure(mu, dir, -eps, substeps);
    (func.value(&plus) - func.value(&minus)) / (2.0 * eps)
}

/// Same oracle for an arbitrary scalar statistic of the measure.
pub fn fd_directional_of<G: Fn(&EmpiricalMeasure) -> f64>(
    g: G,
    mu: &EmpiricalMeasure,
    dir: &DirectionField,
    eps: f64,
    substeps: usize,
) -> f64 {
    let plus = perturb_measure(mu, dir, eps, substeps);
    let minus = perturb_measure(mu, dir, -eps, substeps);
    (g(&plus) - g(&minus)) / (2.0 * eps)
}

// ---------------------------------------------------------------------------
// Empirical-gradient identity and chain rule
// ---------------------------------------------------------------------------

/// Compares the retraction-based gradient of the product-manifold function
/// `(u_1..u_n) -> F(uniform empirical measure)` against `(1/n) D_I F(mu)(u_i)`
/// coordinate by coordinate; returns the largest relative deviation.
pub fn empirical_gradient_identity(
    func: &MeasureFunctional,
    manifold: Manifold,
    points: &[Vector],
    eps: f64,
) -> Result<f64> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidInput("empirical gradient needs points".into()));
    }
    let mu = EmpiricalMeasure::uniform(manifold, points.to_vec())?;
    let mut worst = 0.0f64;
    for i in 0..n {
        let basis = manifold.tangent_basis(&points[i]);
        let analytic = func.intrinsic_kernel(&mu, &points[i]) / n as f64;
        let mut fd_grad = Vector::zeros(manifold.ambient_dim());
        for e in &basis {
            let eval = |sign: f64| {
                let mut pts = points.to_vec();
                pts[i] = manifold.retract(&points[i], &(e * (sign * eps)));
                func.value(&EmpiricalMeasure::uniform(manifold, pts).expect("valid support"))
            };
            let fd = (eval(1.0) - eval(-1.0)) / (2.0 * eps);
            fd_grad += e * fd;
        }
        let denom = analytic.norm().max(1e-3);
        worst = worst.max((fd_grad - analytic).norm() / denom);
    }
    Ok(worst)
}

/// Built-in differentiable point paths `theta -> x_theta` with analytic
/// velocity, for chain-rule checks.
#[derive(Debug, Clone)]
pub enum DeterministicPath {
    /// Rotation about a coordinate axis at unit rate times `rate`.
    Rotation { axis: usize, rate: f64 },
    /// `x_theta(u) = u + theta v` on Euclidean space.
    Translation { v: Vector },
    /// Advance each torus angle by `theta * rates[k]`.
    TorusAdvance { rates: Vec<f64> },
}

impl DeterministicPath {
    pub fn apply(&self, m: Manifold, theta: f64, u: &Vector) -> Vector {
        match self {
            DeterministicPath::Rotation { axis, rate } => {
                let (a, b, c) = (axis % 3, (axis + 1) % 3, (axis + 2) % 3);
                let (s, co) = (rate * theta).sin_cos();
                let mut out = u.clone();
                out[b] = co * u[b] - s * u[c];
                out[c] = s * u[b] + co * u[c];
                out[a] = u[a];
                out
            }
            DeterministicPath::Translation { v } => u + v * theta,
            DeterministicPath::TorusAdvance { rates } => {
                let mut out = u.clone();
                for (k, &r) in rates.iter().enumerate() {
                    let (s, co) = (r * theta).sin_cos();
                    out[2 * k] = co * u[2 * k] - s * u[2 * k + 1];
                    out[2 * k + 1] = s * u[2 * k] + co * u[2 * k + 1];
                }
                let _ = m;
                out
            }
        }
    }

    /// Velocity `d/dtheta x_theta(u)`, a tangent vector at `x_theta(u)`.
    pub fn velocity(&self, m: Manifold, theta: f64, u: &Vector) -> Vector {
        let x = self.apply(m, theta, u);
        match self {
            DeterministicPath::Rotation { axis, rate } => {
                let (a, b, c) = (axis % 3, (axis + 1) % 3, (axis + 2) % 3);
                let mut out = Vector::zeros(3);
                out[a] = 0.0;
                out[b] = -rate * x[c];
                out[c] = rate * x[b];
                out
            }
            DeterministicPath::Translation { v } => v.clone(),
            DeterministicPath::TorusAdvance { rates } => {
                let mut out = Vector::zeros(x.len());
                for (k, &r) in rates.iter().enumerate() {
                    out[2 * k] = -r * x[2 * k + 1];
                    out[2 * k + 1] = r * x[2 * k];
                }
                out
            }
        }
    }
}

/// `|d/dtheta F(mu o x_theta^{-1}) - ∫ <D_I F(nu)(x_theta(u)), xdot_theta(u)> mu(du)|`.
pub fn chain_rule_residual(
    func: &MeasureFunctional,
    path: &DeterministicPath,
    mu: &EmpiricalMeasure,
    theta: f64,
    fd_eps: f64,
) -> f64 {
    let m = mu.manifold();
    let value_at = |t: f64| func.value(&mu.pushforward(|u| path.apply(m, t, u)));
    let lhs = (value_at(theta + fd_eps) - value_at(theta - fd_eps)) / (2.0 * fd_eps);
    let nu = mu.pushforward(|u| path.apply(m, theta, u));
    let rhs: f64 = mu
        .points()
        .iter()
        .zip(mu.weights())
        .map(|(u, &w)| {
            let x = path.apply(m, theta, u);
            let vel = path.velocity(m, theta, u);
            w * func.intrinsic_kernel(&nu, &x).dot(&vel)
        })
        .sum();
    (lhs - rhs).abs()
}

// ---------------------------------------------------------------------------
// Linearized flows (Jacobian, variational, Malliavin)
// ---------------------------------------------------------------------------

/// Output of [`variational_flow`]: the main flow plus, on the save grid, the
/// Jacobian `∇x(u, t)` and the variational vector `D_I^psi x(u, t)` of the
/// tracked point.
#[derive(Debug, Clone)]
pub struct VariationalSolution {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    pub tracked_path: Vec<Vector>,
    pub jacobian: Vec<Matrix>,
    pub variation: Vec<Vector>,
}

/// Output of [`malliavin_flow`]: Malliavin matrices `D_s x(., t)` for each
/// requested `s`, for the tracked point and for every carrier.
#[derive(Debug, Clone)]
pub struct MalliavinSolution {
    pub times: Vec<f64>,
    pub measures: Vec<EmpiricalMeasure>,
    pub tracked_path: Vec<Vector>,
    pub s_times: Vec<f64>,
    /// `[s][save]`: `N x n` matrix, zero for `t < s`.
    pub tracked_malliavin: Vec<Vec<Matrix>>,
    /// `[s][save][carrier]`.
    pub carrier_malliavin: Vec<Vec<Vec<Matrix>>>,
}

struct LinearDynamics<'a> {
    fields: &'a FieldSet,
    dt: f64,
}

impl<'a> LinearDynamics<'a> {
    /// Per-field weights for one step: drift gets `dt`, diffusion `i` gets
    /// `db[i]`.
    fn weights(&self, db: &[f64]) -> Vec<f64> {
        let mut w = vec![self.dt];
        w.extend_from_slice(db);
        w
    }

    fn frozen_fields<'b>(
        &self,
        support: &'b [Vector],
        weights: &'b [f64],
    ) -> Vec<crate::fields::FrozenField<'b>>
    where
        'a: 'b,
    {
        let mut v = Vec::with_capacity(1 + self.fields.diffusions.len());
        v.push(self.fields.drift.freeze(support, weights));
        for f in &self.fields.diffusions {
            v.push(f.freeze(support, weights));
        }
        v
    }
}

/// Variational flow: solves the coupled system plus, per entity, the
/// Jacobian flow and the variational vector, with mean-field coupling over
/// the carriers. The tracked point `u` does not enter the measure.
pub fn variational_flow(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    psi: &DirectionField,
    u: &Vector,
    cfg: &SolverConfig,
) -> Result<VariationalSolution> {
    let m = fields.manifold();
    if initial.manifold() != m {
        return Err(Error::ManifoldMismatch("variational flow manifold mismatch".into()));
    }
    for f in std::iter::once(&fields.drift).chain(&fields.diffusions) {
        let probe = f.at_measure(initial);
        if !probe.has_intrinsic_derivative() {
            return Err(Error::UnsupportedOrder(
                "variational flow needs analytic intrinsic derivatives of all fields".into(),
            ));
        }
    }
    let n_amb = m.ambient_dim();
    let n_carriers = initial.len();
    let weights_mu = initial.weights().to_vec();

    // Entities: carriers then the tracked point.
    let mut xs: Vec<Vector> = initial.points().to_vec();
    xs.push(u.clone());
    let mut jac: Vec<Matrix> = xs.iter().map(|x| m.tangent_projector(x)).collect();
    let mut zeta: Vec<Vector> = xs.iter().map(|_| Vector::zeros(n_amb)).collect();
    let psi_vals: Vec<Vector> = initial.points().iter().map(|p| psi.eval(p)).collect();

    let dyn_ = LinearDynamics { fields, dt: cfg.dt };
    let mut times = vec![0.0];
    let mut measures = vec![initial.clone()];
    let mut tracked_path = vec![u.clone()];
    let mut jac_path = vec![jac[n_carriers].clone()];
    let mut var_path = vec![zeta[n_carriers].clone()];

    let mut db = vec![0.0f64; noise.n_noise];
    for step in 0..noise.steps {
        for (i, b) in db.iter_mut().enumerate() {
            *b = noise.increments[(i, step)];
        }
        let support: Vec<Vector> = xs[..n_carriers].to_vec();
        let frozen = dyn_.frozen_fields(&support, &weights_mu);
        let field_w = dyn_.weights(&db);

        // Stage 1 at current states.
        let z1: Vec<Matrix> = (0..n_carriers)
            .map(|r| {
                let mut zt = &jac[r] * &psi_vals[r];
                zt += &zeta[r];
                Matrix::from_columns(&[zt.column(0).into_owned()])
            })
            .collect();
        let mf1: Vec<_> =
            frozen.iter().map(|f| f.mean_field_operator(&support, &z1)).collect::<Result<_>>()?;

        let mut d1 = Vec::with_capacity(xs.len());
        let mut rhs1_j = Vec::with_capacity(xs.len());
        let mut rhs1_z = Vec::with_capacity(xs.len());
        for (y, x) in xs.iter().enumerate() {
            let mut inc = Vector::zeros(n_amb);
            let mut rj = Matrix::zeros(n_amb, n_amb);
            let mut rz = Vector::zeros(n_amb);
            for ((f, &w), mf) in frozen.iter().zip(&field_w).zip(&mf1) {
                inc.axpy(w, &f.eval(x), 1.0);
                let dv = f.jacobian_of_projected(x)?;
                rj += (&dv * &jac[y]) * w;
                rz.axpy(w, &(&dv * &zeta[y]), 1.0);
                rz.axpy(w, &mf.apply(x).column(0).into_owned(), 1.0);
            }
            d1.push(inc);
            rhs1_j.push(rj);
            rhs1_z.push(rz);
        }

        // Predictor states.
        let xs_star: Vec<Vector> = xs.iter().zip(&d1).map(|(x, d)| m.retract(x, d)).collect();
        let jac_star: Vec<Matrix> = jac.iter().zip(&rhs1_j).map(|(j, r)| j + r).collect();
        let zeta_star: Vec<Vector> = zeta.iter().zip(&rhs1_z).map(|(z, r)| z + r).collect();

        // Stage 2 at predictor states, measure still frozen.
        let z2: Vec<Matrix> = (0..n_carriers)
            .map(|r| {
                let mut zt = &jac_star[r] * &psi_vals[r];
                zt += &zeta_star[r];
                Matrix::from_columns(&[zt.column(0).into_owned()])
            })
            .collect();
        let mf2: Vec<_> = frozen
            .iter()
            .map(|f| f.mean_field_operator(&xs_star[..n_carriers], &z2))
            .collect::<Result<_>>()?;

        for y in 0..xs.len() {
            let mut inc2 = Vector::zeros(n_amb);
            let mut rj2 = Matrix::zeros(n_amb, n_amb);
            let mut rz2 = Vector::zeros(n_amb);
            for ((f, &w), mf) in frozen.iter().zip(&field_w).zip(&mf2) {
                inc2.axpy(w, &f.eval(&xs_star[y]), 1.0);
                let dv = f.jacobian_of_projected(&xs_star[y])?;
                rj2 += (&dv * &jac_star[y]) * w;
                rz2.axpy(w, &(&dv * &zeta_star[y]), 1.0);
                rz2.axpy(w, &mf.apply(&xs_star[y]).column(0).into_owned(), 1.0);
            }
            let avg = (&d1[y] + m.project_tangent(&xs[y], &inc2)) * 0.5;
            let x_new = m.retract(&xs[y], &avg);
            let p_new = m.tangent_projector(&x_new);
            jac[y] = &p_new * (&jac[y] + (&rhs1_j[y] + rj2) * 0.5);
            zeta[y] = &p_new * (&zeta[y] + (&rhs1_z[y] + rz2) * 0.5);
            xs[y] = x_new;
        }

        for x in &xs {
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("variational flow diverged at step {step}")));
            }
        }

        if (step + 1) % cfg.save_stride == 0 || step + 1 == noise.steps {
            times.push((step + 1) as f64 * cfg.dt);
            measures.push(EmpiricalMeasure::new(m, xs[..n_carriers].to_vec(), weights_mu.clone())?);
            tracked_path.push(xs[n_carriers].clone());
            jac_path.push(jac[n_carriers].clone());
            var_path.push(zeta[n_carriers].clone());
        }
    }

    Ok(VariationalSolution {
        times,
        measures,
        tracked_path,
        jacobian: jac_path,
        variation: var_path,
    })
}

/// Malliavin flow: evolves `D_s x` columns for each requested `s` jointly
/// with the main flow. Column `i` is seeded with `V_i(x(s), mu_s)` at `t=s`
/// and is zero before.
pub fn malliavin_flow(
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    u: &Vector,
    s_times: &[f64],
    cfg: &SolverConfig,
) -> Result<MalliavinSolution> {
    let m = fields.manifold();
    if initial.manifold() != m {
        return Err(Error::ManifoldMismatch("malliavin flow manifold mismatch".into()));
    }
    for f in std::iter::once(&fields.drift).chain(&fields.diffusions) {
        if !f.at_measure(initial).has_intrinsic_derivative() {
            return Err(Error::UnsupportedOrder(
                "malliavin flow needs analytic intrinsic derivatives of all fields".into(),
            ));
        }
    }
    let n_amb = m.ambient_dim();
    let n_noise = noise.n_noise;
    let n_carriers = initial.len();
    let weights_mu = initial.weights().to_vec();

    // Snap every s to the grid.
    let mut s_indices = Vec::with_capacity(s_times.len());
    for &s in s_times {
        let idx = (s / cfg.dt).round() as usize;
        if idx > noise.steps || (s - idx as f64 * cfg.dt).abs() > 1e-9 * cfg.dt.max(1.0) {
            return Err(Error::InvalidGrid(format!("malliavin time {s} is not on the grid")));
        }
        s_indices.push(idx);
    }

    let mut xs: Vec<Vector> = initial.points().to_vec();
    xs.push(u.clone());
    let n_entities = xs.len();
    let zero_mat = Matrix::zeros(n_amb, n_noise);
    // mall[slot][entity]
    let mut mall: Vec<Vec<Matrix>> = vec![vec![zero_mat.clone(); n_entities]; s_indices.len()];
    let mut active = vec![false; s_indices.len()];

    let dyn_ = LinearDynamics { fields, dt: cfg.dt };
    let mut times = vec![0.0];
    let mut measures = vec![initial.clone()];
    let mut tracked_path = vec![u.clone()];
    let mut tracked_mall: Vec<Vec<Matrix>> = vec![Vec::new(); s_indices.len()];
    let mut carrier_mall: Vec<Vec<Vec<Matrix>>> = vec![Vec::new(); s_indices.len()];

    let inject = |slot: usize,
                  xs: &[Vector],
                  support: &[Vector],
                  weights: &[f64],
                  mall: &mut Vec<Vec<Matrix>>| {
        let frozen: Vec<_> = fields.diffusions.iter().map(|f| f.freeze(support, weights)).collect();
        for (e, x) in xs.iter().enumerate() {
            let mut mat = Matrix::zeros(n_amb, n_noise);
            for (i, f) in frozen.iter().enumerate() {
                mat.set_column(i, &f.eval(x));
            }
            mall[slot][e] = mat;
        }
    };

    let record = |times: &mut Vec<f64>,
                  measures: &mut Vec<EmpiricalMeasure>,
                  tracked_path: &mut Vec<Vector>,
                  tracked_mall: &mut Vec<Vec<Matrix>>,
                  carrier_mall: &mut Vec<Vec<Vec<Matrix>>>,
                  t: f64,
                  xs: &[Vector],
                  mall: &[Vec<Matrix>]|
     -> Result<()> {
        if t > 0.0 {
            times.push(t);
            measures.push(EmpiricalMeasure::new(m, xs[..n_carriers].to_vec(), weights_mu.clone())?);
            tracked_path.push(xs[n_carriers].clone());
        }
        for (slot, per_entity) in mall.iter().enumerate() {
            tracked_mall[slot].push(per_entity[n_carriers].clone());
            carrier_mall[slot].push(per_entity[..n_carriers].to_vec());
        }
        Ok(())
    };

    // Injection at t=0 (s=0 slots), then the initial record.
    {
        let support: Vec<Vector> = xs[..n_carriers].to_vec();
        for (slot, &sidx) in s_indices.iter().enumerate() {
            if sidx == 0 {
                inject(slot, &xs, &support, &weights_mu, &mut mall);
                active[slot] = true;
            }
        }
    }
    record(
        &mut times,
        &mut measures,
        &mut tracked_path,
        &mut tracked_mall,
        &mut carrier_mall,
        0.0,
        &xs,
        &mall,
    )?;

    let mut db = vec![0.0f64; n_noise];
    for step in 0..noise.steps {
        for (i, b) in db.iter_mut().enumerate() {
            *b = noise.increments[(i, step)];
        }
        let support: Vec<Vector> = xs[..n_carriers].to_vec();
        let frozen = dyn_.frozen_fields(&support, &weights_mu);
        let field_w = dyn_.weights(&db);

        // Stage 1: position increments shared by all slots.
        let mut d1 = Vec::with_capacity(n_entities);
        let mut dv1: Vec<Vec<Matrix>> = Vec::with_capacity(n_entities);
        for x in xs.iter() {
            let mut inc = Vector::zeros(n_amb);
            let mut dvs = Vec::with_capacity(frozen.len());
            for (f, &w) in frozen.iter().zip(&field_w) {
                inc.axpy(w, &f.eval(x), 1.0);
                dvs.push(f.jacobian_of_projected(x)?);
            }
            d1.push(inc);
            dv1.push(dvs);
        }
        let xs_star: Vec<Vector> = xs.iter().zip(&d1).map(|(x, d)| m.retract(x, d)).collect();
        let mut dv2: Vec<Vec<Matrix>> = Vec::with_capacity(n_entities);
        let mut d2 = Vec::with_capacity(n_entities);
        for x in xs_star.iter() {
            let mut inc = Vector::zeros(n_amb);
            let mut dvs = Vec::with_capacity(frozen.len());
            for (f, &w) in frozen.iter().zip(&field_w) {
                inc.axpy(w, &f.eval(x), 1.0);
                dvs.push(f.jacobian_of_projected(x)?);
            }
            d2.push(inc);
            dv2.push(dvs);
        }

        // Evolve each active slot through both stages.
        for (slot, state) in mall.iter_mut().enumerate() {
            if !active[slot] {
                continue;
            }
            let z1: Vec<Matrix> = state[..n_carriers].to_vec();
            let mf1: Vec<_> = frozen
                .iter()
                .map(|f| f.mean_field_operator(&support, &z1))
                .collect::<Result<_>>()?;
            let rhs1: Vec<Matrix> = (0..n_entities)
                .map(|y| {
                    let mut r = Matrix::zeros(n_amb, n_noise);
                    for (k, &w) in field_w.iter().enumerate() {
                        r += (&dv1[y][k] * &state[y]) * w;
                        r += mf1[k].apply(&xs[y]) * w;
                    }
                    r
                })
                .collect();
            let star: Vec<Matrix> = state.iter().zip(&rhs1).map(|(s, r)| s + r).collect();
            let z2: Vec<Matrix> = star[..n_carriers].to_vec();
            let mf2: Vec<_> = frozen
                .iter()
                .map(|f| f.mean_field_operator(&xs_star[..n_carriers], &z2))
                .collect::<Result<_>>()?;
            for y in 0..n_entities {
                let mut rhs2 = Matrix::zeros(n_amb, n_noise);
                for (k, &w) in field_w.iter().enumerate() {
                    rhs2 += (&dv2[y][k] * &star[y]) * w;
                    rhs2 += mf2[k].apply(&xs_star[y]) * w;
                }
                let avg = (&rhs1[y] + rhs2) * 0.5;
                state[y] += avg;
            }
        }

        // Advance positions and project Malliavin columns.
        for y in 0..n_entities {
            let avg = (&d1[y] + m.project_tangent(&xs[y], &d2[y])) * 0.5;
            xs[y] = m.retract(&xs[y], &avg);
            let p_new = m.tangent_projector(&xs[y]);
            for (slot, state) in mall.iter_mut().enumerate() {
                if active[slot] {
                    state[y] = &p_new * &state[y];
                }
            }
        }

        for x in &xs {
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("malliavin flow diverged at step {step}")));
            }
        }

        // Injections scheduled at t_{step+1}.
        let support_new: Vec<Vector> = xs[..n_carriers].to_vec();
        for (slot, &sidx) in s_indices.iter().enumerate() {
            if sidx == step + 1 {
                inject(slot, &xs, &support_new, &weights_mu, &mut mall);
                active[slot] = true;
            }
        }

        if (step + 1) % cfg.save_stride == 0 || step + 1 == noise.steps {
            record(
                &mut times,
                &mut measures,
                &mut tracked_path,
                &mut tracked_mall,
                &mut carrier_mall,
                (step + 1) as f64 * cfg.dt,
                &xs,
                &mall,
            )?;
        }
    }

    Ok(MalliavinSolution {
        times,
        measures,
        tracked_path,
        s_times: s_times.to_vec(),
        tracked_malliavin: tracked_mall,
        carrier_malliavin: carrier_mall,
    })
}

/// `D_s F(mu_t) = ∫ <D_I F(mu_t)(x(u,t)), D_s x(u,t)> mu(du)`, one component
/// per Brownian motion.
pub fn malliavin_functional(
    func: &MeasureFunctional,
    sol: &MalliavinSolution,
    s_slot: usize,
    save_idx: usize,
) -> Result<Vector> {
    let mats =
        sol.carrier_malliavin.get(s_slot).and_then(|per_save| per_save.get(save_idx)).ok_or_else(
            || Error::MissingAuxiliary("no Malliavin columns for requested slot".into()),
        )?;
    let mu = &sol.measures[save_idx];
    let n_noise = mats.first().map_or(0, Matrix::ncols);
    let mut out = Vector::zeros(n_noise);
    for ((x, &w), mat) in mu.points().iter().zip(mu.weights()).zip(mats) {
        let kernel = func.intrinsic_kernel(mu, x);
        out += (mat.transpose() * kernel) * w;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Measure-valued Ito (Stratonovich) formula residual
// ---------------------------------------------------------------------------

/// Residual path of the measure-valued change-of-variables formula:
/// `R(t) = F(mu_t) - F(mu_0) - ∫ D_I^{V_0} F ds - sum_i ∫ D_I^{V_i} F o dB^i`,
/// Stratonovich integrals discretized as midpoint sums on the solver grid.
pub struct ItoResidual {
    pub times: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn ito_formula_residual(
    func: &MeasureFunctional,
    initial: &EmpiricalMeasure,
    fields: &FieldSet,
    noise: &NoisePath,
    cfg: &SolverConfig,
) -> Result<ItoResidual> {
    let m = fields.manifold();
    let mut full_path: Vec<Vec<Vector>> = Vec::new();
    let inner_cfg = SolverConfig { save_stride: noise.steps.max(1), ..*cfg };
    let _ = crate::solver::solve_with_source(
        initial,
        fields,
        noise,
        &[],
        &inner_cfg,
        crate::solver::MeasureSource::SelfConsistent,
        Some(&mut full_path),
    )?;
    let weights = initial.weights().to_vec();

    // Per-grid-time functional value and pairings with every field.
    let steps = noise.steps;
    let mut f_vals = Vec::with_capacity(steps + 1);
    let mut pair_drift = Vec::with_capacity(steps + 1);
    let mut pair_diff: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    for support in &full_path {
        let mu = EmpiricalMeasure::new(m, support.clone(), weights.clone())?;
        f_vals.push(func.value(&mu));
        let drift_frozen = fields.drift.at_measure(&mu);
        pair_drift.push(func.pairing(&mu, |x| drift_frozen.eval(x)));
        let mut per_noise = Vec::with_capacity(fields.diffusions.len());
        for f in &fields.diffusions {
            let frozen = f.at_measure(&mu);
            per_noise.push(func.pairing(&mu, |x| frozen.eval(x)));
        }
        pair_diff.push(per_noise);
    }

    let mut times = Vec::with_capacity(steps + 1);
    let mut residual = Vec::with_capacity(steps + 1);
    let mut acc = 0.0f64;
    times.push(0.0);
    residual.push(0.0);
    for k in 0..steps {
        acc += 0.5 * (pair_drift[k] + pair_drift[k + 1]) * cfg.dt;
        for (i, _) in fields.diffusions.iter().enumerate() {
            acc += 0.5 * (pair_diff[k][i] + pair_diff[k + 1][i]) * noise.increments[(i, k)];
        }
        times.push((k + 1) as f64 * cfg.dt);
        residual.push(f_vals[k + 1] - f_vals[0] - acc);
    }
    Ok(ItoResidual { times, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{InteractionKernel, MomentMap, ScalarField};
    use crate::functionals::{PairKernel, ScalarCurve};
    use crate::noise::simulate_noise;
    use crate::rng::CounterRng;
    use crate::vec_from;

    fn sphere_measure(n: usize, seed: u64) -> EmpiricalMeasure {
        let mut rng = CounterRng::new(seed, 0);
        let pts = Manifold::sphere(2).sample_uniform(n, &mut rng).unwrap();
        EmpiricalMeasure::uniform(Manifold::sphere(2), pts).unwrap()
    }

    fn alignment_fields(kappa: f64, noise_scale: f64) -> FieldSet {
        let m = Manifold::sphere(2);
        FieldSet::new(
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa }),
            vec![InteractionField::autonomous(
                m,
                MomentMap::AxisRotation { axis: 2, scale: noise_scale },
            )],
        )
        .unwrap()
    }

    #[test]
    fn perturb_trivial_cases_are_bitwise() {
        let mu = sphere_measure(8, 1);
        let dir = DirectionField::rotation(mu.manifold(), 2, 1.0);
        let same = perturb_measure(&mu, &dir, 0.0, 1);
        for (a, b) in same.points().iter().zip(mu.points()) {
            assert_eq!(a, b);
        }
        let zero = DirectionField::zero(mu.manifold());
        let same = perturb_measure(&mu, &zero, 0.3, 17);
        for (a, b) in same.points().iter().zip(mu.points()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturb_rotation_matches_closed_form() {
        let mu = sphere_measure(6, 2);
        let dir = DirectionField::rotation(mu.manifold(), 2, 1.0);
        let eps = std::f64::consts::FRAC_PI_2;
        let moved = perturb_measure(&mu, &dir, eps, default_substeps(eps));
        for (got, p) in moved.points().iter().zip(mu.points()) {
            let expect = vec_from(&[-p[1], p[0], p[2]]);
            assert!((got - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn fd_matches_analytic_pairing_with_quadratic_slope() {
        let mu = sphere_measure(14, 3);
        let m = mu.manifold();
        let funcs = [
            MeasureFunctional::linear(ScalarField::Coordinate { axis: 0 }),
            MeasureFunctional::composite(ScalarCurve::Square, ScalarField::Coordinate { axis: 1 }),
            MeasureFunctional::pair(PairKernel::ChordalDot { kappa: 1.0 }),
        ];
        let dir = DirectionField::frozen(
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 1.0, sigma: 0.9 },
            ),
            mu.clone(),
        );
        for func in &funcs {
            let analytic = func.pairing(&mu, |x| dir.eval(x));
            let mut errs = Vec::new();
            for &eps in &[1e-2, 1e-3, 1e-4] {
                let fd = fd_intrinsic_directional(func, &mu, &dir, eps, default_substeps(eps));
                errs.push((fd - analytic).abs());
            }
            // Slope of the epsilon ladder: central differences are O(eps^2).
            let slope = (errs[0] / errs[2]).log10() / 2.0;
            assert!(slope > 1.8, "slope {slope}, errs {errs:?}");
            assert!(errs[2] < 1e-4 * analytic.abs().max(0.1));
        }
    }

    #[test]
    fn pairing_is_linear_in_direction() {
        let mu = sphere_measure(10, 4);
        let m = mu.manifold();
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 2 });
        let d1 = DirectionField::rotation(m, 0, 0.7);
        let d2 = DirectionField::rotation(m, 1, -1.3);
        let sum = DirectionField::from_fn(m, {
            let (d1, d2) = (d1.clone(), d2.clone());
            move |x| d1.eval(x) + d2.eval(x)
        });
        let lhs = func.pairing(&mu, |x| sum.eval(x));
        let rhs = func.pairing(&mu, |x| d1.eval(x)) + func.pairing(&mu, |x| d2.eval(x));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn empirical_gradient_identity_examples() {
        let m = Manifold::sphere(2);
        let mut rng = CounterRng::new(9, 0);

        // Single point, linear functional.
        let pts = m.sample_uniform(1, &mut rng).unwrap();
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 0 });
        let dev = empirical_gradient_identity(&func, m, &pts, 1e-5).unwrap();
        assert!(dev < 1e-6, "dev {dev}");

        // Constant functional: both sides vanish.
        let func_const = MeasureFunctional::linear(ScalarField::Constant { c: 2.0 });
        let dev = empirical_gradient_identity(&func_const, m, &pts, 1e-5).unwrap();
        assert_eq!(dev, 0.0);

        // 20 random points, composite functional.
        let pts = m.sample_uniform(20, &mut rng).unwrap();
        let func = MeasureFunctional::composite(
            ScalarCurve::Exp { rate: 0.8 },
            ScalarField::Coordinate { axis: 1 },
        );
        let dev = empirical_gradient_identity(&func, m, &pts, 1e-5).unwrap();
        assert!(dev < 1e-5, "dev {dev}");
    }

    #[test]
    fn chain_rule_examples() {
        let _m = Manifold::sphere(2);
        let mu = sphere_measure(12, 5);

        // Stationary path.
        let still = DeterministicPath::Translation { v: Vector::zeros(3) };
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 0 });
        // Translation is only valid on Euclidean space, but with v = 0 it is
        // the identity everywhere.
        assert!(chain_rule_residual(&func, &still, &mu, 0.4, 1e-5) < 1e-12);

        // Rotation path against the closed-form derivative.
        let rot = DeterministicPath::Rotation { axis: 2, rate: 1.0 };
        let res = chain_rule_residual(&func, &rot, &mu, 0.3, 1e-5);
        assert!(res < 1e-6, "residual {res}");

        // Euclidean translation with a quadratic observable.
        let e1 = Manifold::euclidean(1);
        let mu1 = EmpiricalMeasure::uniform(e1, vec![vec_from(&[0.2]), vec_from(&[-0.6])]).unwrap();
        let func = MeasureFunctional::linear(ScalarField::SquaredCoordinate { axis: 0 });
        let path = DeterministicPath::Translation { v: vec_from(&[1.0]) };
        let theta = 0.35;
        let res = chain_rule_residual(&func, &path, &mu1, theta, 1e-6);
        assert!(res < 1e-8, "residual {res}");
        // And the right-hand side matches 2<x, mu> + 2 theta by hand.
        let nu = mu1.pushforward(|u| path.apply(e1, theta, u));
        let rhs: f64 = nu.integrate(|x| 2.0 * x[0]);
        let expect = 2.0 * (0.2 - 0.6) / 2.0 + 2.0 * theta;
        assert!((rhs - expect).abs() < 1e-12);
    }

    #[test]
    fn variational_zero_direction_is_zero() {
        let mu = sphere_measure(10, 6);
        let fields = alignment_fields(1.0, 0.5);
        let noise = simulate_noise(1, 0.2, 0.01, 31, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(5);
        let psi = DirectionField::zero(mu.manifold());
        let u = mu.points()[0].clone();
        let sol = variational_flow(&mu, &fields, &noise, &psi, &u, &cfg).unwrap();
        for z in &sol.variation {
            assert_eq!(z.norm(), 0.0);
        }
    }

    #[test]
    fn variational_scaling_linearity() {
        // D_I^{2 psi} x = 2 D_I^{psi} x, bitwise for a power-of-two scalar.
        let mu = sphere_measure(8, 7);
        let fields = alignment_fields(1.0, 0.4);
        let noise = simulate_noise(1, 0.2, 0.01, 33, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(20);
        let u = mu.points()[1].clone();
        let psi = DirectionField::rotation(mu.manifold(), 0, 1.0);
        let psi2 = DirectionField::rotation(mu.manifold(), 0, 2.0);
        let a = variational_flow(&mu, &fields, &noise, &psi, &u, &cfg).unwrap();
        let b = variational_flow(&mu, &fields, &noise, &psi2, &u, &cfg).unwrap();
        for (za, zb) in a.variation.iter().zip(&b.variation) {
            assert_eq!((za * 2.0), zb.clone());
        }
    }

    #[test]
    fn jacobian_flow_matches_common_noise_fd() {
        // Measure-free fields: the variational machinery reduces to the
        // classical first-variation flow.
        let m = Manifold::sphere(2);
        let mu = sphere_measure(6, 8);
        let fields = FieldSet::new(
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 2, scale: 1.0 }),
            vec![InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 0, scale: 0.5 })],
        )
        .unwrap();
        let noise = simulate_noise(1, 0.25, 5e-3, 35, 0).unwrap();
        let cfg = SolverConfig::heun(5e-3).with_stride(noise.steps);
        let u = mu.points()[0].clone();
        let psi = DirectionField::zero(m);
        let sol = variational_flow(&mu, &fields, &noise, &psi, &u, &cfg).unwrap();
        // Measure-free: zero variational vector.
        assert!(sol.variation.last().unwrap().norm() < 1e-14);

        let jac = sol.jacobian.last().unwrap();
        let basis = m.tangent_basis(&u);
        let eps = 1e-4;
        for e in &basis {
            let run = |start: Vector| {
                let sol =
                    crate::solver::solve_interacting_flow(&mu, &fields, &noise, &[start], &cfg)
                        .unwrap();
                sol.tracked[0].last().unwrap().clone()
            };
            let plus = run(m.retract(&u, &(e * eps)));
            let minus = run(m.retract(&u, &(e * -eps)));
            let fd = (plus - minus) / (2.0 * eps);
            let got = jac * e;
            assert!(
                (&got - &fd).norm() < 1e-3 * fd.norm().max(0.1),
                "jacobian column error {}",
                (got - fd).norm()
            );
        }
    }

    #[test]
    fn variational_matches_common_noise_measure_fd() {
        // The zeta-limit oracle: perturb the initial measure, keep the noise.
        let mu = sphere_measure(40, 9);
        let fields = alignment_fields(1.0, 0.5);
        let noise = simulate_noise(1, 0.2, 5e-3, 37, 0).unwrap();
        let cfg = SolverConfig::heun(5e-3).with_stride(noise.steps);
        let m = mu.manifold();
        let u = mu.points()[3].clone();
        let psi = DirectionField::rotation(m, 1, 1.0);
        let sol = variational_flow(&mu, &fields, &noise, &psi, &u, &cfg).unwrap();
        let zeta = sol.variation.last().unwrap();

        let eps = 1e-3;
        let run = |sign: f64| {
            let moved = perturb_measure(&mu, &psi, sign * eps, default_substeps(eps));
            let sol =
                crate::solver::solve_interacting_flow(&moved, &fields, &noise, &[u.clone()], &cfg)
                    .unwrap();
            sol.tracked[0].last().unwrap().clone()
        };
        let fd = (run(1.0) - run(-1.0)) / (2.0 * eps);
        let rel = (zeta - &fd).norm() / fd.norm().max(1e-8);
        assert!(rel < 5e-2, "relative error {rel}");
    }

    #[test]
    fn malliavin_trivial_cases() {
        let mu = sphere_measure(6, 10);
        let fields = alignment_fields(1.0, 0.5);
        let noise = simulate_noise(1, 0.2, 0.01, 39, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(5);
        let u = mu.points()[0].clone();
        let sol = malliavin_flow(&mu, &fields, &noise, &u, &[0.1], &cfg).unwrap();
        // Zero before s.
        for (idx, &t) in sol.times.iter().enumerate() {
            if t < 0.1 - 1e-12 {
                assert_eq!(sol.tracked_malliavin[0][idx].norm(), 0.0);
            }
        }
        // Nonzero after s.
        assert!(sol.tracked_malliavin[0].last().unwrap().norm() > 1e-8);

        // Zero diffusion: columns stay zero for all t.
        let m = mu.manifold();
        let fields0 = FieldSet::new(
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 }),
            vec![InteractionField::zero(m)],
        )
        .unwrap();
        let sol = malliavin_flow(&mu, &fields0, &noise, &u, &[0.1], &cfg).unwrap();
        for mats in &sol.tracked_malliavin[0] {
            assert_eq!(mats.norm(), 0.0);
        }
    }

    #[test]
    fn malliavin_additive_noise_closed_form() {
        // One particle on the line with V0 = 0, V1 = 1: D_s x_t = 1 and
        // D_s F(mu_t) = f'(x_t).
        let e1 = Manifold::euclidean(1);
        let mu = EmpiricalMeasure::dirac(e1, vec_from(&[0.0])).unwrap();
        let fields = FieldSet::new(
            InteractionField::zero(e1),
            vec![InteractionField::autonomous(e1, MomentMap::Constant { v: vec_from(&[1.0]) })],
        )
        .unwrap();
        let noise = simulate_noise(1, 0.5, 0.01, 41, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(noise.steps);
        let u = vec_from(&[0.0]);
        let sol = malliavin_flow(&mu, &fields, &noise, &u, &[0.2], &cfg).unwrap();
        let last = sol.tracked_malliavin[0].last().unwrap();
        assert!((last[(0, 0)] - 1.0).abs() < 1e-12);

        let func = MeasureFunctional::linear(ScalarField::SquaredCoordinate { axis: 0 });
        let x_t = sol.tracked_path.last().unwrap()[0];
        let d = malliavin_functional(&func, &sol, 0, sol.times.len() - 1).unwrap();
        assert!((d[0] - 2.0 * x_t).abs() < 1e-8, "got {} expect {}", d[0], 2.0 * x_t);
    }

    #[test]
    fn malliavin_functional_requires_columns() {
        let mu = sphere_measure(4, 11);
        let fields = alignment_fields(1.0, 0.3);
        let noise = simulate_noise(1, 0.1, 0.01, 43, 0).unwrap();
        let cfg = SolverConfig::heun(0.01).with_stride(noise.steps);
        let u = mu.points()[0].clone();
        let sol = malliavin_flow(&mu, &fields, &noise, &u, &[0.05], &cfg).unwrap();
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 0 });
        assert!(matches!(malliavin_functional(&func, &sol, 3, 0), Err(Error::MissingAuxiliary(_))));
    }

    #[test]
    fn ito_residual_zero_fields() {
        let mu = sphere_measure(8, 12);
        let m = mu.manifold();
        let fields =
            FieldSet::new(InteractionField::zero(m), vec![InteractionField::zero(m)]).unwrap();
        let noise = simulate_noise(1, 0.3, 0.01, 45, 0).unwrap();
        let cfg = SolverConfig::heun(0.01);
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 1 });
        let res = ito_formula_residual(&func, &mu, &fields, &noise, &cfg).unwrap();
        for r in &res.residual {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn ito_residual_deterministic_drift_second_order() {
        let mu = sphere_measure(10, 13);
        let m = mu.manifold();
        let fields = FieldSet::new(
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 2, scale: 1.0 }),
            vec![],
        )
        .unwrap();
        let func = MeasureFunctional::linear(ScalarField::Coordinate { axis: 0 });
        let mut finals = Vec::new();
        for &dt in &[4e-3, 2e-3, 1e-3] {
            let noise = simulate_noise(0, 0.4, dt, 0, 0).unwrap();
            let cfg = SolverConfig::heun(dt);
            let res = ito_formula_residual(&func, &mu, &fields, &noise, &cfg).unwrap();
            finals.push(res.residual.last().unwrap().abs());
        }
        let slope = (finals[0] / finals[2]).log2() / 2.0;
        assert!(slope > 1.7, "slope {slope}, finals {finals:?}");
    }
}
