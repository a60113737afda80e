//! Measure-dependent vector fields with analytic derivatives.
//!
//! Two families, mirroring the interaction classes the solver supports:
//!
//! * kernel fields `V(u, mu) = ∫…∫ ∇_u Φ(u, x_1..x_k) dmu^k` driven by an
//!   [`InteractionKernel`];
//! * moment fields `V(u, mu) = g(u, <f_1,mu>, …, <f_m,mu>)` driven by a
//!   [`MomentMap`] and scalar observables.
//!
//! Fields are authored as ambient maps and composed with the tangent
//! projector; every evaluation returns a tangent vector. Analytic spatial
//! Jacobians include the projector-derivative (curvature) term, and analytic
//! intrinsic derivatives are available for order-1 kernels and moment fields.
//!
//! Evaluation against a fixed measure goes through [`FrozenField`], which
//! precomputes whatever the variant shares across evaluation points (kernel
//! means, moments) so per-point cost stays low inside solver loops.

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::measure::EmpiricalMeasure;
use crate::rng::CounterRng;
use crate::{Matrix, Vector};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Scalar observables
// ---------------------------------------------------------------------------

/// Smooth scalar field on ambient space with closed-form derivatives.
#[derive(Clone)]
#[allow(clippy::type_complexity)]
pub enum ScalarField {
    Constant {
        c: f64,
    },
    /// `f(x) = x[axis]`
    Coordinate {
        axis: usize,
    },
    /// `f(x) = <a, x>`
    LinearForm {
        a: Vector,
    },
    /// `f(x) = x[axis]^2`
    SquaredCoordinate {
        axis: usize,
    },
    Custom {
        name: String,
        value: Arc<dyn Fn(&Vector) -> f64 + Send + Sync>,
        gradient: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
        hessian: Option<Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>>,
    },
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarField::Constant { c } => write!(f, "Constant({c})"),
            ScalarField::Coordinate { axis } => write!(f, "Coordinate({axis})"),
            ScalarField::LinearForm { .. } => write!(f, "LinearForm"),
            ScalarField::SquaredCoordinate { axis } => write!(f, "SquaredCoordinate({axis})"),
            ScalarField::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl ScalarField {
    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            ScalarField::Constant { c } => *c,
            ScalarField::Coordinate { axis } => x[*axis],
            ScalarField::LinearForm { a } => a.dot(x),
            ScalarField::SquaredCoordinate { axis } => x[*axis] * x[*axis],
            ScalarField::Custom { value, .. } => value(x),
        }
    }

    /// Ambient gradient; the Riemannian gradient is its tangent projection.
    pub fn gradient(&self, x: &Vector) -> Vector {
        let n = x.len();
        match self {
            ScalarField::Constant { .. } => Vector::zeros(n),
            ScalarField::Coordinate { axis } => {
                let mut g = Vector::zeros(n);
                g[*axis] = 1.0;
                g
            }
            ScalarField::LinearForm { a } => a.clone(),
            ScalarField::SquaredCoordinate { axis } => {
                let mut g = Vector::zeros(n);
                g[*axis] = 2.0 * x[*axis];
                g
            }
            ScalarField::Custom { gradient, .. } => gradient(x),
        }
    }

    /// Ambient Hessian, needed by second intrinsic derivatives.
    pub fn hessian(&self, x: &Vector) -> Result<Matrix> {
        let n = x.len();
        match self {
            ScalarField::Constant { .. }
            | ScalarField::Coordinate { .. }
            | ScalarField::LinearForm { .. } => Ok(Matrix::zeros(n, n)),
            ScalarField::SquaredCoordinate { axis } => {
                let mut h = Matrix::zeros(n, n);
                h[(*axis, *axis)] = 2.0;
                Ok(h)
            }
            ScalarField::Custom { name, hessian, .. } => match hessian {
                Some(h) => Ok(h(x)),
                None => Err(Error::UnsupportedOrder(format!(
                    "custom scalar field `{name}` has no Hessian"
                ))),
            },
        }
    }

    /// FD self-check of the supplied gradient on random manifold points.
    pub fn self_check(&self, manifold: Manifold, rng: &mut CounterRng) -> Result<()> {
        for _ in 0..8 {
            let x = random_point(manifold, rng);
            let g = self.gradient(&x);
            let eps = 1e-5;
            for a in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += eps;
                xm[a] -= eps;
                let fd = (self.value(&xp) - self.value(&xm)) / (2.0 * eps);
                if (fd - g[a]).abs() > 1e-6 * g[a].abs().max(10.0) {
                    return Err(Error::InvalidInput(format!(
                        "scalar field gradient self-check failed: axis {a}, fd {fd} vs {}",
                        g[a]
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Interaction kernels
// ---------------------------------------------------------------------------

/// Smooth interaction kernel `Φ(u, x_1..x_k)` with analytic `∇_u Φ`.
#[derive(Clone)]
#[allow(clippy::type_complexity)]
pub enum InteractionKernel {
    /// `Φ(u, x) = κ <u, x>`; the gradient pulls toward the measure's mean.
    Alignment { kappa: f64 },
    /// `Φ(u, x) = κ exp(-|u - x|^2 / (2 σ^2))`.
    GaussianChordal { kappa: f64, sigma: f64 },
    /// Closed-form triple for order-k kernels. `grad_x_grad_u` and `jac_u`
    /// unlock the analytic intrinsic derivative / spatial Jacobian (order 1).
    Custom {
        name: String,
        order: usize,
        phi: Arc<dyn Fn(&Vector, &[&Vector]) -> f64 + Send + Sync>,
        grad_u: Arc<dyn Fn(&Vector, &[&Vector]) -> Vector + Send + Sync>,
        grad_x_grad_u: Option<Arc<dyn Fn(&Vector, &Vector) -> Matrix + Send + Sync>>,
        jac_u: Option<Arc<dyn Fn(&Vector, &[&Vector]) -> Matrix + Send + Sync>>,
    },
}

impl std::fmt::Debug for InteractionKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InteractionKernel::Alignment { kappa } => write!(f, "Alignment(k={kappa})"),
            InteractionKernel::GaussianChordal { kappa, sigma } => {
                write!(f, "GaussianChordal(k={kappa}, s={sigma})")
            }
            InteractionKernel::Custom { name, order, .. } => write!(f, "Custom({name}, k={order})"),
        }
    }
}

impl InteractionKernel {
    pub fn order(&self) -> usize {
        match self {
            InteractionKernel::Alignment { .. } | InteractionKernel::GaussianChordal { .. } => 1,
            InteractionKernel::Custom { order, .. } => *order,
        }
    }

    pub fn phi(&self, u: &Vector, xs: &[&Vector]) -> f64 {
        match self {
            InteractionKernel::Alignment { kappa } => kappa * u.dot(xs[0]),
            InteractionKernel::GaussianChordal { kappa, sigma } => {
                kappa * (-(u - xs[0]).norm_squared() / (2.0 * sigma * sigma)).exp()
            }
            InteractionKernel::Custom { phi, .. } => phi(u, xs),
        }
    }

    /// Ambient `∇_u Φ(u, x_1..x_k)`.
    pub fn grad_u(&self, u: &Vector, xs: &[&Vector]) -> Vector {
        match self {
            InteractionKernel::Alignment { kappa } => xs[0] * *kappa,
            InteractionKernel::GaussianChordal { kappa, sigma } => {
                let q = u - xs[0];
                let s2 = sigma * sigma;
                let e = (-q.norm_squared() / (2.0 * s2)).exp();
                q * (-kappa * e / s2)
            }
            InteractionKernel::Custom { grad_u, .. } => grad_u(u, xs),
        }
    }

    /// Ambient `D_u ∇_u Φ` (second derivative in `u`).
    pub fn jac_u(&self, u: &Vector, xs: &[&Vector]) -> Result<Matrix> {
        match self {
            InteractionKernel::Alignment { .. } => Ok(Matrix::zeros(u.len(), u.len())),
            InteractionKernel::GaussianChordal { kappa, sigma } => {
                let q = u - xs[0];
                let s2 = sigma * sigma;
                let e = (-q.norm_squared() / (2.0 * s2)).exp();
                let n = u.len();
                Ok((Matrix::identity(n, n) - &q * q.transpose() / s2) * (-kappa * e / s2))
            }
            InteractionKernel::Custom { name, jac_u, .. } => match jac_u {
                Some(j) => Ok(j(u, xs)),
                None => Err(Error::UnsupportedOrder(format!(
                    "kernel `{name}` has no analytic spatial Jacobian"
                ))),
            },
        }
    }

    /// Ambient `∇_x ∇_u Φ(u, x)` for order-1 kernels.
    pub fn grad_x_grad_u(&self, u: &Vector, x: &Vector) -> Result<Matrix> {
        match self {
            InteractionKernel::Alignment { kappa } => {
                let n = u.len();
                Ok(Matrix::identity(n, n) * *kappa)
            }
            InteractionKernel::GaussianChordal { kappa, sigma } => {
                let q = u - x;
                let s2 = sigma * sigma;
                let e = (-q.norm_squared() / (2.0 * s2)).exp();
                let n = u.len();
                Ok((Matrix::identity(n, n) - &q * q.transpose() / s2) * (kappa * e / s2))
            }
            InteractionKernel::Custom { name, order, grad_x_grad_u, .. } => {
                if *order != 1 {
                    return Err(Error::UnsupportedOrder(format!(
                        "analytic intrinsic derivative needs an order-1 kernel, `{name}` has order {order}"
                    )));
                }
                match grad_x_grad_u {
                    Some(g) => Ok(g(u, x)),
                    None => Err(Error::UnsupportedOrder(format!(
                        "kernel `{name}` has no analytic cross derivative"
                    ))),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Moment maps
// ---------------------------------------------------------------------------

/// Ambient map `g(u, m_1..m_j)` for moment-driven fields.
#[derive(Clone)]
#[allow(clippy::type_complexity)]
pub enum MomentMap {
    /// `g = v`, a constant ambient direction.
    Constant { v: Vector },
    /// `g = scale * u`.
    Identity { scale: f64 },
    /// `g = scale * (e_axis x u)`; rotation generator, ambient dim 3.
    AxisRotation { axis: usize, scale: f64 },
    /// `g = sum_j m_j dirs[j]`.
    MomentLinear { dirs: Vec<Vector> },
    Custom {
        name: String,
        value: Arc<dyn Fn(&Vector, &[f64]) -> Vector + Send + Sync>,
        jacobian_u: Arc<dyn Fn(&Vector, &[f64]) -> Matrix + Send + Sync>,
        grad_m: Arc<dyn Fn(&Vector, &[f64], usize) -> Vector + Send + Sync>,
    },
}

impl std::fmt::Debug for MomentMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MomentMap::Constant { .. } => write!(f, "Constant"),
            MomentMap::Identity { scale } => write!(f, "Identity({scale})"),
            MomentMap::AxisRotation { axis, scale } => write!(f, "AxisRotation({axis}, {scale})"),
            MomentMap::MomentLinear { .. } => write!(f, "MomentLinear"),
            MomentMap::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl MomentMap {
    pub fn value(&self, u: &Vector, m: &[f64]) -> Vector {
        match self {
            MomentMap::Constant { v } => v.clone(),
            MomentMap::Identity { scale } => u * *scale,
            MomentMap::AxisRotation { axis, scale } => {
                let (a, b, c) = ((*axis) % 3, (*axis + 1) % 3, (*axis + 2) % 3);
                let mut out = Vector::zeros(3);
                out[a] = 0.0;
                out[b] = -scale * u[c];
                out[c] = scale * u[b];
                out
            }
            MomentMap::MomentLinear { dirs } => {
                let n = dirs.first().map_or(u.len(), |d| d.len());
                let mut out = Vector::zeros(n);
                for (mj, d) in m.iter().zip(dirs) {
                    out += d * *mj;
                }
                out
            }
            MomentMap::Custom { value, .. } => value(u, m),
        }
    }

    pub fn jacobian_u(&self, u: &Vector, m: &[f64]) -> Matrix {
        let n = u.len();
        match self {
            MomentMap::Constant { .. } | MomentMap::MomentLinear { .. } => Matrix::zeros(n, n),
            MomentMap::Identity { scale } => Matrix::identity(n, n) * *scale,
            MomentMap::AxisRotation { axis, scale } => {
                let (_, b, c) = ((*axis) % 3, (*axis + 1) % 3, (*axis + 2) % 3);
                let mut j = Matrix::zeros(3, 3);
                j[(b, c)] = -*scale;
                j[(c, b)] = *scale;
                j
            }
            MomentMap::Custom { jacobian_u, .. } => jacobian_u(u, m),
        }
    }

    /// `∂g/∂m_j`.
    pub fn grad_m(&self, u: &Vector, m: &[f64], j: usize) -> Vector {
        match self {
            MomentMap::Constant { .. }
            | MomentMap::Identity { .. }
            | MomentMap::AxisRotation { .. } => Vector::zeros(u.len()),
            MomentMap::MomentLinear { dirs } => dirs[j].clone(),
            MomentMap::Custom { grad_m, .. } => grad_m(u, m, j),
        }
    }
}

// ---------------------------------------------------------------------------
// Interaction fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum FieldKind {
    Zero,
    Kernel { kernel: InteractionKernel },
    Moment { map: MomentMap, observables: Vec<ScalarField> },
}

/// A measure-dependent vector field `V : M x P_2(M) -> TM`.
#[derive(Debug, Clone)]
pub struct InteractionField {
    pub manifold: Manifold,
    pub kind: FieldKind,
}

impl InteractionField {
    pub fn zero(manifold: Manifold) -> Self {
        InteractionField { manifold, kind: FieldKind::Zero }
    }

    pub fn kernel(manifold: Manifold, kernel: InteractionKernel) -> Self {
        InteractionField { manifold, kind: FieldKind::Kernel { kernel } }
    }

    pub fn moment(manifold: Manifold, map: MomentMap, observables: Vec<ScalarField>) -> Self {
        InteractionField { manifold, kind: FieldKind::Moment { map, observables } }
    }

    /// Measure-free field from a moment map with no observables.
    pub fn autonomous(manifold: Manifold, map: MomentMap) -> Self {
        Self::moment(manifold, map, Vec::new())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FieldKind::Zero)
    }

    /// True when the field ignores its measure argument.
    pub fn is_measure_free(&self) -> bool {
        match &self.kind {
            FieldKind::Zero => true,
            FieldKind::Kernel { .. } => false,
            FieldKind::Moment { map, observables } => {
                observables.is_empty()
                    || matches!(
                        map,
                        MomentMap::Constant { .. }
                            | MomentMap::Identity { .. }
                            | MomentMap::AxisRotation { .. }
                    )
            }
        }
    }

    /// Freeze against a support; precomputes shared per-measure data.
    pub fn freeze<'a>(&'a self, support: &'a [Vector], weights: &'a [f64]) -> FrozenField<'a> {
        let ctx = match &self.kind {
            FieldKind::Zero => FieldCtx::Zero,
            FieldKind::Kernel { kernel } => match kernel {
                InteractionKernel::Alignment { kappa } => {
                    let n = self.manifold.ambient_dim();
                    let mut mean = Vector::zeros(n);
                    for (x, &w) in support.iter().zip(weights) {
                        mean.axpy(w, x, 1.0);
                    }
                    FieldCtx::KernelMean(mean * *kappa)
                }
                _ => FieldCtx::KernelGeneric,
            },
            FieldKind::Moment { observables, .. } => {
                let m = observables
                    .iter()
                    .map(|f| support.iter().zip(weights).map(|(x, &w)| w * f.value(x)).sum())
                    .collect();
                FieldCtx::Moments(m)
            }
        };
        FrozenField { field: self, support, weights, ctx }
    }

    pub fn at_measure<'a>(&'a self, mu: &'a EmpiricalMeasure) -> FrozenField<'a> {
        self.freeze(mu.points(), mu.weights())
    }

    /// Tangent evaluation; the main entry point.
    pub fn evaluate(&self, u: &Vector, mu: &EmpiricalMeasure) -> Result<Vector> {
        if mu.manifold() != self.manifold {
            return Err(Error::ManifoldMismatch(format!(
                "field on {} evaluated against measure on {}",
                self.manifold.spec_string(),
                mu.manifold().spec_string()
            )));
        }
        Ok(self.at_measure(mu).eval(u))
    }

    /// Lipschitz bound in the Wasserstein argument for built-ins, from the
    /// kernel/observable constants; `None` when no closed-form bound exists.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match &self.kind {
            FieldKind::Zero => Some(0.0),
            FieldKind::Kernel { kernel } => match kernel {
                InteractionKernel::Alignment { kappa } => Some(kappa.abs()),
                // sup ||grad_x grad_u Phi|| = k/s^2 * max_z e^{-z/2}(1+z), max at z=1.
                InteractionKernel::GaussianChordal { kappa, sigma } => {
                    Some(kappa.abs() / (sigma * sigma) * 2.0 * (-0.5f64).exp())
                }
                InteractionKernel::Custom { .. } => None,
            },
            FieldKind::Moment { map, observables } => match map {
                MomentMap::MomentLinear { dirs } => {
                    let mut l = 0.0;
                    for (d, f) in dirs.iter().zip(observables) {
                        let lip = match f {
                            ScalarField::Constant { .. } => 0.0,
                            ScalarField::Coordinate { .. } => 1.0,
                            ScalarField::LinearForm { a } => a.norm(),
                            _ => return None,
                        };
                        l += d.norm() * lip;
                    }
                    Some(l)
                }
                MomentMap::Constant { .. }
                | MomentMap::Identity { .. }
                | MomentMap::AxisRotation { .. } => Some(0.0),
                _ => None,
            },
        }
    }

    /// FD self-check of supplied analytic derivatives on random inputs.
    pub fn self_check(&self, rng: &mut CounterRng) -> Result<()> {
        let m = self.manifold;
        match &self.kind {
            FieldKind::Zero => Ok(()),
            FieldKind::Kernel { kernel } => {
                let order = kernel.order();
                for _ in 0..6 {
                    let u = random_point(m, rng);
                    let xs_own: Vec<Vector> = (0..order).map(|_| random_point(m, rng)).collect();
                    let xs: Vec<&Vector> = xs_own.iter().collect();
                    let g = kernel.grad_u(&u, &xs);
                    let eps = 1e-5;
                    for a in 0..u.len() {
                        let mut up = u.clone();
                        let mut um = u.clone();
                        up[a] += eps;
                        um[a] -= eps;
                        let fd = (kernel.phi(&up, &xs) - kernel.phi(&um, &xs)) / (2.0 * eps);
                        if (fd - g[a]).abs() > 1e-6 * g[a].abs().max(10.0) {
                            return Err(Error::InvalidInput(format!(
                                "kernel grad_u self-check failed on axis {a}: fd {fd} vs {}",
                                g[a]
                            )));
                        }
                    }
                }
                Ok(())
            }
            FieldKind::Moment { observables, .. } => {
                for f in observables {
                    f.self_check(m, rng)?;
                }
                Ok(())
            }
        }
    }
}

/// Shared per-measure data for a frozen field.
enum FieldCtx {
    Zero,
    /// Alignment: kappa-scaled mean of the support.
    KernelMean(Vector),
    KernelGeneric,
    Moments(Vec<f64>),
}

/// A field evaluated against one fixed measure.
pub struct FrozenField<'a> {
    field: &'a InteractionField,
    support: &'a [Vector],
    weights: &'a [f64],
    ctx: FieldCtx,
}

impl<'a> FrozenField<'a> {
    pub fn manifold(&self) -> Manifold {
        self.field.manifold
    }

    pub fn field(&self) -> &InteractionField {
        self.field
    }

    pub fn moments(&self) -> &[f64] {
        match &self.ctx {
            FieldCtx::Moments(m) => m,
            _ => &[],
        }
    }

    /// Unprojected ambient value `F(u, mu)`.
    pub fn ambient(&self, u: &Vector) -> Vector {
        let n = self.field.manifold.ambient_dim();
        match (&self.field.kind, &self.ctx) {
            (FieldKind::Zero, _) => Vector::zeros(n),
            (FieldKind::Kernel { .. }, FieldCtx::KernelMean(mean)) => mean.clone(),
            (FieldKind::Kernel { kernel }, _) => {
                let k = kernel.order();
                let mut acc = Vector::zeros(n);
                let mut idx = vec![0usize; k];
                'outer: loop {
                    let w: f64 = idx.iter().map(|&i| self.weights[i]).product();
                    let xs: Vec<&Vector> = idx.iter().map(|&i| &self.support[i]).collect();
                    acc.axpy(w, &kernel.grad_u(u, &xs), 1.0);
                    // Advance the k-fold multi-index.
                    let mut pos = 0;
                    loop {
                        if pos == k {
                            break 'outer;
                        }
                        idx[pos] += 1;
                        if idx[pos] < self.support.len() {
                            break;
                        }
                        idx[pos] = 0;
                        pos += 1;
                    }
                }
                acc
            }
            (FieldKind::Moment { map, .. }, FieldCtx::Moments(m)) => map.value(u, m),
            (FieldKind::Moment { .. }, _) => unreachable!("moment field without moment ctx"),
        }
    }

    /// Tangent evaluation `P_u F(u, mu)`.
    pub fn eval(&self, u: &Vector) -> Vector {
        self.field.manifold.project_tangent(u, &self.ambient(u))
    }

    /// Ambient Jacobian `D_u F` of the unprojected map.
    pub fn ambient_jacobian(&self, u: &Vector) -> Result<Matrix> {
        let n = self.field.manifold.ambient_dim();
        match (&self.field.kind, &self.ctx) {
            (FieldKind::Zero, _) => Ok(Matrix::zeros(n, n)),
            (FieldKind::Kernel { .. }, FieldCtx::KernelMean(_)) => Ok(Matrix::zeros(n, n)),
            (FieldKind::Kernel { kernel }, _) => {
                if kernel.order() != 1 {
                    return Err(Error::UnsupportedOrder(
                        "analytic Jacobian restricted to order-1 kernels".into(),
                    ));
                }
                let mut acc = Matrix::zeros(n, n);
                for (x, &w) in self.support.iter().zip(self.weights) {
                    acc += kernel.jac_u(u, &[x])? * w;
                }
                Ok(acc)
            }
            (FieldKind::Moment { map, .. }, FieldCtx::Moments(m)) => Ok(map.jacobian_u(u, m)),
            (FieldKind::Moment { .. }, _) => unreachable!(),
        }
    }

    /// Full ambient derivative of the projected field `u -> P_u F(u, mu)`:
    /// `D(PF)[h] = (DP)[h] F + P (DF) h`. Maps tangent vectors at `u` to
    /// ambient vectors; compress with `P_u` for the `T_uM -> T_uM` version.
    pub fn jacobian_of_projected(&self, u: &Vector) -> Result<Matrix> {
        let m = self.field.manifold;
        let f = self.ambient(u);
        let p = m.tangent_projector(u);
        let df = self.ambient_jacobian(u)?;
        let mut j = &p * df;
        j += projector_derivative_matrix(m, u, &f);
        Ok(j)
    }

    /// Spatial Jacobian as a `T_uM -> T_uM` map (outer-projected).
    pub fn spatial_jacobian(&self, u: &Vector) -> Result<Matrix> {
        let m = self.field.manifold;
        let p = m.tangent_projector(u);
        Ok(&p * self.jacobian_of_projected(u)? * &p)
    }

    /// Analytic intrinsic derivative `D_I V(u, mu)(x) : T_xM -> T_uM`.
    ///
    /// Order-1 kernels: `P_u (∇_x ∇_u Φ)(u,x) P_x`. Moment fields:
    /// `sum_j P_u (∂g/∂m_j) (P_x ∇f_j(x))^T`.
    pub fn intrinsic_matrix(&self, u: &Vector, x: &Vector) -> Result<Matrix> {
        let m = self.field.manifold;
        let n = m.ambient_dim();
        match (&self.field.kind, &self.ctx) {
            (FieldKind::Zero, _) => Ok(Matrix::zeros(n, n)),
            (FieldKind::Kernel { kernel }, _) => {
                let cross = kernel.grad_x_grad_u(u, x)?;
                let pu = m.tangent_projector(u);
                let px = m.tangent_projector(x);
                Ok(pu * cross * px)
            }
            (FieldKind::Moment { map, observables }, FieldCtx::Moments(mom)) => {
                let mut acc = Matrix::zeros(n, n);
                for (j, f) in observables.iter().enumerate() {
                    let dir = m.project_tangent(u, &map.grad_m(u, mom, j));
                    let grad = m.project_tangent(x, &f.gradient(x));
                    acc += dir * grad.transpose();
                }
                Ok(acc)
            }
            (FieldKind::Moment { .. }, _) => unreachable!(),
        }
    }

    /// Whether [`intrinsic_matrix`](Self::intrinsic_matrix) is available.
    pub fn has_intrinsic_derivative(&self) -> bool {
        match &self.field.kind {
            FieldKind::Zero | FieldKind::Moment { .. } => true,
            FieldKind::Kernel { kernel } => {
                kernel.order() == 1
                    && !matches!(kernel, InteractionKernel::Custom { grad_x_grad_u: None, .. })
            }
        }
    }

    /// Mean-field contraction: builds an operator returning, for any `u`,
    /// `sum_r w_r D_I V(u, mu)(points_r) Z_r` with one shared pass where the
    /// variant factorizes. `points` are the kernel's evaluation positions
    /// (usually the frozen support, predictor positions in a corrector
    /// stage); the measure argument of `D_I V` stays frozen. `Z` holds one
    /// `N x c` block per support point.
    pub fn mean_field_operator(&self, points: &[Vector], z: &[Matrix]) -> Result<MeanFieldOp> {
        let m = self.field.manifold;
        let n = m.ambient_dim();
        let cols = z.first().map_or(0, Matrix::ncols);
        if !self.has_intrinsic_derivative() {
            return Err(Error::UnsupportedOrder(
                "mean-field operator needs an analytic intrinsic derivative".into(),
            ));
        }
        debug_assert_eq!(points.len(), self.weights.len());
        match (&self.field.kind, &self.ctx) {
            (FieldKind::Zero, _) => Ok(MeanFieldOp::Zero { n, cols }),
            (FieldKind::Kernel { kernel: InteractionKernel::Alignment { kappa } }, _) => {
                let mut s = Matrix::zeros(n, cols);
                for ((x, &w), zr) in points.iter().zip(self.weights).zip(z) {
                    // Accumulate w * P_x Z_r without forming the projector.
                    let px_z = zr - x * (x.transpose() * zr) / x.norm_squared();
                    s += px_z * w;
                }
                Ok(MeanFieldOp::Projected { manifold: m, s: s * *kappa })
            }
            (FieldKind::Kernel { .. }, _) => Ok(MeanFieldOp::Generic {
                field: self.field.clone(),
                support: self.support.to_vec(),
                points: points.to_vec(),
                weights: self.weights.to_vec(),
                z: z.to_vec(),
            }),
            (FieldKind::Moment { map, observables }, FieldCtx::Moments(mom)) => {
                let mut rows = Vec::with_capacity(observables.len());
                for f in observables {
                    let mut row = Matrix::zeros(1, cols);
                    for ((x, &w), zr) in points.iter().zip(self.weights).zip(z) {
                        let g = m.project_tangent(x, &f.gradient(x));
                        row += g.transpose() * zr * w;
                    }
                    rows.push(row);
                }
                Ok(MeanFieldOp::Moment {
                    manifold: m,
                    map: map.clone(),
                    moments: mom.clone(),
                    rows,
                    n,
                    cols,
                })
            }
            (FieldKind::Moment { .. }, _) => unreachable!(),
        }
    }
}

/// Result of [`FrozenField::mean_field_operator`].
pub enum MeanFieldOp {
    Zero {
        n: usize,
        cols: usize,
    },
    /// `apply(u) = P_u S` for a precomputed aggregate `S`.
    Projected {
        manifold: Manifold,
        s: Matrix,
    },
    Moment {
        manifold: Manifold,
        map: MomentMap,
        moments: Vec<f64>,
        rows: Vec<Matrix>,
        n: usize,
        cols: usize,
    },
    /// Fallback: O(support) per target point.
    Generic {
        field: InteractionField,
        support: Vec<Vector>,
        points: Vec<Vector>,
        weights: Vec<f64>,
        z: Vec<Matrix>,
    },
}

impl MeanFieldOp {
    pub fn apply(&self, u: &Vector) -> Matrix {
        match self {
            MeanFieldOp::Zero { n, cols } => Matrix::zeros(*n, *cols),
            MeanFieldOp::Projected { manifold, s } => manifold.tangent_projector(u) * s,
            MeanFieldOp::Moment { manifold, map, moments, rows, n, cols } => {
                let mut acc = Matrix::zeros(*n, *cols);
                for (j, row) in rows.iter().enumerate() {
                    let dir = manifold.project_tangent(u, &map.grad_m(u, moments, j));
                    acc += dir * row;
                }
                acc
            }
            MeanFieldOp::Generic { field, support, points, weights, z } => {
                let frozen = field.freeze(support, weights);
                let n = field.manifold.ambient_dim();
                let cols = z.first().map_or(0, Matrix::ncols);
                let mut acc = Matrix::zeros(n, cols);
                for ((x, &w), zr) in points.iter().zip(weights.iter()).zip(z) {
                    let k = frozen.intrinsic_matrix(u, x).expect("checked at construction");
                    acc += k * zr * w;
                }
                acc
            }
        }
    }
}

/// Matrix form of `h -> (D_x P)[h] w` for tangent `h`.
pub fn projector_derivative_matrix(m: Manifold, x: &Vector, w: &Vector) -> Matrix {
    let n = m.ambient_dim();
    match m {
        Manifold::Euclidean { .. } => Matrix::zeros(n, n),
        Manifold::Sphere { .. } => {
            let xw = x.dot(w);
            -(Matrix::identity(n, n) * xw + x * w.transpose())
        }
        Manifold::FlatTorus { dim } => {
            let mut out = Matrix::zeros(n, n);
            for k in 0..dim {
                let (xa, xb) = (x[2 * k], x[2 * k + 1]);
                let (wa, wb) = (w[2 * k], w[2 * k + 1]);
                let xw = xa * wa + xb * wb;
                out[(2 * k, 2 * k)] = -(xw + xa * wa);
                out[(2 * k, 2 * k + 1)] = -xa * wb;
                out[(2 * k + 1, 2 * k)] = -xb * wa;
                out[(2 * k + 1, 2 * k + 1)] = -(xw + xb * wb);
            }
            out
        }
    }
}

/// Ito drift correction `1/2 sum_i P_u[(D V_i)(V_i)]` over the diffusion
/// fields, projector-curvature term included. Adding it to the drift makes
/// Ito-Euler agree with the Stratonovich scheme in the small-step limit.
pub fn ito_correction(diffusions: &[FrozenField<'_>], u: &Vector) -> Result<Vector> {
    let Some(first) = diffusions.first() else {
        return Err(Error::InvalidInput("ito correction needs at least one field".into()));
    };
    let m = first.manifold();
    let mut acc = Vector::zeros(m.ambient_dim());
    for f in diffusions {
        if f.manifold() != m {
            return Err(Error::ManifoldMismatch("ito correction across manifolds".into()));
        }
        let v = f.eval(u);
        let j = f.jacobian_of_projected(u)?;
        acc += m.project_tangent(u, &(j * &v));
    }
    Ok(acc * 0.5)
}

fn random_point(manifold: Manifold, rng: &mut CounterRng) -> Vector {
    match manifold {
        Manifold::Euclidean { dim } => Vector::from_fn(dim, |_, _| rng.normal()),
        _ => manifold.sample_uniform(1, rng).unwrap().pop().unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec_from;

    fn sphere_measure(n: usize, seed: u64) -> EmpiricalMeasure {
        let mut rng = CounterRng::new(seed, 0);
        let pts = Manifold::sphere(2).sample_uniform(n, &mut rng).unwrap();
        EmpiricalMeasure::uniform(Manifold::sphere(2), pts).unwrap()
    }

    #[test]
    fn alignment_trivial_cases() {
        let m = Manifold::sphere(2);
        let field = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let u = vec_from(&[1.0, 0.0, 0.0]);

        // Dirac at u: the mean is u itself, whose tangent part vanishes.
        let mu = EmpiricalMeasure::dirac(m, u.clone()).unwrap();
        assert!(field.evaluate(&u, &mu).unwrap().norm() < 1e-14);

        // Dirac at an orthogonal point: projection is the point itself.
        let nu = EmpiricalMeasure::dirac(m, vec_from(&[0.0, 1.0, 0.0])).unwrap();
        let v = field.evaluate(&u, &nu).unwrap();
        assert!((v - vec_from(&[0.0, 1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn zero_moment_map_gives_zero() {
        let m = Manifold::sphere(2);
        let field = InteractionField::autonomous(m, MomentMap::Constant { v: Vector::zeros(3) });
        let mu = sphere_measure(5, 3);
        for p in mu.points() {
            assert_eq!(field.evaluate(p, &mu).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn evaluation_is_tangent() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(20, 4);
        let fields = [
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.3 }),
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 0.7, sigma: 0.9 },
            ),
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 2, scale: 1.0 }),
        ];
        for field in &fields {
            for u in mu.points() {
                let v = field.evaluate(u, &mu).unwrap();
                assert!(u.dot(&v).abs() < 1e-10 * v.norm().max(1.0));
            }
        }
    }

    #[test]
    fn spatial_jacobian_trivial_cases() {
        // Moment field constant in u.
        let e1 = Manifold::euclidean(1);
        let f = InteractionField::moment(
            e1,
            MomentMap::MomentLinear { dirs: vec![vec_from(&[1.0])] },
            vec![ScalarField::Coordinate { axis: 0 }],
        );
        let mu = EmpiricalMeasure::uniform(e1, vec![vec_from(&[0.3]), vec_from(&[-1.2])]).unwrap();
        let j = f.at_measure(&mu).spatial_jacobian(&vec_from(&[0.5])).unwrap();
        assert_eq!(j[(0, 0)], 0.0);

        // Kernel with grad_u independent of u.
        let e2 = Manifold::euclidean(2);
        let f = InteractionField::kernel(e2, InteractionKernel::Alignment { kappa: 2.0 });
        let mu = EmpiricalMeasure::uniform(e2, vec![vec_from(&[1.0, 2.0])]).unwrap();
        let j = f.at_measure(&mu).spatial_jacobian(&vec_from(&[0.0, 0.0])).unwrap();
        assert_eq!(j.norm(), 0.0);
    }

    #[test]
    fn spatial_jacobian_matches_fd_along_retracted_curves() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(15, 7);
        let fields = [
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 }),
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 0.8, sigma: 1.1 },
            ),
            InteractionField::autonomous(m, MomentMap::AxisRotation { axis: 2, scale: 1.0 }),
        ];
        let mut rng = CounterRng::new(11, 0);
        for field in &fields {
            let frozen = field.at_measure(&mu);
            for _ in 0..34 {
                let u = m.sample_uniform(1, &mut rng).unwrap().pop().unwrap();
                let j = frozen.spatial_jacobian(&u).unwrap();
                let h = {
                    let raw = Vector::from_fn(3, |_, _| rng.normal());
                    let t = m.project_tangent(&u, &raw);
                    &t / t.norm()
                };
                let eps = 1e-4;
                let up = m.retract(&u, &(&h * eps));
                let um = m.retract(&u, &(&h * -eps));
                let fd = (frozen.eval(&up) - frozen.eval(&um)) / (2.0 * eps);
                let fd_tan = m.project_tangent(&u, &fd);
                let got = j * &h;
                let denom = fd_tan.norm().max(1e-6);
                assert!(
                    (got - &fd_tan).norm() / denom < 1e-5,
                    "jacobian mismatch for {:?}",
                    field.kind
                );
            }
        }
    }

    #[test]
    fn intrinsic_matrix_trivial_cases() {
        // Constant kernel: zero map.
        let e1 = Manifold::euclidean(1);
        let constant = InteractionKernel::Custom {
            name: "const".into(),
            order: 1,
            phi: Arc::new(|_, _| 3.0),
            grad_u: Arc::new(|u, _| Vector::zeros(u.len())),
            grad_x_grad_u: Some(Arc::new(|u, _| Matrix::zeros(u.len(), u.len()))),
            jac_u: Some(Arc::new(|u, _| Matrix::zeros(u.len(), u.len()))),
        };
        let f = InteractionField::kernel(e1, constant);
        let mu = EmpiricalMeasure::dirac(e1, vec_from(&[0.4])).unwrap();
        let k = f.at_measure(&mu).intrinsic_matrix(&vec_from(&[0.1]), &vec_from(&[0.4])).unwrap();
        assert_eq!(k[(0, 0)], 0.0);

        // Phi(u, x) = u*x on Euclidean(1): identity map.
        let f = InteractionField::kernel(e1, InteractionKernel::Alignment { kappa: 1.0 });
        let k = f.at_measure(&mu).intrinsic_matrix(&vec_from(&[0.1]), &vec_from(&[0.4])).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn intrinsic_matrix_matches_support_point_fd() {
        // Move one support point along a tangent direction; the analytic
        // intrinsic derivative predicts the change of the field.
        let m = Manifold::sphere(2);
        let fields = [
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 }),
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 0.9, sigma: 0.8 },
            ),
            InteractionField::moment(
                m,
                MomentMap::MomentLinear { dirs: vec![vec_from(&[0.0, 0.0, 1.0])] },
                vec![ScalarField::Coordinate { axis: 0 }],
            ),
        ];
        let mut rng = CounterRng::new(23, 0);
        for field in &fields {
            for draw in 0..34u64 {
                let mu = sphere_measure(8, 31 + draw);
                let u = m.sample_uniform(1, &mut rng).unwrap().pop().unwrap();
                let j = (draw % 8) as usize; // support point to move
                let x = mu.points()[j].clone();
                let w = {
                    let raw = Vector::from_fn(3, |_, _| rng.normal());
                    let t = m.project_tangent(&x, &raw);
                    &t / t.norm()
                };
                let k = field.at_measure(&mu).intrinsic_matrix(&u, &x).unwrap();
                let wj = mu.weights()[j];
                let eps = 1e-5;
                let moved = |sign: f64| {
                    let mut pts = mu.points().to_vec();
                    pts[j] = m.retract(&x, &(&w * (sign * eps)));
                    EmpiricalMeasure::uniform(m, pts).unwrap()
                };
                let vp = field.evaluate(&u, &moved(1.0)).unwrap();
                let vm = field.evaluate(&u, &moved(-1.0)).unwrap();
                let fd = (vp - vm) / (2.0 * eps);
                let got = k * &w * wj;
                assert!(
                    (&got - &fd).norm() < 1e-4 * fd.norm().max(0.1),
                    "{:?}: |diff| = {}",
                    field.kind,
                    (got - fd).norm()
                );
            }
        }
    }

    #[test]
    fn unsupported_order_for_pair_kernels() {
        let e2 = Manifold::euclidean(2);
        let pair = InteractionKernel::Custom {
            name: "pair".into(),
            order: 2,
            phi: Arc::new(|u, xs| u.dot(xs[0]) * u.dot(xs[1])),
            grad_u: Arc::new(|u, xs| xs[0] * u.dot(xs[1]) + xs[1] * u.dot(xs[0])),
            grad_x_grad_u: None,
            jac_u: None,
        };
        let f = InteractionField::kernel(e2, pair);
        let mu = EmpiricalMeasure::uniform(e2, vec![vec_from(&[1.0, 0.0]), vec_from(&[0.0, 1.0])])
            .unwrap();
        // Simulable...
        let v = f.evaluate(&vec_from(&[1.0, 1.0]), &mu).unwrap();
        assert!(v.norm() > 0.0);
        // ...but not analytically differentiable in the measure.
        assert!(matches!(
            f.at_measure(&mu).intrinsic_matrix(&vec_from(&[1.0, 1.0]), &vec_from(&[1.0, 0.0])),
            Err(Error::UnsupportedOrder(_))
        ));
    }

    #[test]
    fn pair_kernel_value_matches_double_sum() {
        // Order-2 evaluation really is the k-fold product integral.
        let e2 = Manifold::euclidean(2);
        let pair = InteractionKernel::Custom {
            name: "pair".into(),
            order: 2,
            phi: Arc::new(|u, xs| u.dot(xs[0]) * u.dot(xs[1])),
            grad_u: Arc::new(|u, xs| xs[0] * u.dot(xs[1]) + xs[1] * u.dot(xs[0])),
            grad_x_grad_u: None,
            jac_u: None,
        };
        let f = InteractionField::kernel(e2, pair.clone());
        let pts = [vec_from(&[1.0, 0.5]), vec_from(&[-0.2, 0.7]), vec_from(&[0.1, -1.0])];
        let mu = EmpiricalMeasure::uniform(e2, pts.to_vec()).unwrap();
        let u = vec_from(&[0.4, 0.9]);
        let got = f.evaluate(&u, &mu).unwrap();
        let mut expect = Vector::zeros(2);
        for a in &pts {
            for b in &pts {
                expect += pair.grad_u(&u, &[a, b]) / 9.0;
            }
        }
        assert!((got - expect).norm() < 1e-14);
    }

    #[test]
    fn ito_correction_cases() {
        // All-zero diffusions.
        let e1 = Manifold::euclidean(1);
        let zero = InteractionField::zero(e1);
        let mu = EmpiricalMeasure::dirac(e1, vec_from(&[0.7])).unwrap();
        let frozen = [zero.at_measure(&mu)];
        assert_eq!(ito_correction(&frozen, &vec_from(&[0.7])).unwrap().norm(), 0.0);

        // V(u) = u on Euclidean(1): correction is u/2.
        let linear = InteractionField::autonomous(e1, MomentMap::Identity { scale: 1.0 });
        let frozen = [linear.at_measure(&mu)];
        let c = ito_correction(&frozen, &vec_from(&[0.7])).unwrap();
        assert!((c[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn mean_field_operator_matches_direct_sum() {
        let m = Manifold::sphere(2);
        let mu = sphere_measure(10, 41);
        let mut rng = CounterRng::new(13, 5);
        let z: Vec<Matrix> = mu
            .points()
            .iter()
            .map(|x| {
                let raw = Matrix::from_fn(3, 2, |_, _| rng.normal());
                m.tangent_projector(x) * raw
            })
            .collect();
        let fields = [
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.4 }),
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 0.6, sigma: 1.0 },
            ),
            InteractionField::moment(
                m,
                MomentMap::MomentLinear { dirs: vec![vec_from(&[0.0, 1.0, 0.0])] },
                vec![ScalarField::Coordinate { axis: 2 }],
            ),
        ];
        for field in &fields {
            let frozen = field.at_measure(&mu);
            let op = frozen.mean_field_operator(mu.points(), &z).unwrap();
            let u = m.sample_uniform(1, &mut rng).unwrap().pop().unwrap();
            let fast = op.apply(&u);
            let mut direct = Matrix::zeros(3, 2);
            for ((x, &w), zr) in mu.points().iter().zip(mu.weights()).zip(&z) {
                direct += frozen.intrinsic_matrix(&u, x).unwrap() * zr * w;
            }
            assert!((fast - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn measure_lipschitz_bound_holds() {
        let m = Manifold::sphere(2);
        let field = InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 });
        let l = field.lipschitz_bound().unwrap();
        let mut rng = CounterRng::new(61, 0);
        for seed in 0..10 {
            let mu = sphere_measure(12, 600 + seed);
            let nu = sphere_measure(12, 700 + seed);
            let g2 = mu.wasserstein2(&nu).unwrap();
            let u = m.sample_uniform(1, &mut rng).unwrap().pop().unwrap();
            let dv = (field.evaluate(&u, &mu).unwrap() - field.evaluate(&u, &nu).unwrap()).norm();
            assert!(dv <= l * g2 + 1e-12, "dv = {dv}, bound = {}", l * g2);
        }
    }

    #[test]
    fn self_checks_pass_for_builtins() {
        let m = Manifold::sphere(2);
        let mut rng = CounterRng::new(3, 3);
        for field in [
            InteractionField::kernel(m, InteractionKernel::Alignment { kappa: 1.0 }),
            InteractionField::kernel(
                m,
                InteractionKernel::GaussianChordal { kappa: 1.0, sigma: 0.7 },
            ),
            InteractionField::moment(
                m,
                MomentMap::MomentLinear { dirs: vec![vec_from(&[1.0, 0.0, 0.0])] },
                vec![ScalarField::SquaredCoordinate { axis: 1 }],
            ),
        ] {
            field.self_check(&mut rng).unwrap();
        }
    }

    #[test]
    fn manifold_mismatch_detected() {
        let f = InteractionField::kernel(
            Manifold::sphere(2),
            InteractionKernel::Alignment { kappa: 1.0 },
        );
        let mu =
            EmpiricalMeasure::dirac(Manifold::euclidean(3), vec_from(&[1.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            f.evaluate(&vec_from(&[1.0, 0.0, 0.0]), &mu),
            Err(Error::ManifoldMismatch(_))
        ));
    }
}
