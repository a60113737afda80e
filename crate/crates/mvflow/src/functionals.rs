//! Test functionals `F : P_2(M) -> R` with analytic intrinsic derivatives.
//!
//! Three variants:
//!
//! * `Linear`: `F(mu) = <f, mu>` with kernel `D_I F(mu)(x) = ∇f(x)`;
//! * `Composite`: `F(mu) = γ(<f, mu>)` with kernel `γ'(<f,mu>) ∇f(x)`;
//! * `PairInteraction`: `F(mu) = ∫∫ h dmu dmu` with the symmetrized kernel
//!   `∫ [∇_1 h(x,y) + ∇_2 h(y,x)] mu(dy)`.
//!
//! Linear and Composite additionally carry the analytic once- and
//! twice-applied noise operators `A_i = D_I^{V_i(.,mu)}`, which the chaos
//! estimators use at grid edges and as oracles.

use crate::error::{Error, Result};
use crate::fields::ScalarField;
use crate::measure::EmpiricalMeasure;
use crate::solver::FieldSet;
use crate::Vector;
use std::sync::Arc;

/// Smooth scalar curve with two derivatives.
#[derive(Clone, Debug)]
pub enum ScalarCurve {
    /// `γ(s) = a s + b`
    Affine { a: f64, b: f64 },
    /// `γ(s) = s^2`
    Square,
    /// `γ(s) = exp(rate s)`
    Exp { rate: f64 },
    /// `γ(s) = sin(omega s)`
    Sin { omega: f64 },
}

impl ScalarCurve {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            ScalarCurve::Affine { a, b } => a * s + b,
            ScalarCurve::Square => s * s,
            ScalarCurve::Exp { rate } => (rate * s).exp(),
            ScalarCurve::Sin { omega } => (omega * s).sin(),
        }
    }

    pub fn d1(&self, s: f64) -> f64 {
        match self {
            ScalarCurve::Affine { a, .. } => *a,
            ScalarCurve::Square => 2.0 * s,
            ScalarCurve::Exp { rate } => rate * (rate * s).exp(),
            ScalarCurve::Sin { omega } => omega * (omega * s).cos(),
        }
    }

    pub fn d2(&self, s: f64) -> f64 {
        match self {
            ScalarCurve::Affine { .. } => 0.0,
            ScalarCurve::Square => 2.0,
            ScalarCurve::Exp { rate } => rate * rate * (rate * s).exp(),
            ScalarCurve::Sin { omega } => -omega * omega * (omega * s).sin(),
        }
    }
}

/// Symmetric pair kernel `h : M x M -> R` with the gradient in its first slot.
#[derive(Clone)]
#[allow(clippy::type_complexity)]
pub enum PairKernel {
    /// `h(x, y) = κ <x, y>`
    ChordalDot { kappa: f64 },
    /// `h(x, y) = |x - y|^2`
    ChordalSqDist,
    Custom {
        name: String,
        value: Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>,
        grad1: Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>,
    },
}

impl std::fmt::Debug for PairKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PairKernel::ChordalDot { kappa } => write!(f, "ChordalDot({kappa})"),
            PairKernel::ChordalSqDist => write!(f, "ChordalSqDist"),
            PairKernel::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl PairKernel {
    pub fn value(&self, x: &Vector, y: &Vector) -> f64 {
        match self {
            PairKernel::ChordalDot { kappa } => kappa * x.dot(y),
            PairKernel::ChordalSqDist => (x - y).norm_squared(),
            PairKernel::Custom { value, .. } => value(x, y),
        }
    }

    /// Ambient `∇_x h(x, y)`.
    pub fn grad1(&self, x: &Vector, y: &Vector) -> Vector {
        match self {
            PairKernel::ChordalDot { kappa } => y * *kappa,
            PairKernel::ChordalSqDist => (x - y) * 2.0,
            PairKernel::Custom { grad1, .. } => grad1(x, y),
        }
    }
}

#[derive(Clone, Debug)]
pub enum MeasureFunctional {
    Linear { f: ScalarField },
    Composite { curve: ScalarCurve, f: ScalarField },
    PairInteraction { h: PairKernel },
}

impl MeasureFunctional {
    pub fn linear(f: ScalarField) -> Self {
        MeasureFunctional::Linear { f }
    }

    pub fn composite(curve: ScalarCurve, f: ScalarField) -> Self {
        MeasureFunctional::Composite { curve, f }
    }

    pub fn pair(h: PairKernel) -> Self {
        MeasureFunctional::PairInteraction { h }
    }

    pub fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        match self {
            MeasureFunctional::Linear { f } => mu.integrate(|x| f.value(x)),
            MeasureFunctional::Composite { curve, f } => curve.value(mu.integrate(|x| f.value(x))),
            MeasureFunctional::PairInteraction { h } => {
                let mut acc = 0.0;
                for (x, &wx) in mu.points().iter().zip(mu.weights()) {
                    for (y, &wy) in mu.points().iter().zip(mu.weights()) {
                        acc += wx * wy * h.value(x, y);
                    }
                }
                acc
            }
        }
    }

    /// Analytic intrinsic-derivative kernel `D_I F(mu)(x)`, a tangent vector
    /// at `x`.
    pub fn intrinsic_kernel(&self, mu: &EmpiricalMeasure, x: &Vector) -> Vector {
        let m = mu.manifold();
        match self {
            MeasureFunctional::Linear { f } => m.project_tangent(x, &f.gradient(x)),
            MeasureFunctional::Composite { curve, f } => {
                let moment = mu.integrate(|p| f.value(p));
                m.project_tangent(x, &f.gradient(x)) * curve.d1(moment)
            }
            MeasureFunctional::PairInteraction { h } => {
                let n = m.ambient_dim();
                let mut acc = Vector::zeros(n);
                for (y, &wy) in mu.points().iter().zip(mu.weights()) {
                    // d/dx of h(x, y) + h(y, x) integrated in y.
                    acc.axpy(wy, &h.grad1(x, y), 1.0);
                    acc.axpy(wy, &grad2(h, y, x), 1.0);
                }
                m.project_tangent(x, &acc)
            }
        }
    }

    /// Analytic pairing `D_I^V F(mu) = ∫ <D_I F(mu)(x), V(x)> mu(dx)`.
    pub fn pairing<V: Fn(&Vector) -> Vector>(&self, mu: &EmpiricalMeasure, dir: V) -> f64 {
        mu.points()
            .iter()
            .zip(mu.weights())
            .map(|(x, &w)| w * self.intrinsic_kernel(mu, x).dot(&dir(x)))
            .sum()
    }

    /// Analytic `A_i F(mu) = D_I^{V_i(., mu)} F(mu)`.
    pub fn apply_a(&self, fields: &FieldSet, i: usize, mu: &EmpiricalMeasure) -> Result<f64> {
        let diffusion = fields
            .diffusions
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("no diffusion field with index {i}")))?;
        let frozen = diffusion.at_measure(mu);
        Ok(self.pairing(mu, |x| frozen.eval(x)))
    }

    /// Analytic `A_i A_i F(mu)`; Linear and Composite variants only.
    ///
    /// With `S(mu) = ∫ <∇f, v_i> dmu` (so `A_i F = γ'(m) S`), the intrinsic
    /// kernel of `S` collects a transport term through the Hessian of `f`,
    /// a term through the spatial Jacobian of `v_i`, and the mean-field term
    /// through `D_I V_i`; the outer `A_i` pairs everything with `v_i` again.
    pub fn apply_a_twice(&self, fields: &FieldSet, i: usize, mu: &EmpiricalMeasure) -> Result<f64> {
        let f = match self {
            MeasureFunctional::Linear { f } | MeasureFunctional::Composite { f, .. } => f,
            MeasureFunctional::PairInteraction { .. } => {
                return Err(Error::UnsupportedOrder(
                    "second intrinsic derivative of pair-interaction functionals is FD-only".into(),
                ))
            }
        };
        let diffusion = fields
            .diffusions
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("no diffusion field with index {i}")))?;
        let m = mu.manifold();
        let frozen = diffusion.at_measure(mu);
        if !frozen.has_intrinsic_derivative() {
            return Err(Error::UnsupportedOrder(
                "A_i A_i needs an analytic intrinsic derivative of the diffusion field".into(),
            ));
        }

        // S and the tangent values v_i over the support.
        let vs: Vec<Vector> = mu.points().iter().map(|x| frozen.eval(x)).collect();
        let s: f64 = mu
            .points()
            .iter()
            .zip(mu.weights())
            .zip(&vs)
            .map(|((x, &w), v)| w * f.gradient(x).dot(v))
            .sum();

        // A_i S = sum_y w_y <D_I S(y), v_i(y)>.
        let mut a_s = 0.0;
        for ((y, &wy), vy) in mu.points().iter().zip(mu.weights()).zip(&vs) {
            // Transport part: P_y [Hf(y) v_i(y) + (Dv_i)(y)^T ∇f(y)].
            let mut kernel = f.hessian(y)? * vy;
            kernel += frozen.jacobian_of_projected(y)?.transpose() * f.gradient(y);
            let mut kernel = m.project_tangent(y, &kernel);
            // Mean-field part: sum_r w_r [D_I V_i(x_r, mu)(y)]^T P ∇f(x_r).
            for (x, &wx) in mu.points().iter().zip(mu.weights()) {
                let k = frozen.intrinsic_matrix(x, y)?;
                let grad = m.project_tangent(x, &f.gradient(x));
                kernel.axpy(wx, &(k.transpose() * grad), 1.0);
            }
            a_s += wy * kernel.dot(vy);
        }

        match self {
            MeasureFunctional::Linear { .. } => Ok(a_s),
            MeasureFunctional::Composite { curve, .. } => {
                let moment = mu.integrate(|p| f.value(p));
                Ok(curve.d2(moment) * s * s + curve.d1(moment) * a_s)
            }
            MeasureFunctional::PairInteraction { .. } => unreachable!(),
        }
    }

    /// Whether [`apply_a_twice`](Self::apply_a_twice) is available.
    pub fn has_second_derivative(&self) -> bool {
        !matches!(self, MeasureFunctional::PairInteraction { .. })
    }
}

/// `∇_y h(x, y)` computed as `grad1` of the transposed kernel.
fn grad2(h: &PairKernel, x: &Vector, y: &Vector) -> Vector {
    match h {
        PairKernel::ChordalDot { kappa } => x * *kappa,
        PairKernel::ChordalSqDist => (y - x) * 2.0,
        // Symmetric custom kernels: ∇_2 h(x, y) = ∇_1 h(y, x).
        PairKernel::Custom { grad1, .. } => grad1(y, x),
    }
}
