//! Manifolds presented through explicit isometric embeddings.
//!
//! Three built-in families, each with closed-form projection, tangent
//! projector, exact exponential-map retraction and geodesic distance:
//!
//! * `Euclidean(d)` — ambient dimension `d`, everything trivial;
//! * `Sphere(d)` — unit sphere in `R^{d+1}`;
//! * `FlatTorus(d)` — product of `d` unit circles embedded in `R^{2d}`,
//!   one `(cos θ_k, sin θ_k)` block per factor.
//!
//! Points and tangent vectors are plain ambient vectors; operations that
//! produce points keep them on the manifold to machine precision, and debug
//! builds assert the on-manifold / tangency invariants (release builds
//! renormalize instead).

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::{Matrix, Vector};

/// On-manifold tolerance used by debug assertions.
pub const ON_MANIFOLD_TOL: f64 = 1e-10;
/// Relative tangency tolerance.
pub const TANGENCY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Euclidean { dim: usize },
    Sphere { dim: usize },
    FlatTorus { dim: usize },
}

impl Manifold {
    pub fn euclidean(dim: usize) -> Self {
        Manifold::Euclidean { dim }
    }

    pub fn sphere(dim: usize) -> Self {
        Manifold::Sphere { dim }
    }

    pub fn flat_torus(dim: usize) -> Self {
        Manifold::FlatTorus { dim }
    }

    /// Dimension of the ambient embedding space.
    pub fn ambient_dim(&self) -> usize {
        match *self {
            Manifold::Euclidean { dim } => dim,
            Manifold::Sphere { dim } => dim + 1,
            Manifold::FlatTorus { dim } => 2 * dim,
        }
    }

    /// Intrinsic dimension.
    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Manifold::Euclidean { dim }
            | Manifold::Sphere { dim }
            | Manifold::FlatTorus { dim } => dim,
        }
    }

    /// Parse a config string: `euclidean:d`, `sphere:d` or `torus:d`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, d) = spec.split_once(':').ok_or_else(|| {
            Error::ConfigInvalid(format!("manifold spec `{spec}` missing `:dim`"))
        })?;
        let dim: usize = d
            .parse()
            .map_err(|_| Error::ConfigInvalid(format!("bad manifold dimension in `{spec}`")))?;
        if dim == 0 {
            return Err(Error::ConfigInvalid("manifold dimension must be >= 1".into()));
        }
        match kind {
            "euclidean" => Ok(Manifold::euclidean(dim)),
            "sphere" => Ok(Manifold::sphere(dim)),
            "torus" => Ok(Manifold::flat_torus(dim)),
            other => Err(Error::ConfigInvalid(format!("unknown manifold kind `{other}`"))),
        }
    }

    pub fn spec_string(&self) -> String {
        match *self {
            Manifold::Euclidean { dim } => format!("euclidean:{dim}"),
            Manifold::Sphere { dim } => format!("sphere:{dim}"),
            Manifold::FlatTorus { dim } => format!("torus:{dim}"),
        }
    }

    /// Squared distance of `p` from the manifold, as a cheap residual.
    pub fn off_manifold_residual(&self, p: &Vector) -> f64 {
        match *self {
            Manifold::Euclidean { .. } => 0.0,
            Manifold::Sphere { .. } => (p.norm() - 1.0).abs(),
            Manifold::FlatTorus { dim } => {
                let mut worst: f64 = 0.0;
                for k in 0..dim {
                    let b = (p[2 * k].powi(2) + p[2 * k + 1].powi(2)).sqrt();
                    worst = worst.max((b - 1.0).abs());
                }
                worst
            }
        }
    }

    pub fn is_on_manifold(&self, p: &Vector, tol: f64) -> bool {
        p.len() == self.ambient_dim() && self.off_manifold_residual(p) <= tol
    }

    /// Nearest-point projection onto the manifold.
    ///
    /// Errors with `DegeneratePoint` where the projection is not unique
    /// (sphere: origin; torus: a vanishing circle block).
    pub fn project(&self, p: &Vector) -> Result<Vector> {
        self.check_ambient(p)?;
        match *self {
            Manifold::Euclidean { .. } => Ok(p.clone()),
            Manifold::Sphere { .. } => {
                let n = p.norm();
                if n < 1e-14 {
                    return Err(Error::DegeneratePoint(
                        "sphere projection of near-zero vector".into(),
                    ));
                }
                Ok(p / n)
            }
            Manifold::FlatTorus { dim } => {
                let mut q = p.clone();
                for k in 0..dim {
                    let (a, b) = (p[2 * k], p[2 * k + 1]);
                    let n = (a * a + b * b).sqrt();
                    if n < 1e-14 {
                        return Err(Error::DegeneratePoint(format!(
                            "torus projection: circle block {k} has near-zero norm"
                        )));
                    }
                    q[2 * k] = a / n;
                    q[2 * k + 1] = b / n;
                }
                Ok(q)
            }
        }
    }

    /// Orthogonal projection of an ambient vector onto `T_xM`.
    pub fn project_tangent(&self, x: &Vector, v: &Vector) -> Vector {
        match *self {
            Manifold::Euclidean { .. } => v.clone(),
            Manifold::Sphere { .. } => {
                // Normalize so evaluation slightly off the manifold stays sane.
                let n2 = x.norm_squared();
                v - x * (x.dot(v) / n2)
            }
            Manifold::FlatTorus { dim } => {
                let mut out = v.clone();
                for k in 0..dim {
                    let (a, b) = (x[2 * k], x[2 * k + 1]);
                    let n2 = a * a + b * b;
                    let c = (a * v[2 * k] + b * v[2 * k + 1]) / n2;
                    out[2 * k] -= c * a;
                    out[2 * k + 1] -= c * b;
                }
                out
            }
        }
    }

    /// Tangent projector at `x` as an ambient matrix (idempotent, symmetric).
    pub fn tangent_projector(&self, x: &Vector) -> Matrix {
        let n = self.ambient_dim();
        match *self {
            Manifold::Euclidean { .. } => Matrix::identity(n, n),
            Manifold::Sphere { .. } => {
                let u = x / x.norm();
                Matrix::identity(n, n) - &u * u.transpose()
            }
            Manifold::FlatTorus { dim } => {
                let mut p = Matrix::identity(n, n);
                for k in 0..dim {
                    let (a, b) = (x[2 * k], x[2 * k + 1]);
                    let n2 = a * a + b * b;
                    p[(2 * k, 2 * k)] -= a * a / n2;
                    p[(2 * k, 2 * k + 1)] -= a * b / n2;
                    p[(2 * k + 1, 2 * k)] -= a * b / n2;
                    p[(2 * k + 1, 2 * k + 1)] -= b * b / n2;
                }
                p
            }
        }
    }

    /// `(D_x P)[h] w` — derivative of the tangent projector at `x` along the
    /// tangent direction `h`, applied to `w`. Zero on Euclidean space; on the
    /// sphere and torus it is `-(h <x,w> + x <h,w>)` (per circle block).
    pub fn projector_derivative_apply(&self, x: &Vector, h: &Vector, w: &Vector) -> Vector {
        match *self {
            Manifold::Euclidean { dim } => Vector::zeros(dim),
            Manifold::Sphere { .. } => -(h * x.dot(w) + x * h.dot(w)),
            Manifold::FlatTorus { dim } => {
                let mut out = Vector::zeros(2 * dim);
                for k in 0..dim {
                    let (xa, xb) = (x[2 * k], x[2 * k + 1]);
                    let (ha, hb) = (h[2 * k], h[2 * k + 1]);
                    let (wa, wb) = (w[2 * k], w[2 * k + 1]);
                    let xw = xa * wa + xb * wb;
                    let hw = ha * wa + hb * wb;
                    out[2 * k] = -(ha * xw + xa * hw);
                    out[2 * k + 1] = -(hb * xw + xb * hw);
                }
                out
            }
        }
    }

    /// Exact exponential map: great-circle advance on the sphere, per-angle
    /// advance on the torus, addition on Euclidean space.
    pub fn retract(&self, x: &Vector, v: &Vector) -> Vector {
        debug_assert!(
            self.is_on_manifold(x, ON_MANIFOLD_TOL),
            "retract base off manifold by {:.3e}",
            self.off_manifold_residual(x)
        );
        match *self {
            Manifold::Euclidean { .. } => x + v,
            Manifold::Sphere { .. } => {
                let t = v.norm();
                if t == 0.0 {
                    return x.clone();
                }
                let out = x * t.cos() + v * (t.sin() / t);
                // Exact formula already lands on the sphere; renormalize to
                // keep the invariant exact over millions of steps.
                &out / out.norm()
            }
            Manifold::FlatTorus { dim } => {
                let mut out = x.clone();
                for k in 0..dim {
                    let (a, b) = (x[2 * k], x[2 * k + 1]);
                    // Signed angle increment: component of v along the block tangent (-b, a).
                    let ang = -b * v[2 * k] + a * v[2 * k + 1];
                    let (s, c) = ang.sin_cos();
                    out[2 * k] = a * c - b * s;
                    out[2 * k + 1] = a * s + b * c;
                    let n = (out[2 * k].powi(2) + out[2 * k + 1].powi(2)).sqrt();
                    out[2 * k] /= n;
                    out[2 * k + 1] /= n;
                }
                out
            }
        }
    }

    /// Geodesic distance.
    ///
    /// Sphere and torus use the half-chord form `2 asin(|x-y|/2)`, which is
    /// exact at zero separation and stable near antipodes.
    pub fn distance(&self, x: &Vector, y: &Vector) -> f64 {
        match *self {
            Manifold::Euclidean { .. } => (x - y).norm(),
            Manifold::Sphere { .. } => 2.0 * ((x - y).norm() * 0.5).clamp(-1.0, 1.0).asin(),
            Manifold::FlatTorus { dim } => {
                let mut s = 0.0;
                for k in 0..dim {
                    let da = x[2 * k] - y[2 * k];
                    let db = x[2 * k + 1] - y[2 * k + 1];
                    let chord = (da * da + db * db).sqrt();
                    let d = 2.0 * (chord * 0.5).clamp(-1.0, 1.0).asin();
                    s += d * d;
                }
                s.sqrt()
            }
        }
    }

    /// I.i.d. samples from the Riemannian volume measure.
    ///
    /// Sphere: normalized Gaussians; torus: uniform angles. Euclidean space
    /// carries no uniform probability measure, so that case is an error.
    pub fn sample_uniform(&self, n: usize, rng: &mut CounterRng) -> Result<Vec<Vector>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample_uniform needs n >= 1".into()));
        }
        match *self {
            Manifold::Euclidean { .. } => Err(Error::InvalidInput(
                "no uniform probability measure on Euclidean space; use a gaussian sampler".into(),
            )),
            Manifold::Sphere { dim } => {
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let g = Vector::from_fn(dim + 1, |_, _| rng.normal());
                    let norm = g.norm();
                    if norm > 1e-8 {
                        out.push(g / norm);
                    }
                }
                Ok(out)
            }
            Manifold::FlatTorus { dim } => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut p = Vector::zeros(2 * dim);
                    for k in 0..dim {
                        let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
                        p[2 * k] = theta.cos();
                        p[2 * k + 1] = theta.sin();
                    }
                    out.push(p);
                }
                Ok(out)
            }
        }
    }

    /// Deterministic orthonormal basis of `T_xM` (Gram-Schmidt over projected
    /// ambient axes, kept in axis order).
    pub fn tangent_basis(&self, x: &Vector) -> Vec<Vector> {
        let n = self.ambient_dim();
        let d = self.intrinsic_dim();
        let mut basis: Vec<Vector> = Vec::with_capacity(d);
        for a in 0..n {
            if basis.len() == d {
                break;
            }
            let mut e = Vector::zeros(n);
            e[a] = 1.0;
            let mut v = self.project_tangent(x, &e);
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
            let norm = v.norm();
            if norm > 1e-8 {
                basis.push(v / norm);
            }
        }
        debug_assert_eq!(basis.len(), d);
        basis
    }

    fn check_ambient(&self, p: &Vector) -> Result<()> {
        if p.len() != self.ambient_dim() {
            return Err(Error::InvalidInput(format!(
                "ambient dimension mismatch: point has {} coords, manifold {} expects {}",
                p.len(),
                self.spec_string(),
                self.ambient_dim()
            )));
        }
        Ok(())
    }
}

/// Embed torus angles into ambient coordinates.
pub fn torus_point_from_angles(angles: &[f64]) -> Vector {
    let mut p = Vector::zeros(2 * angles.len());
    for (k, th) in angles.iter().enumerate() {
        p[2 * k] = th.cos();
        p[2 * k + 1] = th.sin();
    }
    p
}
