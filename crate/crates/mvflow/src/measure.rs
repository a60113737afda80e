//! Finite-support probability measures on a manifold.
//!
//! `EmpiricalMeasure` is the computational stand-in for a point of the
//! Wasserstein space: a weighted point cloud with value semantics. Distances
//! are exact discrete optimal transport with squared geodesic ground cost.

use crate::error::{Error, Result};
use crate::geometry::Manifold;
use crate::rng::CounterRng;
use crate::transport::{solve_assignment, solve_transport};
use crate::{Matrix, Vector};
use std::io::{BufRead, Write};

/// Default support cap for exact Wasserstein computation.
pub const EXACT_SUPPORT_CAP: usize = 512;

#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    manifold: Manifold,
    points: Vec<Vector>,
    weights: Vec<f64>,
}

/// Result of a Wasserstein-2 evaluation; `approximate` marks subsampled mode.
#[derive(Debug, Clone, Copy)]
pub struct W2Estimate {
    pub value: f64,
    pub approximate: bool,
}

/// Options for [`EmpiricalMeasure::wasserstein2_with`].
#[derive(Debug, Clone, Copy)]
pub struct W2Options {
    pub cap: usize,
    /// When set, supports above the cap are subsampled to this size (flagged
    /// approximate) instead of erroring.
    pub subsample: Option<(usize, u64)>,
}

impl Default for W2Options {
    fn default() -> Self {
        W2Options { cap: EXACT_SUPPORT_CAP, subsample: None }
    }
}

impl EmpiricalMeasure {
    pub fn new(manifold: Manifold, points: Vec<Vector>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "measure needs matching nonempty points/weights, got {}/{}",
                points.len(),
                weights.len()
            )));
        }
        // Kahan summation: the 1e-12 mass budget must not be eaten by
        // accumulation error on 10^5-point supports.
        let (mut total, mut comp) = (0.0f64, 0.0f64);
        for &w in &weights {
            let y = w - comp;
            let t = total + y;
            comp = (t - total) - y;
            total = t;
        }
        if weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "weights must be nonnegative and sum to 1 (sum = {total})"
            )));
        }
        for p in &points {
            if !manifold.is_on_manifold(p, 1e-8) {
                return Err(Error::ManifoldMismatch(format!(
                    "support point off {} by {:.3e}",
                    manifold.spec_string(),
                    manifold.off_manifold_residual(p)
                )));
            }
        }
        Ok(EmpiricalMeasure { manifold, points, weights })
    }

    /// Uniform weights over the given points.
    pub fn uniform(manifold: Manifold, points: Vec<Vector>) -> Result<Self> {
        let n = points.len();
        Self::new(manifold, points, vec![1.0 / n as f64; n])
    }

    /// Skips the on-manifold check; for solver snapshots in diagnostic modes
    /// that deliberately let states drift off the manifold.
    pub(crate) fn new_unchecked(
        manifold: Manifold,
        points: Vec<Vector>,
        weights: Vec<f64>,
    ) -> Self {
        EmpiricalMeasure { manifold, points, weights }
    }

    pub fn dirac(manifold: Manifold, point: Vector) -> Result<Self> {
        Self::new(manifold, vec![point], vec![1.0])
    }

    pub fn manifold(&self) -> Manifold {
        self.manifold
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_uniform_weights(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&x| (x - w).abs() < 1e-12)
    }

    /// Pushforward under a point map; weights are untouched.
    pub fn pushforward<F: Fn(&Vector) -> Vector>(&self, map: F) -> EmpiricalMeasure {
        EmpiricalMeasure {
            manifold: self.manifold,
            points: self.points.iter().map(&map).collect(),
            weights: self.weights.clone(),
        }
    }

    /// `<f, mu> = sum w_i f(x_i)`.
    pub fn integrate<F: Fn(&Vector) -> f64>(&self, f: F) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, &w)| w * f(p)).sum()
    }

    /// Exact Wasserstein-2 distance (squared geodesic ground cost), default cap.
    pub fn wasserstein2(&self, other: &EmpiricalMeasure) -> Result<f64> {
        Ok(self.wasserstein2_with(other, &W2Options::default())?.value)
    }

    pub fn wasserstein2_with(
        &self,
        other: &EmpiricalMeasure,
        opts: &W2Options,
    ) -> Result<W2Estimate> {
        if self.manifold != other.manifold {
            return Err(Error::ManifoldMismatch(format!(
                "wasserstein2 between {} and {}",
                self.manifold.spec_string(),
                other.manifold.spec_string()
            )));
        }
        let over_cap = self.len() > opts.cap || other.len() > opts.cap;
        if over_cap {
            let Some((size, seed)) = opts.subsample else {
                return Err(Error::SupportTooLarge {
                    size: self.len().max(other.len()),
                    cap: opts.cap,
                });
            };
            let a = self.subsample(size, seed)?;
            let b = other.subsample(size, seed ^ 0x5eed)?;
            let value = a.exact_w2(&b)?;
            return Ok(W2Estimate { value, approximate: true });
        }
        Ok(W2Estimate { value: self.exact_w2(other)?, approximate: false })
    }

    fn exact_w2(&self, other: &EmpiricalMeasure) -> Result<f64> {
        let m = self.manifold;
        let cost = Matrix::from_fn(self.len(), other.len(), |i, j| {
            let d = m.distance(&self.points[i], &other.points[j]);
            d * d
        });
        let sq = if self.len() == other.len()
            && self.has_uniform_weights()
            && other.has_uniform_weights()
        {
            let (total, _) = solve_assignment(&cost);
            total / self.len() as f64
        } else {
            solve_transport(&cost, &self.weights, &other.weights)?
        };
        Ok(sq.max(0.0).sqrt())
    }

    /// Equal-weight i.i.d. subsample (with replacement for weighted supports).
    fn subsample(&self, size: usize, seed: u64) -> Result<EmpiricalMeasure> {
        let mut rng = CounterRng::new(seed, 0);
        let mut pts = Vec::with_capacity(size);
        for _ in 0..size {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut chosen = self.len() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            pts.push(self.points[chosen].clone());
        }
        EmpiricalMeasure::uniform(self.manifold, pts)
    }

    /// Serialize to JSONL: one `{"coords": [...], "weight": w}` per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (p, w) in self.points.iter().zip(&self.weights) {
            let coords: Vec<f64> = p.iter().copied().collect();
            let line = serde_json::json!({ "coords": coords, "weight": w });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(manifold: Manifold, reader: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("bad JSONL line: {e}")))?;
            let coords: Vec<f64> = v["coords"]
                .as_array()
                .ok_or_else(|| Error::InvalidInput("JSONL line missing coords".into()))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(f64::NAN))
                .collect();
            let w = v["weight"]
                .as_f64()
                .ok_or_else(|| Error::InvalidInput("JSONL line missing weight".into()))?;
            points.push(Vector::from_column_slice(&coords));
            weights.push(w);
        }
        EmpiricalMeasure::new(manifold, points, weights)
    }
}

/// I.i.d. equal-weight sample specification.
#[derive(Debug, Clone)]
pub enum SampleSpec {
    /// Uniform w.r.t. Riemannian volume (sphere, torus).
    Uniform,
    /// Ambient Gaussian N(0, sigma^2 I), Euclidean manifolds only.
    Gaussian { sigma: f64 },
}

/// Draw `n` i.i.d. points and wrap them as a uniform-weight measure.
pub fn sample_iid(
    manifold: Manifold,
    spec: &SampleSpec,
    n: usize,
    rng: &mut CounterRng,
) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::InvalidInput("sample_iid needs n >= 1".into()));
    }
    let points = match spec {
        SampleSpec::Uniform => manifold.sample_uniform(n, rng)?,
        SampleSpec::Gaussian { sigma } => {
            if !matches!(manifold, Manifold::Euclidean { .. }) {
                return Err(Error::InvalidInput(
                    "gaussian sampler is defined on Euclidean manifolds only".into(),
                ));
            }
            (0..n)
                .map(|_| Vector::from_fn(manifold.ambient_dim(), |_, _| sigma * rng.normal()))
                .collect()
        }
    };
    EmpiricalMeasure::uniform(manifold, points)
}
