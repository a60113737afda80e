//! Experiment configuration: one flat, human-editable JSON file.
//!
//! The schema is strict (unknown keys are rejected) and every default is
//! materialized when the resolved config is written back, so a run can be
//! reproduced from its output directory alone.

use crate::error::{Error, Result};
use crate::fields::{InteractionField, InteractionKernel, MomentMap, ScalarField};
use crate::functionals::{MeasureFunctional, PairKernel, ScalarCurve};
use crate::geometry::Manifold;
use crate::measure::{sample_iid, EmpiricalMeasure, SampleSpec};
use crate::rng::{derive_stream, CounterRng};
use crate::solver::{FieldSet, Scheme, SolverConfig};
use crate::{vec_from, Vector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// `euclidean:d`, `sphere:d` or `torus:d`.
    pub manifold: String,
    pub fields: FieldsSpec,
    pub initial_measure: MeasureSpec,
    #[serde(default)]
    pub functionals: Vec<FunctionalSpec>,
    pub solver: SolverSpec,
    #[serde(default)]
    pub budgets: BudgetSpec,
    #[serde(default)]
    pub suites: Vec<String>,
    #[serde(default)]
    pub tracked: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSpec {
    pub drift: FieldSpec,
    #[serde(default)]
    pub diffusions: Vec<FieldSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Kernel {
        kernel: KernelSpec,
    },
    Moment {
        map: MapSpec,
        #[serde(default)]
        observables: Vec<ObservableSpec>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Alignment { kappa: f64 },
    GaussianChordal { kappa: f64, sigma: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    Constant { v: Vec<f64> },
    Identity { scale: f64 },
    AxisRotation { axis: usize, scale: f64 },
    MomentLinear { dirs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableSpec {
    Constant { c: f64 },
    Coordinate { axis: usize },
    LinearForm { a: Vec<f64> },
    SquaredCoordinate { axis: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    Linear { f: ObservableSpec },
    Composite { curve: CurveSpec, f: ObservableSpec },
    PairInteraction { h: PairSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    Affine { a: f64, b: f64 },
    Square,
    Exp { rate: f64 },
    Sin { omega: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairSpec {
    ChordalDot { kappa: f64 },
    ChordalSqDist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// Uniform w.r.t. Riemannian volume (sphere, torus).
    Uniform { n: usize },
    /// Ambient Gaussian (Euclidean manifolds).
    Gaussian { n: usize, sigma: f64 },
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_stride")]
    pub save_stride: usize,
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_scheme() -> String {
    "stratonovich_heun".into()
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSpec {
    /// Generic Monte Carlo replica count (simulate, projections,duality).
    pub replicas: usize,
    /// Nested estimator budgets.
    pub outer: usize,
    pub mid: usize,
    pub inner: usize,
    /// Projection bins over `[0, horizon]`.
    pub bins: usize,
    /// Central-difference size for `A_i`; the sweep reports `2 eps` too.
    pub eps: f64,
    pub eps_inner: f64,
    /// Kernel grid nodes (Chebyshev-Lobatto, endpoints included).
    pub kernel_nodes: usize,
    pub picard_iterations: usize,
    /// Initial-measure perturbation sizes for the stability suite.
    pub perturbation_sizes: Vec<f64>,
    /// Dyadic step ladder, coarse to fine; empty = [4 dt, 2 dt, dt].
    pub dt_ladder: Vec<f64>,
    /// Order-2 kernel time pair (tau1, tau2); empty = (h/4, h/2).
    pub kv2_taus: Vec<f64>,
    pub antithetic: bool,
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec {
            replicas: 1000,
            outer: 200,
            mid: 50,
            inner: 100,
            bins: 8,
            eps: 1e-2,
            eps_inner: 1e-2,
            kernel_nodes: 5,
            picard_iterations: 8,
            perturbation_sizes: vec![0.2, 0.1, 0.05],
            dt_ladder: Vec::new(),
            kv2_taus: Vec::new(),
            antithetic: true,
        }
    }
}

/// Domain objects realized from a validated config.
pub struct BuiltExperiment {
    pub manifold: Manifold,
    pub fields: FieldSet,
    pub initial: EmpiricalMeasure,
    pub functionals: Vec<(String, MeasureFunctional)>,
    pub solver: SolverConfig,
    pub tracked: Vec<Vector>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short content hash of the resolved config; stable across runs.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_resolved_json().as_bytes());
        let digest = hasher.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Validate the schema and build all domain objects. Field derivative
    /// self-checks run here, before any compute is spent.
    pub fn build(&self) -> Result<BuiltExperiment> {
        let manifold = Manifold::parse(&self.manifold)?;
        let n = manifold.ambient_dim();

        let build_observable = |spec: &ObservableSpec| -> Result<ScalarField> {
            Ok(match spec {
                ObservableSpec::Constant { c } => ScalarField::Constant { c: *c },
                ObservableSpec::Coordinate { axis } => {
                    check_axis(*axis, n)?;
                    ScalarField::Coordinate { axis: *axis }
                }
                ObservableSpec::LinearForm { a } => {
                    check_len(a, n, "linear_form direction")?;
                    ScalarField::LinearForm { a: vec_from(a) }
                }
                ObservableSpec::SquaredCoordinate { axis } => {
                    check_axis(*axis, n)?;
                    ScalarField::SquaredCoordinate { axis: *axis }
                }
            })
        };

        let build_field = |spec: &FieldSpec| -> Result<InteractionField> {
            Ok(match spec {
                FieldSpec::Zero => InteractionField::zero(manifold),
                FieldSpec::Kernel { kernel } => {
                    let k = match kernel {
                        KernelSpec::Alignment { kappa } => {
                            InteractionKernel::Alignment { kappa: *kappa }
                        }
                        KernelSpec::GaussianChordal { kappa, sigma } => {
                            if *sigma <= 0.0 {
                                return Err(Error::ConfigInvalid(
                                    "gaussian kernel needs sigma > 0".into(),
                                ));
                            }
                            InteractionKernel::GaussianChordal { kappa: *kappa, sigma: *sigma }
                        }
                    };
                    InteractionField::kernel(manifold, k)
                }
                FieldSpec::Moment { map, observables } => {
                    let m = match map {
                        MapSpec::Constant { v } => {
                            check_len(v, n, "constant map")?;
                            MomentMap::Constant { v: vec_from(v) }
                        }
                        MapSpec::Identity { scale } => MomentMap::Identity { scale: *scale },
                        MapSpec::AxisRotation { axis, scale } => {
                            if n != 3 {
                                return Err(Error::ConfigInvalid(
                                    "axis_rotation needs ambient dimension 3".into(),
                                ));
                            }
                            check_axis(*axis, 3)?;
                            MomentMap::AxisRotation { axis: *axis, scale: *scale }
                        }
                        MapSpec::MomentLinear { dirs } => {
                            for d in dirs {
                                check_len(d, n, "moment_linear direction")?;
                            }
                            if dirs.len() != observables.len() {
                                return Err(Error::ConfigInvalid(format!(
                                    "moment_linear needs one direction per observable ({} vs {})",
                                    dirs.len(),
                                    observables.len()
                                )));
                            }
                            MomentMap::MomentLinear {
                                dirs: dirs.iter().map(|d| vec_from(d)).collect(),
                            }
                        }
                    };
                    let obs =
                        observables.iter().map(&build_observable).collect::<Result<Vec<_>>>()?;
                    InteractionField::moment(manifold, m, obs)
                }
            })
        };

        let drift = build_field(&self.fields.drift)?;
        let diffusions =
            self.fields.diffusions.iter().map(&build_field).collect::<Result<Vec<_>>>()?;
        let fields = FieldSet::new(drift, diffusions)?;

        // Startup self-check of all supplied derivatives.
        let mut check_rng = CounterRng::new(derive_stream(self.seed, &["self-check"]), 0);
        fields.drift.self_check(&mut check_rng)?;
        for f in &fields.diffusions {
            f.self_check(&mut check_rng)?;
        }

        let initial = match &self.initial_measure {
            MeasureSpec::Uniform { n } => {
                let mut rng = CounterRng::new(derive_stream(self.seed, &["init"]), 0);
                sample_iid(manifold, &SampleSpec::Uniform, *n, &mut rng)?
            }
            MeasureSpec::Gaussian { n, sigma } => {
                let mut rng = CounterRng::new(derive_stream(self.seed, &["init"]), 0);
                sample_iid(manifold, &SampleSpec::Gaussian { sigma: *sigma }, *n, &mut rng)?
            }
            MeasureSpec::Points { points, weights } => {
                let pts: Vec<Vector> = points.iter().map(|p| vec_from(p)).collect();
                match weights {
                    Some(w) => EmpiricalMeasure::new(manifold, pts, w.clone())?,
                    None => EmpiricalMeasure::uniform(manifold, pts)?,
                }
            }
        };

        let functionals = self
            .functionals
            .iter()
            .enumerate()
            .map(|(idx, spec)| {
                let func = match spec {
                    FunctionalSpec::Linear { f } => MeasureFunctional::linear(build_observable(f)?),
                    FunctionalSpec::Composite { curve, f } => {
                        let c = match curve {
                            CurveSpec::Affine { a, b } => ScalarCurve::Affine { a: *a, b: *b },
                            CurveSpec::Square => ScalarCurve::Square,
                            CurveSpec::Exp { rate } => ScalarCurve::Exp { rate: *rate },
                            CurveSpec::Sin { omega } => ScalarCurve::Sin { omega: *omega },
                        };
                        MeasureFunctional::composite(c, build_observable(f)?)
                    }
                    FunctionalSpec::PairInteraction { h } => {
                        let k = match h {
                            PairSpec::ChordalDot { kappa } => {
                                PairKernel::ChordalDot { kappa: *kappa }
                            }
                            PairSpec::ChordalSqDist => PairKernel::ChordalSqDist,
                        };
                        MeasureFunctional::pair(k)
                    }
                };
                Ok((format!("f{idx}"), func))
            })
            .collect::<Result<Vec<_>>>()?;

        let scheme = match self.solver.scheme.as_str() {
            "stratonovich_heun" => Scheme::StratonovichHeun,
            "ito_euler_corrected" => Scheme::ItoEulerCorrected,
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "unknown scheme `{other}` (use stratonovich_heun or ito_euler_corrected)"
                )))
            }
        };
        if !self.solver.dt.is_finite()
            || self.solver.dt <= 0.0
            || !self.solver.horizon.is_finite()
            || self.solver.horizon <= 0.0
        {
            return Err(Error::ConfigInvalid("solver needs dt > 0 and horizon > 0".into()));
        }
        crate::noise::grid_steps(self.solver.horizon, self.solver.dt)?;
        let solver = SolverConfig {
            scheme,
            dt: self.solver.dt,
            save_stride: self.solver.save_stride.max(1),
            renormalize: self.solver.renormalize,
        };

        let tracked = self
            .tracked
            .iter()
            .map(|p| {
                let v = vec_from(p);
                if !manifold.is_on_manifold(&v, 1e-8) {
                    return Err(Error::ConfigInvalid("tracked point off manifold".into()));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(BuiltExperiment { manifold, fields, initial, functionals, solver, tracked })
    }

    /// Dyadic ladder: configured or derived from the solver step.
    pub fn dt_ladder(&self) -> Vec<f64> {
        if self.budgets.dt_ladder.is_empty() {
            let dt = self.solver.dt;
            vec![4.0 * dt, 2.0 * dt, dt]
        } else {
            self.budgets.dt_ladder.clone()
        }
    }
}

fn check_axis(axis: usize, n: usize) -> Result<()> {
    if axis >= n {
        return Err(Error::ConfigInvalid(format!("axis {axis} out of range for ambient dim {n}")));
    }
    Ok(())
}

fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::ConfigInvalid(format!(
            "{what} has {} coords, ambient dimension is {n}",
            v.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "seed": 1,
        "manifold": "euclidean:1",
        "fields": {
            "drift": { "class": "zero" },
            "diffusions": [
                { "class": "moment", "map": { "type": "constant", "v": [1.0] } }
            ]
        },
        "initial_measure": { "kind": "points", "points": [[0.0]] },
        "functionals": [ { "kind": "linear", "f": { "type": "coordinate", "axis": 0 } } ],
        "solver": { "dt": 0.01, "horizon": 0.1 }
    }"#;

    #[test]
    fn minimal_config_builds() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let built = cfg.build().unwrap();
        assert_eq!(built.manifold, Manifold::euclidean(1));
        assert_eq!(built.fields.n_noise(), 1);
        assert_eq!(built.functionals.len(), 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("\"seed\": 1,", "\"seed\": 1, \"typo_key\": 2,");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn resolved_config_roundtrips_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let resolved = cfg.to_resolved_json();
        // Defaults are materialized.
        assert!(resolved.contains("save_stride"));
        assert!(resolved.contains("antithetic"));
        let again = ExperimentConfig::from_json(&resolved).unwrap();
        assert_eq!(again.config_hash(), cfg.config_hash());
    }

    #[test]
    fn hash_changes_with_content() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn bad_geometry_rejected() {
        let bad = MINIMAL.replace("euclidean:1", "sphere:2");
        let cfg = ExperimentConfig::from_json(&bad).unwrap();
        // Constant map direction has wrong ambient dimension now.
        assert!(cfg.build().is_err());
    }
}
