//! Declarative experiment configuration: one TOML file per run, schema
//! validated, no wall-clock anywhere. Every tolerance used by the built-in
//! verdicts lives here with its default, so runs are auditable and
//! overridable.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use homlab::fields::{CoefficientField, DiagonalLaws, FieldKind, ScalarLaw};
use homlab::integrand::{Integrand, IntegrandKind};
use homlab::pde::{FnSpec, ForceFamily, ObstacleFamily};
use homlab::solver::{Method, SolveOptions};

#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Homogenize,
    Degeneracy,
    PdeConvergence,
    Obstacle,
    Ergodic,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExperimentKind::Homogenize => "homogenize",
            ExperimentKind::Degeneracy => "degeneracy",
            ExperimentKind::PdeConvergence => "pde_convergence",
            ExperimentKind::Obstacle => "obstacle",
            ExperimentKind::Ergodic => "ergodic",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Seed root of every ensemble; no wall-clock seeding exists.
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub field: FieldConfig,
    pub integrand: IntegrandConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub homogenize: Option<HomogenizeConfig>,
    pub degeneracy: Option<DegeneracyConfig>,
    pub pde_convergence: Option<PdeConfig>,
    pub obstacle: Option<ObstacleConfig>,
    pub ergodic: Option<ErgodicConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn section_present(&self) -> bool {
        match self.experiment {
            ExperimentKind::Homogenize => self.homogenize.is_some(),
            ExperimentKind::Degeneracy => self.degeneracy.is_some(),
            ExperimentKind::PdeConvergence => self.pde_convergence.is_some(),
            ExperimentKind::Obstacle => self.obstacle.is_some(),
            ExperimentKind::Ergodic => self.ergodic.is_some(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.section_present() {
            return bad(format!(
                "experiment `{}` requires a [{}] section",
                self.experiment, self.experiment
            ));
        }
        self.field_instance()?;
        self.integrand_instance()?;
        self.solve_options()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn field_instance(&self) -> Result<CoefficientField, ConfigError> {
        let field = self.field.build(self.integrand.p)?;
        field.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(field)
    }

    pub fn integrand_instance(&self) -> Result<Integrand, ConfigError> {
        let f = self.integrand.build(self.field.d)?;
        f.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(f)
    }

    pub fn solve_options(&self) -> SolveOptions {
        self.solver.build()
    }
}

// ---------------------------------------------------------------------------
// Field / integrand / solver sections
// ---------------------------------------------------------------------------

fn default_dim() -> usize {
    2
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub kind: FieldKind,
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Isotropic diagonal law (A = lambda I).
    pub law: Option<ScalarLaw>,
    /// Independent per-axis diagonal laws (exclusive with `law`).
    pub laws: Option<Vec<ScalarLaw>>,
    pub lambda: Option<ScalarLaw>,
    /// Only for kind = "custom": deterministic periodic pattern along x1.
    pub pattern: Option<Vec<f64>>,
    #[serde(default)]
    pub field_id: u64,
}

impl FieldConfig {
    pub fn build(&self, p: f64) -> Result<CoefficientField, ConfigError> {
        let diag = match (&self.law, &self.laws) {
            (Some(law), None) => DiagonalLaws::Isotropic(law.clone()),
            (None, Some(laws)) => DiagonalLaws::PerAxis(laws.clone()),
            (None, None) if self.kind == FieldKind::Custom => {
                DiagonalLaws::Isotropic(ScalarLaw::Constant { value: 1.0 })
            }
            (None, None) => return bad("field needs `law` or `laws`"),
            (Some(_), Some(_)) => return bad("`law` and `laws` are mutually exclusive"),
        };
        if self.kind == FieldKind::Custom && self.pattern.is_none() {
            return bad("custom fields need a `pattern`");
        }
        if self.kind != FieldKind::Custom && self.pattern.is_some() {
            return bad("`pattern` is only valid for custom fields");
        }
        Ok(CoefficientField {
            kind: self.kind,
            d: self.d,
            diag,
            lambda_law: self
                .lambda
                .clone()
                .unwrap_or(ScalarLaw::Constant { value: 0.0 }),
            p,
            pattern: self.pattern.clone(),
            field_id: self.field_id,
        })
    }
}

fn default_m() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrandKindConfig {
    PowerLaw,
    PerturbedConvex,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrandConfig {
    pub kind: IntegrandKindConfig,
    pub p: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub add_lambda: bool,
}

impl IntegrandConfig {
    pub fn build(&self, d: usize) -> Result<Integrand, ConfigError> {
        let kind = match self.kind {
            IntegrandKindConfig::PowerLaw => {
                if self.rho != 0.0 {
                    return bad("rho is only valid for perturbed_convex");
                }
                IntegrandKind::PowerLaw
            }
            IntegrandKindConfig::PerturbedConvex => IntegrandKind::PerturbedConvex { rho: self.rho },
        };
        Ok(Integrand {
            kind,
            p: self.p,
            m: self.m,
            d,
            regularization_delta: self.delta,
            add_lambda: self.add_lambda,
        })
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub energy_tol: f64,
    pub method: Option<Method>,
    pub continuation_deltas: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        SolverConfig {
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            energy_tol: o.energy_tol,
            method: None,
            continuation_deltas: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn build(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            energy_tol: self.energy_tol,
            method: self.method,
            continuation_deltas: self.continuation_deltas.clone(),
            random_init_seed: None,
        }
    }
}

/// Verdict tolerances; the defaults are the ones the built-in checks are
/// specified with.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative tolerance on homogenized values against declared references.
    pub rel_fhom: f64,
    /// Band check slack in standard errors.
    pub band_sigma: f64,
    /// Periodic-vs-Dirichlet slack in combined standard errors.
    pub periodic_sigma: f64,
    /// Convexity-scan slack in combined standard errors.
    pub convexity_sigma: f64,
    /// Admissible observed-order window for manufactured solutions.
    pub rate_low: f64,
    pub rate_high: f64,
    /// Nodewise tolerance for the inactive-obstacle comparison.
    pub inactive_obstacle: f64,
    /// Complementarity residual bound for active obstacles.
    pub complementarity: f64,
    /// Ensemble-sigma tolerance for ergodic averages.
    pub ergodic_sigma: f64,
    /// Required damping factor of the weak-L1 deviation along eps_list.
    pub weak_l1_halving: f64,
    /// Absolute weak-L1 deviation tolerance per unit measure.
    pub weak_l1_abs: f64,
    /// Relative energy agreement for the uniqueness probe.
    pub uniqueness_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rel_fhom: 0.05,
            band_sigma: 3.0,
            periodic_sigma: 2.0,
            convexity_sigma: 3.0,
            rate_low: 1.7,
            rate_high: 2.3,
            inactive_obstacle: 1e-10,
            complementarity: 1e-6,
            ergodic_sigma: 3.0,
            weak_l1_halving: 0.5,
            weak_l1_abs: 0.05,
            uniqueness_rel: 1e-8,
        }
    }
}

// ---------------------------------------------------------------------------
// Experiment sections
// ---------------------------------------------------------------------------

/// Gradients to sample: an explicit list or a centered square grid
/// (scalar planar case), which also feeds the convexity scan and the
/// finite-difference gradient checks.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum XiSpec {
    Grid { center: Vec<f64>, step: f64, half_span: u32 },
    List(Vec<Vec<f64>>),
}

impl XiSpec {
    pub fn expand(&self, m: usize, d: usize) -> Result<Vec<Vec<f64>>, ConfigError> {
        match self {
            XiSpec::List(list) => {
                for xi in list {
                    if xi.len() != m * d {
                        return bad(format!("xi entries must have m*d = {} components", m * d));
                    }
                }
                Ok(list.clone())
            }
            XiSpec::Grid { center, step, half_span } => {
                if m != 1 || d != 2 {
                    return bad("grid xi specs cover the scalar planar case (m = 1, d = 2)");
                }
                if center.len() != 2 || !(*step > 0.0) {
                    return bad("grid needs a 2-vector center and a positive step");
                }
                let h = *half_span as i64;
                let mut out = Vec::new();
                for i in -h..=h {
                    for j in -h..=h {
                        out.push(vec![
                            center[0] + i as f64 * step,
                            center[1] + j as f64 * step,
                        ]);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn grid_step(&self) -> Option<f64> {
        match self {
            XiSpec::Grid { step, .. } => Some(*step),
            XiSpec::List(_) => None,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_moment_samples() -> usize {
    100_000
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogenizeConfig {
    pub xi: XiSpec,
    pub t_values: Vec<f64>,
    pub nodes_per_unit: f64,
    pub seeds_per_t: usize,
    #[serde(default)]
    pub extrapolate: bool,
    /// Solve the periodic cell problems on shared (seed, t) and check the
    /// one-sided comparison.
    #[serde(default = "default_true")]
    pub check_periodic: bool,
    #[serde(default = "default_moment_samples")]
    pub moment_samples: usize,
    /// Reference values (xi, value) asserted within `rel_fhom`.
    #[serde(default)]
    pub references: Vec<ReferenceValue>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceValue {
    pub xi: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegeneracyConfig {
    pub xi: Vec<f64>,
    pub t_values: Vec<f64>,
    pub nodes_per_unit: f64,
    pub seeds_per_t: usize,
    /// When present, the run fails unless the probe returns this verdict.
    pub expected: Option<homlab::cell::Verdict>,
}

fn default_seeds() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub eps_list: Vec<f64>,
    pub n_fine: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    pub boundary: Vec<FnSpec>,
    pub force: ForceFamily,
    pub obstacle: Option<ObstacleFamily>,
    pub law: LawConfig,
    #[serde(default)]
    pub dump_fields: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LawConfig {
    Quadratic { diag: Vec<f64> },
    PowerIso { p: f64, coef: f64 },
    /// Load the sampled table from the summary.json of a homogenize run.
    FromTable { path: PathBuf },
}

fn default_eps() -> f64 {
    0.25
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub n: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub boundary: Vec<FnSpec>,
    pub force: ForceFamily,
    /// Constant obstacle level that cuts into the unconstrained solution.
    pub active_level: f64,
    /// Level far below the solution; the constrained solve must reproduce the
    /// unconstrained one.
    pub inactive_level: f64,
    #[serde(default)]
    pub ripple_amplitude: f64,
}

fn default_probe_boxes() -> usize {
    20
}

fn default_probe_fraction() -> f64 {
    0.3
}

fn default_avg_eps() -> f64 {
    1.0 / 64.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgodicConfig {
    pub eps_list: Vec<f64>,
    pub n_seeds: usize,
    pub observables: Vec<homlab::ergodic::Observable>,
    #[serde(default = "default_probe_boxes")]
    pub probe_boxes: usize,
    #[serde(default = "default_probe_fraction")]
    pub probe_fraction: f64,
    #[serde(default)]
    pub probe_seed: u64,
    /// Scale used for the plain ergodic averages.
    #[serde(default = "default_avg_eps")]
    pub average_eps: f64,
}
