//! Cell problems and the homogenized energy density.
//!
//! The effective density is estimated from Dirichlet cell minimizations on
//! growing cubes: affine boundary data xi x on (0,t)^d, normalized energy
//! mu(t)/t^d, Monte Carlo over an ensemble of seeds per cell size, and an
//! optional linear extrapolation in 1/t. Periodic cell problems on the torus
//! provide the corrector-style lower surrogate. Every Dirichlet solve is
//! checked against the deterministic two-sided sandwich: the affine
//! competitor from above and the weighted Hoelder bound from below.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{estimate_moments, CoefficientField, FieldError, FieldSample, Seed};
use crate::integrand::Integrand;
use crate::mat::MatMd;
use crate::mesh::{sample_coefficients, DiscreteField, Mesh, MeshError};
use crate::solver::{minimize, Problem, SampledDensity, SolveError, SolveOptions, SolveReport};
use crate::stats;
use crate::MAX_DIM;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("per-t means grow without bound (factor {factor:.2} per doubling)")]
    DivergenceDetected { factor: f64 },
    #[error("moment estimate unstable; refusing to emit growth constants")]
    MomentDivergence,
    #[error("table lookup failed: {0}")]
    Table(String),
    #[error("finite-difference step too small relative to the statistical error")]
    StepTooNoisy,
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Cell sizes, mesh subdivisions and ensemble size for the t -> infinity sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSchedule {
    pub t_values: Vec<f64>,
    pub n_per_t: Vec<usize>,
    pub seeds_per_t: usize,
    /// Linear extrapolation in 1/t from the two largest cells.
    #[serde(default)]
    pub extrapolate: bool,
}

impl CellSchedule {
    /// Fixed physical resolution: n = round(t * nodes_per_unit).
    pub fn from_resolution(
        t_values: Vec<f64>,
        nodes_per_unit: f64,
        seeds_per_t: usize,
    ) -> Result<Self, CellError> {
        let n_per_t = t_values
            .iter()
            .map(|t| (t * nodes_per_unit).round().max(1.0) as usize)
            .collect();
        let s = CellSchedule { t_values, n_per_t, seeds_per_t, extrapolate: false };
        s.validate()?;
        Ok(s)
    }

    pub fn with_extrapolation(mut self) -> Self {
        self.extrapolate = true;
        self
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if self.t_values.is_empty() || self.t_values.len() != self.n_per_t.len() {
            return Err(CellError::Schedule("t_values and n_per_t must match and be nonempty".into()));
        }
        if self.seeds_per_t == 0 {
            return Err(CellError::Schedule("need at least one seed per cell size".into()));
        }
        for w in self.t_values.windows(2) {
            if !(w[1] > w[0]) {
                return Err(CellError::Schedule("t_values must be increasing".into()));
            }
        }
        for t in &self.t_values {
            if !(*t > 0.0) {
                return Err(CellError::Schedule("cell sizes must be positive".into()));
            }
        }
        // resolution must not degrade as cells grow
        let base = self.n_per_t[0] as f64 / self.t_values[0];
        for (t, n) in self.t_values.iter().zip(&self.n_per_t) {
            if (*n as f64) / t < 0.98 * base {
                return Err(CellError::Schedule(
                    "n_per_t must scale at least linearly with t".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Single-cell solves
// ---------------------------------------------------------------------------

/// Deterministic per-realization bounds for one Dirichlet cell solve:
/// the affine candidate from above, the weighted Hoelder estimate from below.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SandwichCheck {
    pub affine_bound: f64,
    pub lower_bound: f64,
    pub ok_upper: bool,
    pub ok_lower: bool,
}

impl SandwichCheck {
    pub fn ok(&self) -> bool {
        self.ok_upper && self.ok_lower
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub t: f64,
    pub n: usize,
    pub seed: u64,
    /// Normalized minimal energy mu(t)/t^d.
    pub value: f64,
    pub report: SolveReport,
    pub sandwich: SandwichCheck,
}

/// Relative slack granted to the sandwich inequalities (solver tolerance).
pub const SANDWICH_REL_TOL: f64 = 1e-6;

fn sandwich_bounds(
    f: &Integrand,
    xi: &MatMd,
    coeffs: &[FieldSample],
    volume_fraction: f64,
) -> (f64, f64) {
    // (a) affine candidate: cell average of |xi A|^p + Lambda; the Frobenius
    // norm coincides with the operator norm for a single row.
    let mut upper = 0.0;
    let mut inv_avg = 0.0;
    let q = f.p / (f.p - 1.0);
    for c in coeffs {
        upper += xi.scale_cols(&c.a).frob().powf(f.p) + c.lambda;
        inv_avg += c.a_inv_norm_op(f.d).powf(q);
    }
    upper *= volume_fraction;
    inv_avg *= volume_fraction;
    // (b) rearranged Hoelder estimate, with the regularization offset.
    let lower = f.c_lower() * inv_avg.powf(1.0 - f.p) * xi.norm_op().powf(f.p)
        - f.regularization_delta.powf(f.p);
    (upper, lower)
}

fn check_sandwich(value: f64, upper: f64, lower: f64) -> SandwichCheck {
    let slack = |x: f64| SANDWICH_REL_TOL * (1.0 + x.abs());
    SandwichCheck {
        affine_bound: upper,
        lower_bound: lower,
        ok_upper: value <= upper + slack(upper),
        ok_lower: value >= lower - slack(lower),
    }
}

/// Dirichlet cell problem on `origin + (0,t)^d`: minimize the heterogeneous
/// energy over the affine-plus-zero-trace space, normalized by t^d.
#[allow(clippy::too_many_arguments)]
pub fn cell_dirichlet_on_box(
    xi: &MatMd,
    field: &CoefficientField,
    seed: Seed,
    origin: [f64; MAX_DIM],
    t: f64,
    n: usize,
    f: &Integrand,
    opts: &SolveOptions,
) -> Result<CellResult, CellError> {
    if !(t > 0.0) {
        return Err(CellError::Schedule(format!("cell size must be positive, got {t}")));
    }
    let mesh = Mesh::new(f.d, origin, [t, t, t], n)?;
    let coeffs = sample_coefficients(&mesh, field, seed, 1.0);
    let lift = DiscreteField::affine(mesh.clone(), xi, &vec![0.0; f.m]);
    let density = SampledDensity::new(*f, &coeffs);
    let problem = Problem {
        mesh: &mesh,
        density: &density,
        boundary: &lift,
        force: None,
        obstacle: None,
    };
    let (_, report) = minimize(&problem, opts)?;
    let volume = mesh.volume();
    let value = report.final_energy / volume;
    let (upper, lower) = sandwich_bounds(f, xi, &coeffs, mesh.element_volume() / volume);
    Ok(CellResult {
        t,
        n,
        seed: seed.0,
        value,
        report,
        sandwich: check_sandwich(value, upper, lower),
    })
}

/// Dirichlet cell problem on (0,t)^d.
pub fn cell_dirichlet(
    xi: &MatMd,
    field: &CoefficientField,
    seed: Seed,
    t: f64,
    n: usize,
    f: &Integrand,
    opts: &SolveOptions,
) -> Result<CellResult, CellError> {
    cell_dirichlet_on_box(xi, field, seed, [0.0; MAX_DIM], t, n, f, opts)
}

// ---------------------------------------------------------------------------
// Periodic cell problems on the torus
// ---------------------------------------------------------------------------

/// Torus discretization of (0,t)^d: the same Kuhn elements with node indices
/// wrapped modulo n per axis. The unknown is the periodic perturbation w of
/// the affine profile xi x.
struct Torus {
    d: usize,
    n: usize,
    h: f64,
    vol: f64,
    perms: usize,
    mesh: Mesh,
}

impl Torus {
    fn new(d: usize, t: f64, n: usize) -> Result<Self, CellError> {
        let mesh = Mesh::cube(d, t, n)?;
        Ok(Torus {
            d,
            n,
            h: t / n as f64,
            vol: mesh.element_volume(),
            perms: mesh.n_perms(),
            mesh,
        })
    }

    fn node_count(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    fn element_count(&self) -> usize {
        self.perms * self.n.pow(self.d as u32)
    }

    #[inline]
    fn node_index(&self, grid: [usize; MAX_DIM]) -> usize {
        let mut idx = 0usize;
        for j in (0..self.d).rev() {
            idx = idx * self.n + grid[j] % self.n;
        }
        idx
    }

    #[inline]
    fn cube_grid(&self, cube: usize) -> [usize; MAX_DIM] {
        let mut g = [0usize; MAX_DIM];
        let mut r = cube;
        for gj in g.iter_mut().take(self.d) {
            *gj = r % self.n;
            r /= self.n;
        }
        g
    }

    /// Wrapped vertex chain of element e, ordered along the permutation.
    #[inline]
    fn element_nodes(&self, e: usize) -> [usize; MAX_DIM + 1] {
        let q = e % self.perms;
        let mut grid = self.cube_grid(e / self.perms);
        let mut nodes = [0usize; MAX_DIM + 1];
        nodes[0] = self.node_index(grid);
        for (step, &axis) in self.mesh.perm(q).iter().enumerate() {
            grid[axis] += 1;
            nodes[step + 1] = self.node_index(grid);
        }
        nodes
    }

    /// Gradient of xi x + w on element e (w periodic nodal, m components).
    #[inline]
    fn gradient(&self, xi: &MatMd, w: &[f64], m: usize, e: usize) -> MatMd {
        let q = e % self.perms;
        let nodes = self.element_nodes(e);
        let mut g = *xi;
        let inv_h = 1.0 / self.h;
        for (step, &axis) in self.mesh.perm(q).iter().enumerate() {
            let a = nodes[step] * m;
            let b = nodes[step + 1] * m;
            for k in 0..m {
                g.set(k, axis, g.get(k, axis) + (w[b + k] - w[a + k]) * inv_h);
            }
        }
        g
    }

    fn energy(&self, f: &Integrand, coeffs: &[FieldSample], xi: &MatMd, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for e in 0..self.element_count() {
            acc += self.vol * f.eval(&coeffs[e], &self.gradient(xi, w, f.m, e));
        }
        acc
    }

    fn grad_energy(
        &self,
        f: &Integrand,
        coeffs: &[FieldSample],
        xi: &MatMd,
        w: &[f64],
        out: &mut [f64],
    ) {
        out.fill(0.0);
        let m = f.m;
        for e in 0..self.element_count() {
            let q = e % self.perms;
            let nodes = self.element_nodes(e);
            let df = f.grad(&coeffs[e], &self.gradient(xi, w, m, e));
            // scatter: hat gradients are the same as on the open mesh
            for local in 0..=self.d {
                let hat = self.mesh.hat_gradient(q, local);
                let base = nodes[local] * m;
                for k in 0..m {
                    let mut acc = 0.0;
                    for j in 0..self.d {
                        acc += df.get(k, j) * hat.get(0, j);
                    }
                    out[base + k] += self.vol * acc;
                }
            }
        }
    }
}

/// Periodic cell problem: minimize over mean-zero periodic perturbations of
/// xi x on the torus (0,t)^d. For quadratic densities this runs matrix-free
/// CG on the (singular, consistent) periodic stiffness; otherwise the
/// projected first-order scheme.
pub fn cell_periodic(
    xi: &MatMd,
    field: &CoefficientField,
    seed: Seed,
    t: f64,
    n: usize,
    f: &Integrand,
    opts: &SolveOptions,
) -> Result<CellResult, CellError> {
    if !(t > 0.0) {
        return Err(CellError::Schedule(format!("cell size must be positive, got {t}")));
    }
    opts.validate()?;
    let start = std::time::Instant::now();
    let torus = Torus::new(f.d, t, n)?;
    let coeffs = sample_coefficients(&torus.mesh, field, seed, 1.0);
    let m = f.m;
    let dof = torus.node_count() * m;
    let mut w = vec![0.0; dof];

    let quadratic =
        matches!(f.kind, crate::integrand::IntegrandKind::PowerLaw) && f.p == 2.0;
    let (iterations, grad_norm, converged) = if quadratic {
        periodic_cg(&torus, f, &coeffs, xi, &mut w, opts)
    } else {
        periodic_bb(&torus, f, &coeffs, xi, &mut w, opts)
    };
    // remove the constant-shift ambiguity
    for k in 0..m {
        let mean: f64 =
            (0..torus.node_count()).map(|i| w[i * m + k]).sum::<f64>() / torus.node_count() as f64;
        for i in 0..torus.node_count() {
            w[i * m + k] -= mean;
        }
    }
    let energy = torus.energy(f, &coeffs, xi, &w);
    let volume = t.powi(f.d as i32);
    let value = energy / volume;
    let (upper, lower) =
        sandwich_bounds(f, xi, &coeffs, torus.vol / volume);
    let report = SolveReport {
        final_energy: energy,
        iterations,
        grad_norm,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        method: if quadratic {
            crate::solver::Method::CgLinear
        } else {
            crate::solver::Method::FirstOrder
        },
    };
    Ok(CellResult {
        t,
        n,
        seed: seed.0,
        value,
        report,
        sandwich: check_sandwich(value, upper, lower),
    })
}

fn periodic_cg(
    torus: &Torus,
    f: &Integrand,
    coeffs: &[FieldSample],
    xi: &MatMd,
    w: &mut [f64],
    opts: &SolveOptions,
) -> (usize, f64, bool) {
    let dof = w.len();
    let mut g0 = vec![0.0; dof];
    torus.grad_energy(f, coeffs, xi, w, &mut g0); // gradient at w = 0
    // E(w) is quadratic: grad = g0 + H w; solve H w = -g0 by CG with the
    // matvec evaluated as grad(w) - g0.
    let mut diag = vec![0.0; dof];
    {
        // Jacobi diagonal of H via the quadratic axis weights
        let m = f.m;
        for e in 0..torus.element_count() {
            let q = e % torus.perms;
            let nodes = torus.element_nodes(e);
            let a = &coeffs[e].a;
            for local in 0..=torus.d {
                let hat = torus.mesh.hat_gradient(q, local);
                let mut acc = 0.0;
                for j in 0..torus.d {
                    acc += 2.0 * a[j] * a[j] * hat.get(0, j) * hat.get(0, j);
                }
                for k in 0..m {
                    diag[nodes[local] * m + k] += torus.vol * acc;
                }
            }
        }
    }
    let e0 = torus.energy(f, coeffs, xi, w);
    let mut tol = opts.grad_tol * (1.0 + e0.abs());
    let mut r: Vec<f64> = g0.iter().map(|g| -g).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d.max(1e-300)).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut hw = vec![0.0; dof];
    let mut gw = vec![0.0; dof];
    let mut iter = 0usize;
    let mut rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    while rnorm > tol && iter < opts.max_iters {
        // H p = grad(p) - g0 by linearity of the gradient map
        torus.grad_energy(f, coeffs, xi, &p, &mut gw);
        for i in 0..dof {
            hw[i] = gw[i] - g0[i];
        }
        let pap: f64 = p.iter().zip(&hw).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..dof {
            w[i] += alpha * p[i];
            r[i] -= alpha * hw[i];
        }
        for i in 0..dof {
            z[i] = r[i] / diag[i].max(1e-300);
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..dof {
            p[i] = z[i] + beta * p[i];
        }
        rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        iter += 1;
        if iter % 64 == 0 {
            tol = opts.grad_tol * (1.0 + torus.energy(f, coeffs, xi, w).abs());
        }
    }
    let converged = rnorm <= opts.grad_tol * (1.0 + torus.energy(f, coeffs, xi, w).abs());
    (iter, rnorm, converged)
}

fn periodic_bb(
    torus: &Torus,
    f: &Integrand,
    coeffs: &[FieldSample],
    xi: &MatMd,
    w: &mut [f64],
    opts: &SolveOptions,
) -> (usize, f64, bool) {
    let deltas: Vec<f64> = if opts.continuation_deltas.is_empty() {
        vec![f.regularization_delta]
    } else {
        opts.continuation_deltas.clone()
    };
    let dof = w.len();
    let sigma = 1e-4;
    let mut total_iters = 0usize;
    let mut pg = f64::INFINITY;
    let mut converged = false;
    for (stage, delta) in deltas.iter().enumerate() {
        let fd = f.with_delta(*delta);
        let mut energy = torus.energy(&fd, coeffs, xi, w);
        let mut grad = vec![0.0; dof];
        torus.grad_energy(&fd, coeffs, xi, w, &mut grad);
        let mut tol = opts.grad_tol * (1.0 + energy.abs());
        let mut step = {
            let g2: f64 = grad.iter().map(|g| g * g).sum();
            if g2 > 0.0 {
                (1.0 / g2.sqrt()).min(1.0)
            } else {
                1.0
            }
        };
        let mut prev_w: Vec<f64> = Vec::new();
        let mut prev_g: Vec<f64> = Vec::new();
        let mut stall = 0usize;
        let budget = (opts.max_iters / deltas.len()).max(100);
        let mut iter = 0usize;
        let final_stage = stage + 1 == deltas.len();
        pg = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        while iter < budget {
            if pg <= tol {
                break;
            }
            if !prev_w.is_empty() {
                let mut ss = 0.0;
                let mut sy = 0.0;
                for i in 0..dof {
                    let s = w[i] - prev_w[i];
                    let y = grad[i] - prev_g[i];
                    ss += s * s;
                    sy += s * y;
                }
                if sy > 1e-300 {
                    step = (ss / sy).clamp(1e-12, 1e12);
                }
            }
            prev_w = w.to_vec();
            prev_g = grad.clone();
            let mut t_step = step;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> =
                    (0..dof).map(|i| prev_w[i] - t_step * grad[i]).collect();
                let e_trial = torus.energy(&fd, coeffs, xi, &trial);
                let decrease: f64 =
                    (0..dof).map(|i| grad[i] * (trial[i] - prev_w[i])).sum();
                if e_trial <= energy + sigma * decrease {
                    let drop = energy - e_trial;
                    w.copy_from_slice(&trial);
                    energy = e_trial;
                    accepted = true;
                    stall = if drop.abs() <= opts.energy_tol * (1.0 + energy.abs()) {
                        stall + 1
                    } else {
                        0
                    };
                    break;
                }
                t_step *= 0.5;
            }
            iter += 1;
            if !accepted {
                break;
            }
            torus.grad_energy(&fd, coeffs, xi, w, &mut grad);
            pg = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            tol = opts.grad_tol * (1.0 + energy.abs());
            if stall >= 25 && !final_stage {
                break;
            }
            if stall >= 200 {
                break;
            }
        }
        converged = pg <= tol;
        total_iters += iter;
    }
    (total_iters, pg, converged)
}

// ---------------------------------------------------------------------------
// Ensembles, traces and the homogenized table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: f64,
    pub n: usize,
    pub mean: f64,
    /// Ensemble median; the trend statistic for heavy-tailed media, whose
    /// sample means never concentrate.
    pub median: f64,
    pub std_dev: f64,
    pub std_err: f64,
    pub count: usize,
}

/// All per-(t, seed) results of a sweep, grouped by cell size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellEnsemble {
    pub trace: Vec<TraceEntry>,
    pub results: Vec<CellResult>,
}

/// Run the (t, seed) sweep for one gradient xi. Seeds are `base_seed + index`;
/// the (t, seed) pairs are independent work items solved in parallel with a
/// deterministic, order-independent aggregation.
pub fn cell_ensemble(
    xi: &MatMd,
    field: &CoefficientField,
    f: &Integrand,
    schedule: &CellSchedule,
    opts: &SolveOptions,
    base_seed: u64,
    periodic: bool,
) -> Result<CellEnsemble, CellError> {
    schedule.validate()?;
    field.validate()?;
    let mut jobs = Vec::new();
    for (level, (&t, &n)) in schedule.t_values.iter().zip(&schedule.n_per_t).enumerate() {
        for s in 0..schedule.seeds_per_t {
            jobs.push((level, t, n, base_seed + s as u64));
        }
    }
    let solved: Vec<Result<CellResult, CellError>> = jobs
        .par_iter()
        .map(|&(_, t, n, seed)| {
            if periodic {
                cell_periodic(xi, field, Seed(seed), t, n, f, opts)
            } else {
                cell_dirichlet(xi, field, Seed(seed), t, n, f, opts)
            }
        })
        .collect();
    let mut results = Vec::with_capacity(solved.len());
    for r in solved {
        results.push(r?);
    }
    let mut trace = Vec::new();
    for (level, (&t, &n)) in schedule.t_values.iter().zip(&schedule.n_per_t).enumerate() {
        let values: Vec<f64> = jobs
            .iter()
            .zip(&results)
            .filter(|((l, _, _, _), _)| *l == level)
            .map(|(_, r)| r.value)
            .collect();
        trace.push(TraceEntry {
            t,
            n,
            mean: stats::mean(&values),
            median: stats::median(&values),
            std_dev: stats::std_dev(&values),
            std_err: stats::std_err(&values),
            count: values.len(),
        });
    }
    Ok(CellEnsemble { trace, results })
}

/// Growth factor of the ensemble medians normalized per doubling of t,
/// measured between two trace entries. Medians are used because cell values
/// of media with violated moment conditions are heavy-tailed: their sample
/// means are dominated by single slabs and do not concentrate, while the
/// median of the normalized value scales cleanly with t.
fn factor_per_doubling(a: &TraceEntry, b: &TraceEntry) -> f64 {
    let ratio = b.median / a.median.max(f64::MIN_POSITIVE);
    let doublings = (b.t / a.t).log2();
    if doublings <= 0.0 {
        return 1.0;
    }
    ratio.powf(1.0 / doublings)
}

/// Endpoint growth factor per doubling across the whole sweep: the longest
/// lever arm gives the most stable slope estimate for heavy-tailed values.
pub fn sweep_factor(trace: &[TraceEntry]) -> f64 {
    match (trace.first(), trace.last()) {
        (Some(a), Some(b)) if trace.len() >= 2 => factor_per_doubling(a, b),
        _ => 1.0,
    }
}

/// Detection threshold for sustained growth/decay per doubling. Stable media
/// concentrate at factor 1; the borderline degenerate laws approach factor 2
/// (respectively 1/2), so the trigger sits strictly between.
pub const DEGENERACY_FACTOR: f64 = 1.3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FhomEstimate {
    pub value: f64,
    pub std_err: f64,
    pub trace: Vec<TraceEntry>,
    /// Successive ensemble-mean differences shrink along the sweep.
    pub stabilizing: bool,
    pub extrapolated: bool,
}

/// Estimate the homogenized density at one gradient by the asymptotic cell
/// sweep: ensemble means per t, read at the largest cell (optionally
/// Richardson-extrapolated in 1/t).
pub fn estimate_fhom(
    xi: &MatMd,
    field: &CoefficientField,
    f: &Integrand,
    schedule: &CellSchedule,
    opts: &SolveOptions,
    base_seed: u64,
) -> Result<(FhomEstimate, CellEnsemble), CellError> {
    let ensemble = cell_ensemble(xi, field, f, schedule, opts, base_seed, false)?;
    let trace = &ensemble.trace;
    // divergence guard: sustained growth across the sweep
    if trace.len() >= 3 {
        let factor = sweep_factor(trace);
        if factor >= DEGENERACY_FACTOR {
            return Err(CellError::DivergenceDetected { factor });
        }
    }
    let last = trace.last().expect("nonempty trace");
    let (value, std_err, extrapolated) = if schedule.extrapolate && trace.len() >= 2 {
        // Per-seed least-squares fit of v = v_inf + c/t over the whole trace
        // (the Dirichlet boundary layer contributes O(1/t)); averaging the
        // per-seed intercepts keeps the correlation between cell sizes of one
        // realization inside the ensemble error bar.
        let levels = schedule.t_values.len();
        let seeds = schedule.seeds_per_t;
        let xs: Vec<f64> = schedule.t_values.iter().map(|t| 1.0 / t).collect();
        let x_mean = stats::mean(&xs);
        let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
        let mut intercepts = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let ys: Vec<f64> =
                (0..levels).map(|l| ensemble.results[l * seeds + s].value).collect();
            let y_mean = stats::mean(&ys);
            let sxy: f64 = xs
                .iter()
                .zip(&ys)
                .map(|(x, y)| (x - x_mean) * (y - y_mean))
                .sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            intercepts.push(y_mean - slope * x_mean);
        }
        (stats::mean(&intercepts), stats::std_err(&intercepts), true)
    } else {
        (last.mean, last.std_err, false)
    };
    let stabilizing = if trace.len() >= 3 {
        let diffs: Vec<f64> =
            trace.windows(2).map(|w| (w[1].mean - w[0].mean).abs()).collect();
        *diffs.last().unwrap() <= diffs.first().unwrap() + 1e-12
    } else {
        true
    };
    Ok((
        FhomEstimate { value, std_err, trace: trace.clone(), stabilizing, extrapolated },
        ensemble,
    ))
}

// ---------------------------------------------------------------------------
// Growth-band constants
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Lower constant c * E[|A^{-1}|^{p/(p-1)}]^{1-p}.
    pub c0: f64,
    /// Upper constant sup_{|eta|=1} E[|eta A|^p].
    pub cap0: f64,
    /// Additive constant E[Lambda].
    pub cap1: f64,
}

/// Monte Carlo growth-band constants. For diagonal A the coordinate
/// directions certify the supremum over unit eta; a random unit-sphere sample
/// double-checks the certificate.
pub fn bound_constants(
    field: &CoefficientField,
    f: &Integrand,
    seed: Seed,
    n_samples: usize,
) -> Result<BoundConstants, CellError> {
    let moments = estimate_moments(field, seed, f.p, n_samples)?;
    if moments.flags.any() {
        return Err(CellError::MomentDivergence);
    }
    let c0 = f.c_lower() * moments.a_inv_pow.powf(1.0 - f.p);

    // coordinate certificate: max over axes of E[a_j^p]
    let mut axis_sums = [0.0f64; MAX_DIM];
    for i in 0..n_samples {
        let s = field.at_cell(seed, [i as i64, 0, 0]);
        for j in 0..field.d {
            axis_sums[j] += s.a[j].powf(f.p);
        }
    }
    let mut cap0 = axis_sums[..field.d]
        .iter()
        .fold(0.0f64, |m, s| m.max(s / n_samples as f64));

    // random-direction double check (single-row eta; for isotropic media all
    // directions agree anyway)
    let n_eta = 16usize;
    let n_inner = n_samples.min(4_000);
    let mut state = seed.0 ^ 0xabcd_1234_5678_9abc;
    for _ in 0..n_eta {
        let mut eta = [0.0f64; MAX_DIM];
        let mut norm = 0.0;
        for ej in eta.iter_mut().take(field.d) {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            *ej = 2.0 * u - 1.0;
            norm += *ej * *ej;
        }
        let norm = norm.sqrt().max(1e-12);
        for ej in eta.iter_mut().take(field.d) {
            *ej /= norm;
        }
        let mut acc = 0.0;
        for i in 0..n_inner {
            let s = field.at_cell(seed, [i as i64, 0, 0]);
            let mut w = 0.0;
            for j in 0..field.d {
                w += eta[j] * eta[j] * s.a[j] * s.a[j];
            }
            acc += w.sqrt().powf(f.p);
        }
        cap0 = cap0.max(acc / n_inner as f64);
    }
    Ok(BoundConstants { c0, cap0, cap1: moments.lambda })
}

// ---------------------------------------------------------------------------
// Homogenized table, convexity scan, gradient estimates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableEntry {
    /// Row-major entries of xi (m x d).
    pub xi: Vec<f64>,
    pub value: f64,
    pub std_err: f64,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogenizedTable {
    pub m: usize,
    pub d: usize,
    pub p: f64,
    /// Regularization offset of the sampled integrand: the lower band edge
    /// weakens by delta^p.
    #[serde(default)]
    pub delta: f64,
    pub entries: Vec<TableEntry>,
    pub constants: BoundConstants,
}

impl HomogenizedTable {
    pub fn xi_mat(&self, i: usize) -> MatMd {
        let mut xi = MatMd::zeros(self.m, self.d);
        for k in 0..self.m {
            for j in 0..self.d {
                xi.set(k, j, self.entries[i].xi[k * self.d + j]);
            }
        }
        xi
    }

    fn find_xi(&self, target: &[f64], tol: f64) -> Option<usize> {
        self.entries.iter().position(|e| {
            e.xi.len() == target.len()
                && e.xi.iter().zip(target).all(|(a, b)| (a - b).abs() <= tol)
        })
    }

    /// Check every entry against the band
    /// c0 |xi|^p - sigma * se <= value <= C0 |xi|^p + C1 + sigma * se.
    pub fn band_violations(&self, sigma: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let norm = self.xi_mat(i).norm_op();
            let lo = self.constants.c0 * norm.powf(self.p)
                - self.delta.powf(self.p)
                - sigma * e.std_err;
            let hi = self.constants.cap0 * norm.powf(self.p)
                + self.constants.cap1
                + sigma * e.std_err;
            let slack = 1e-9 * (1.0 + hi.abs());
            if e.value < lo - slack || e.value > hi + slack {
                out.push(i);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityViolation {
    pub left: usize,
    pub mid: usize,
    pub right: usize,
    /// Positive excess of f(mid) over the midpoint average plus tolerance.
    pub excess: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub pairs_checked: usize,
    pub violations: Vec<ConvexityViolation>,
}

/// Midpoint-convexity scan over all entry pairs whose midpoint is in the
/// table: f(mid) <= (f(a) + f(b))/2 + sigma * combined standard error.
pub fn convexity_scan(table: &HomogenizedTable, sigma: f64) -> ConvexityReport {
    let mut report = ConvexityReport { pairs_checked: 0, violations: Vec::new() };
    let n = table.entries.len();
    let scale: f64 = table
        .entries
        .iter()
        .flat_map(|e| e.xi.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);
    for i in 0..n {
        for j in (i + 1)..n {
            let mid: Vec<f64> = table.entries[i]
                .xi
                .iter()
                .zip(&table.entries[j].xi)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let Some(k) = table.find_xi(&mid, tol) else { continue };
            report.pairs_checked += 1;
            let (ei, ej, ek) = (&table.entries[i], &table.entries[j], &table.entries[k]);
            let avg = 0.5 * (ei.value + ej.value);
            let se = (ek.std_err.powi(2)
                + 0.25 * ei.std_err.powi(2)
                + 0.25 * ej.std_err.powi(2))
            .sqrt();
            let excess = ek.value - avg - sigma * se;
            if excess > 1e-9 * (1.0 + avg.abs()) {
                report.violations.push(ConvexityViolation { left: i, mid: k, right: j, excess });
            }
        }
    }
    report
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradEstimate {
    /// Row-major m x d finite-difference gradient.
    pub grad: Vec<f64>,
    /// Standard error per component.
    pub std_err: Vec<f64>,
    pub norm: f64,
    /// The sufficient growth constant 2 p max(C0, C1).
    pub growth_constant: f64,
    pub within_growth_bound: bool,
}

/// Central finite-difference gradient of the tabulated density at a grid
/// point, with error bars and the growth-band certificate
/// |grad| <= 2 p max(C0, C1) (1 + |xi|^{p-1}).
pub fn dfhom(table: &HomogenizedTable, xi: &[f64], h: f64) -> Result<GradEstimate, CellError> {
    let scale: f64 = 1e-9 * (1.0 + xi.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let mut grad = Vec::with_capacity(xi.len());
    let mut errs = Vec::with_capacity(xi.len());
    for comp in 0..xi.len() {
        let mut plus = xi.to_vec();
        let mut minus = xi.to_vec();
        plus[comp] += h;
        minus[comp] -= h;
        let ip = table
            .find_xi(&plus, scale + 1e-12 * h)
            .ok_or_else(|| CellError::Table(format!("missing entry at +h in component {comp}")))?;
        let im = table
            .find_xi(&minus, scale + 1e-12 * h)
            .ok_or_else(|| CellError::Table(format!("missing entry at -h in component {comp}")))?;
        let (ep, em) = (&table.entries[ip], &table.entries[im]);
        grad.push((ep.value - em.value) / (2.0 * h));
        errs.push((ep.std_err.powi(2) + em.std_err.powi(2)).sqrt() / (2.0 * h));
    }
    let growth_constant = 2.0 * table.p * table.constants.cap0.max(table.constants.cap1);
    let mut xi_mat = MatMd::zeros(table.m, table.d);
    for k in 0..table.m {
        for j in 0..table.d {
            xi_mat.set(k, j, xi[k * table.d + j]);
        }
    }
    let bound = growth_constant * (1.0 + xi_mat.norm_op().powf(table.p - 1.0));
    // signal-to-noise guard: the statistical error of the difference must be
    // small against the admissible gradient scale over the step
    let total_err: f64 = errs.iter().map(|e| e * e).sum::<f64>().sqrt();
    if 3.0 * total_err > bound.max(1e-12) {
        return Err(CellError::StepTooNoisy);
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(GradEstimate {
        norm,
        within_growth_bound: norm <= bound + 3.0 * total_err,
        grad,
        std_err: errs,
        growth_constant,
    })
}

// ---------------------------------------------------------------------------
// Degeneracy probe
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Per-t means grow by at least a factor 2 per doubling on the two
    /// largest steps.
    BlowUp,
    /// Per-t means shrink by at least a factor 2 per doubling on the two
    /// largest steps.
    Collapse,
    Stable,
}

/// Classify the t-sweep of Dirichlet cell values for media with violated
/// moment conditions.
pub fn degeneracy_probe(
    xi: &MatMd,
    field: &CoefficientField,
    f: &Integrand,
    schedule: &CellSchedule,
    opts: &SolveOptions,
    base_seed: u64,
) -> Result<(Verdict, CellEnsemble), CellError> {
    if schedule.t_values.len() < 3 {
        return Err(CellError::Schedule("degeneracy probe needs at least 3 cell sizes".into()));
    }
    let ensemble = cell_ensemble(xi, field, f, schedule, opts, base_seed, false)?;
    let factor = sweep_factor(&ensemble.trace);
    let verdict = if factor >= DEGENERACY_FACTOR {
        Verdict::BlowUp
    } else if factor <= 1.0 / DEGENERACY_FACTOR {
        Verdict::Collapse
    } else {
        Verdict::Stable
    };
    Ok((verdict, ensemble))
}
