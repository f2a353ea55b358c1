//! Convex minimization of discretized energies, with optional pointwise
//! lower-bound (obstacle) constraints and linear force terms.
//!
//! Two paths share one problem description:
//! - a matrix-free-assembled CG on the weighted stiffness operator with a
//!   Jacobi preconditioner, for densities that are exactly quadratic per
//!   element and unconstrained problems;
//! - a projected first-order method (Barzilai-Borwein step proposal with an
//!   Armijo backtracking safeguard) for everything else, with continuation in
//!   the regularization parameter for 1 < p < 2.
//!
//! Every solve is single-threaded and deterministic; callers run independent
//! solves concurrently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::FieldSample;
use crate::integrand::Integrand;
use crate::mat::MatMd;
use crate::mesh::{DiscreteField, Mesh};
use crate::MAX_DIM;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("boundary data violates the obstacle at {count} boundary nodes")]
    InfeasibleObstacle { count: usize },
    #[error("conjugate gradients requires an unconstrained quadratic problem")]
    NotQuadratic,
    #[error("invalid solve options: {0}")]
    BadOptions(String),
    #[error("non-finite data: {0}")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Preconditioned conjugate gradients on the weighted stiffness operator;
    /// valid only for per-element quadratic densities without obstacle.
    CgLinear,
    /// Projected Barzilai-Borwein steps with Armijo backtracking.
    FirstOrder,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Relative gradient tolerance: converged when
    /// ||projected gradient|| <= grad_tol * (1 + |energy|).
    pub grad_tol: f64,
    /// Relative energy-decrease stall threshold for the first-order method.
    pub energy_tol: f64,
    /// None selects CG when admissible, first-order otherwise.
    pub method: Option<Method>,
    /// Strictly decreasing regularization deltas for 1 < p < 2 continuation;
    /// the last entry is used for the reported solve.
    pub continuation_deltas: Vec<f64>,
    /// Fill the initial iterate with seeded noise instead of the boundary
    /// lift. Used by the uniqueness probe.
    pub random_init_seed: Option<u64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 50_000,
            grad_tol: 1e-6,
            energy_tol: 1e-14,
            method: None,
            continuation_deltas: Vec::new(),
            random_init_seed: None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.grad_tol > 0.0) || !(self.energy_tol > 0.0) {
            return Err(SolveError::BadOptions("tolerances must be positive".into()));
        }
        for w in self.continuation_deltas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(SolveError::BadOptions(
                    "continuation deltas must be strictly decreasing".into(),
                ));
            }
        }
        if let Some(last) = self.continuation_deltas.last() {
            if *last < 0.0 {
                return Err(SolveError::BadOptions("final delta must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn with_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub final_energy: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Seconds; informational only, never part of deterministic artifacts.
    pub wall_time: f64,
    pub method: Method,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Density abstraction
// ---------------------------------------------------------------------------

/// Per-element energy density: the objective is
/// sum_e vol * (value(e, grad u|_e)) - <force, u>.
pub trait ElementDensity: Sync {
    fn m(&self) -> usize;
    fn value(&self, e: usize, xi: &MatMd) -> f64;
    fn grad(&self, e: usize, xi: &MatMd) -> MatMd;
    /// Some(w) when value(e, xi) = sum_j w[j] |column_j(xi)|^2 + offset(e).
    fn quadratic_axis_weights(&self, e: usize) -> Option<[f64; MAX_DIM]>;
    /// Gradient-free additive part (e.g. the Lambda term).
    fn offset(&self, e: usize) -> f64 {
        let _ = e;
        0.0
    }
    /// Continuation hook; densities without a regularization knob ignore it.
    fn with_delta(&self, delta: f64) -> Option<Box<dyn ElementDensity + '_>> {
        let _ = delta;
        None
    }
}

/// An integrand with coefficients frozen at the element barycenters. The
/// Lambda term, when enabled, is reported through `offset` so the
/// gradient-relevant part stays clean (and quadratic at p = 2).
pub struct SampledDensity<'a> {
    pub integrand: Integrand,
    core: Integrand,
    pub coeffs: &'a [FieldSample],
}

impl<'a> SampledDensity<'a> {
    pub fn new(integrand: Integrand, coeffs: &'a [FieldSample]) -> Self {
        let mut core = integrand;
        core.add_lambda = false;
        SampledDensity { integrand, core, coeffs }
    }
}

impl ElementDensity for SampledDensity<'_> {
    fn m(&self) -> usize {
        self.integrand.m
    }

    #[inline]
    fn value(&self, e: usize, xi: &MatMd) -> f64 {
        self.core.eval(&self.coeffs[e], xi)
    }

    #[inline]
    fn grad(&self, e: usize, xi: &MatMd) -> MatMd {
        self.integrand.grad(&self.coeffs[e], xi)
    }

    fn quadratic_axis_weights(&self, e: usize) -> Option<[f64; MAX_DIM]> {
        // |xi A|_F^2 = sum_j a_j^2 |column_j|^2; the delta regularization is
        // the identity at p = 2.
        if matches!(self.integrand.kind, crate::integrand::IntegrandKind::PowerLaw)
            && self.integrand.p == 2.0
        {
            let a = self.coeffs[e].a;
            Some([a[0] * a[0], a[1] * a[1], a[2] * a[2]])
        } else {
            None
        }
    }

    fn offset(&self, e: usize) -> f64 {
        if self.integrand.add_lambda {
            self.coeffs[e].lambda
        } else {
            0.0
        }
    }

    fn with_delta(&self, delta: f64) -> Option<Box<dyn ElementDensity + '_>> {
        Some(Box::new(SampledDensity::new(
            self.integrand.with_delta(delta),
            self.coeffs,
        )))
    }
}

// ---------------------------------------------------------------------------
// Problem description
// ---------------------------------------------------------------------------

pub struct Problem<'a> {
    pub mesh: &'a Mesh,
    pub density: &'a dyn ElementDensity,
    /// Nodal lift of the Dirichlet datum; boundary values are read from it
    /// and it doubles as the default initial iterate.
    pub boundary: &'a DiscreteField,
    /// Nodal force density (per component); applied through lumped weights.
    pub force: Option<&'a DiscreteField>,
    /// Nodal lower bound per dof (componentwise obstacle).
    pub obstacle: Option<&'a [f64]>,
}

impl<'a> Problem<'a> {
    fn m(&self) -> usize {
        self.density.m()
    }

    fn validate(&self) -> Result<(), SolveError> {
        if !self.boundary.is_finite() {
            return Err(SolveError::NonFinite("boundary data".into()));
        }
        if let Some(f) = self.force {
            if !f.is_finite() {
                return Err(SolveError::NonFinite("force".into()));
            }
        }
        if let Some(obs) = self.obstacle {
            assert_eq!(obs.len(), self.mesh.node_count() * self.m(), "obstacle length");
            let m = self.m();
            let mut bad = 0usize;
            for node in 0..self.mesh.node_count() {
                if self.mesh.is_boundary(node) {
                    for k in 0..m {
                        if self.boundary.dofs()[node * m + k] < obs[node * m + k] - 1e-12 {
                            bad += 1;
                        }
                    }
                }
            }
            if bad > 0 {
                return Err(SolveError::InfeasibleObstacle { count: bad });
            }
        }
        Ok(())
    }

    /// Lumped load vector b with <force, u> ~ b . u.
    fn load_vector(&self) -> Option<Vec<f64>> {
        let force = self.force?;
        let w = self.mesh.lumped_node_weights();
        let m = self.m();
        let mut b = vec![0.0; self.mesh.node_count() * m];
        for node in 0..self.mesh.node_count() {
            for k in 0..m {
                b[node * m + k] = w[node] * force.dofs()[node * m + k];
            }
        }
        Some(b)
    }
}

/// Total objective: heterogeneous energy plus offsets minus the force term.
pub fn objective(problem: &Problem, u: &DiscreteField, b: Option<&[f64]>) -> f64 {
    let vol = problem.mesh.element_volume();
    let mut acc = 0.0;
    for e in 0..problem.mesh.element_count() {
        let g = u.gradient_on_element(e);
        acc += vol * (problem.density.value(e, &g) + problem.density.offset(e));
    }
    if let Some(b) = b {
        let mut f = 0.0;
        for (bi, ui) in b.iter().zip(u.dofs()) {
            f += bi * ui;
        }
        acc -= f;
    }
    acc
}

/// Nodal gradient of the objective (boundary dofs zeroed).
pub fn objective_gradient(problem: &Problem, u: &DiscreteField, b: Option<&[f64]>) -> Vec<f64> {
    let mesh = problem.mesh;
    let m = problem.m();
    let vol = mesh.element_volume();
    let mut grad = vec![0.0; mesh.node_count() * m];
    // Gather per node: deterministic regardless of any outer parallelism.
    for node in 0..mesh.node_count() {
        if mesh.is_boundary(node) {
            continue;
        }
        let base = node * m;
        mesh.for_incident_elements(node, |e, local| {
            let q = e % mesh.n_perms();
            let g = u.gradient_on_element(e);
            let df = problem.density.grad(e, &g);
            let hat = mesh.hat_gradient(q, local);
            for k in 0..m {
                let mut acc = 0.0;
                for j in 0..mesh.d {
                    acc += df.get(k, j) * hat.get(0, j);
                }
                grad[base + k] += vol * acc;
            }
        });
    }
    if let Some(b) = b {
        for node in 0..mesh.node_count() {
            if mesh.is_boundary(node) {
                continue;
            }
            for k in 0..m {
                grad[node * m + k] -= b[node * m + k];
            }
        }
    }
    grad
}

/// Projected-gradient norm: free dofs use the plain gradient away from the
/// obstacle and its negative part on the contact set.
fn projected_gradient_norm(
    problem: &Problem,
    u: &DiscreteField,
    grad: &[f64],
) -> f64 {
    let m = problem.m();
    let mut acc = 0.0;
    for node in 0..problem.mesh.node_count() {
        if problem.mesh.is_boundary(node) {
            continue;
        }
        for k in 0..m {
            let i = node * m + k;
            let g = match problem.obstacle {
                Some(obs) if u.dofs()[i] <= obs[i] + 1e-14 => grad[i].min(0.0),
                _ => grad[i],
            };
            acc += g * g;
        }
    }
    acc.sqrt()
}

/// KKT certificate for the variational inequality: max over free dofs of
/// |min(u - obstacle, gradient component)|. Without an obstacle this reduces
/// to the max-norm of the free gradient.
pub fn complementarity_residual(
    problem: &Problem,
    u: &DiscreteField,
    grad: &[f64],
) -> f64 {
    let m = problem.m();
    let mut worst = 0.0f64;
    for node in 0..problem.mesh.node_count() {
        if problem.mesh.is_boundary(node) {
            continue;
        }
        for k in 0..m {
            let i = node * m + k;
            let r = match problem.obstacle {
                Some(obs) => (u.dofs()[i] - obs[i]).min(grad[i]).abs(),
                None => grad[i].abs(),
            };
            worst = worst.max(r);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Minimize the discretized functional. Returns the minimizer with the fixed
/// boundary trace (and nodal feasibility when an obstacle is given) together
/// with a solve report; `converged == false` signals non-convergence, the
/// partial result is still returned.
pub fn minimize(
    problem: &Problem,
    opts: &SolveOptions,
) -> Result<(DiscreteField, SolveReport), SolveError> {
    opts.validate()?;
    problem.validate()?;
    let start = std::time::Instant::now();
    let b = problem.load_vector();

    let quadratic = (0..problem.mesh.element_count())
        .all(|e| problem.density.quadratic_axis_weights(e).is_some());
    let method = match opts.method {
        Some(Method::CgLinear) => {
            if !quadratic || problem.obstacle.is_some() {
                return Err(SolveError::NotQuadratic);
            }
            Method::CgLinear
        }
        Some(Method::FirstOrder) => Method::FirstOrder,
        None => {
            if quadratic && problem.obstacle.is_none() {
                Method::CgLinear
            } else {
                Method::FirstOrder
            }
        }
    };

    let mut u = initial_iterate(problem, opts);
    let (iterations, grad_norm, converged) = match method {
        Method::CgLinear => cg_solve(problem, &mut u, b.as_deref(), opts),
        Method::FirstOrder => first_order_solve(problem, &mut u, b.as_deref(), opts),
    };
    let final_energy = objective(problem, &u, b.as_deref());
    let report = SolveReport {
        final_energy,
        iterations,
        grad_norm,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        method,
    };
    Ok((u, report))
}

/// Convenience wrapper: sample the medium at element barycenters and minimize
/// the heterogeneous energy at scale eps.
#[allow(clippy::too_many_arguments)]
pub fn minimize_energy(
    f: &Integrand,
    field: &crate::fields::CoefficientField,
    seed: crate::fields::Seed,
    eps: f64,
    mesh: &Mesh,
    boundary: &DiscreteField,
    force: Option<&DiscreteField>,
    obstacle: Option<&[f64]>,
    opts: &SolveOptions,
) -> Result<(DiscreteField, SolveReport), SolveError> {
    let coeffs = crate::mesh::sample_coefficients(mesh, field, seed, eps);
    let density = SampledDensity::new(*f, &coeffs);
    let problem = Problem { mesh, density: &density, boundary, force, obstacle };
    minimize(&problem, opts)
}

fn initial_iterate(problem: &Problem, opts: &SolveOptions) -> DiscreteField {
    let mut u = problem.boundary.clone();
    if let Some(seed) = opts.random_init_seed {
        let m = problem.m();
        let mut state = seed ^ 0x9e3779b97f4a7c15;
        for node in 0..problem.mesh.node_count() {
            if problem.mesh.is_boundary(node) {
                continue;
            }
            for k in 0..m {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let r = (state >> 11) as f64 / (1u64 << 53) as f64;
                u.dofs_mut()[node * m + k] += 2.0 * r - 1.0;
            }
        }
    }
    if let Some(obs) = problem.obstacle {
        for (ui, oi) in u.dofs_mut().iter_mut().zip(obs) {
            if *ui < *oi {
                *ui = *oi;
            }
        }
    }
    u
}

// ---------------------------------------------------------------------------
// CG path
// ---------------------------------------------------------------------------

/// Scalar weighted-stiffness operator in CSR form. For per-element quadratic
/// densities the components of u decouple, so one scalar matrix serves all m
/// components.
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

fn assemble_quadratic(problem: &Problem) -> Csr {
    let mesh = problem.mesh;
    let nn = mesh.node_count();
    let mut row_ptr = Vec::with_capacity(nn + 1);
    let mut cols: Vec<u32> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut diag = vec![0.0; nn];
    let vol = mesh.element_volume();
    row_ptr.push(0);
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(16);
    for row in 0..nn {
        entries.clear();
        mesh.for_incident_elements(row, |e, local| {
            let q = e % mesh.n_perms();
            let w = problem.density.quadratic_axis_weights(e).expect("quadratic density");
            let nodes = mesh.element_nodes(e);
            let hrow = mesh.hat_gradient(q, local);
            for (other, &col) in nodes.iter().take(mesh.d + 1).enumerate() {
                let hcol = mesh.hat_gradient(q, other);
                let mut acc = 0.0;
                for j in 0..mesh.d {
                    acc += w[j] * hrow.get(0, j) * hcol.get(0, j);
                }
                entries.push((col as u32, vol * acc));
            }
        });
        entries.sort_by_key(|(c, _)| *c);
        let mut idx = 0;
        while idx < entries.len() {
            let col = entries[idx].0;
            let mut acc = 0.0;
            while idx < entries.len() && entries[idx].0 == col {
                acc += entries[idx].1;
                idx += 1;
            }
            cols.push(col);
            vals.push(acc);
            if col as usize == row {
                diag[row] = acc;
            }
        }
        row_ptr.push(cols.len());
    }
    Csr { row_ptr, cols, vals, diag }
}

impl Csr {
    /// y = A x for one component slice (stride m layout handled by caller).
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for row in 0..self.row_ptr.len() - 1 {
            let mut acc = 0.0;
            for idx in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.vals[idx] * x[self.cols[idx] as usize];
            }
            y[row] = acc;
        }
    }
}

fn cg_component(
    csr: &Csr,
    free: &[bool],
    x: &mut [f64],
    rhs: &[f64],
    tol: f64,
    max_iters: usize,
) -> (usize, f64) {
    let nn = x.len();
    let mut ax = vec![0.0; nn];
    // gradient of x^T K x - b.x is 2Kx - b; solve 2Kx = b on free nodes.
    csr.matvec(x, &mut ax);
    let mut r: Vec<f64> = (0..nn)
        .map(|i| if free[i] { rhs[i] - 2.0 * ax[i] } else { 0.0 })
        .collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        for i in 0..nn {
            z[i] = if free[i] { r[i] / (2.0 * csr.diag[i]).max(1e-300) } else { 0.0 };
        }
    };
    let mut z = vec![0.0; nn];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut iter = 0usize;
    let mut rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    while rnorm > tol && iter < max_iters {
        csr.matvec(&p, &mut ax);
        let pap: f64 = (0..nn).map(|i| if free[i] { p[i] * 2.0 * ax[i] } else { 0.0 }).sum();
        if pap <= 0.0 {
            break; // operator numerically singular in this direction
        }
        let alpha = rz / pap;
        for i in 0..nn {
            if free[i] {
                x[i] += alpha * p[i];
                r[i] -= alpha * 2.0 * ax[i];
            }
        }
        precond(&r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..nn {
            if free[i] {
                p[i] = z[i] + beta * p[i];
            }
        }
        rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        iter += 1;
    }
    (iter, rnorm)
}

fn cg_solve(
    problem: &Problem,
    u: &mut DiscreteField,
    b: Option<&[f64]>,
    opts: &SolveOptions,
) -> (usize, f64, bool) {
    let mesh = problem.mesh;
    let m = problem.m();
    let nn = mesh.node_count();
    let csr = assemble_quadratic(problem);
    let free: Vec<bool> = (0..nn).map(|i| !mesh.is_boundary(i)).collect();

    // The stopping test is relative to the final energy, which is only known
    // afterwards; start from the initial energy and re-tighten if needed.
    let mut tol = opts.grad_tol * (1.0 + objective(problem, u, b).abs());
    let mut total_iters = 0usize;
    let mut grad_norm = f64::INFINITY;
    let mut x = vec![0.0; nn];
    let mut rhs = vec![0.0; nn];
    for _round in 0..8 {
        let mut sq = 0.0;
        for k in 0..m {
            for node in 0..nn {
                x[node] = u.dofs()[node * m + k];
                rhs[node] = b.map_or(0.0, |b| b[node * m + k]);
            }
            let budget = opts.max_iters.saturating_sub(total_iters);
            let (iters, rnorm) = cg_component(&csr, &free, &mut x, &rhs, tol, budget);
            total_iters += iters;
            sq += rnorm * rnorm;
            for node in 0..nn {
                if free[node] {
                    u.dofs_mut()[node * m + k] = x[node];
                }
            }
        }
        grad_norm = sq.sqrt();
        let final_tol = opts.grad_tol * (1.0 + objective(problem, u, b).abs());
        if grad_norm <= final_tol {
            return (total_iters, grad_norm, true);
        }
        if total_iters >= opts.max_iters {
            break;
        }
        // warm restart with the tolerance implied by the current energy
        tol = final_tol / (m as f64).sqrt();
    }
    (total_iters, grad_norm, false)
}

// ---------------------------------------------------------------------------
// First-order path
// ---------------------------------------------------------------------------

fn first_order_solve(
    problem: &Problem,
    u: &mut DiscreteField,
    b: Option<&[f64]>,
    opts: &SolveOptions,
) -> (usize, f64, bool) {
    // Continuation: run the stages on decreasing delta, warm-starting each.
    let deltas: Vec<f64> = if opts.continuation_deltas.is_empty() {
        vec![f64::NAN] // sentinel: use the density as-is
    } else {
        opts.continuation_deltas.clone()
    };
    let n_stages = deltas.len();
    let mut total_iters = 0usize;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    for (stage, delta) in deltas.iter().enumerate() {
        let staged;
        let density: &dyn ElementDensity = if delta.is_nan() {
            problem.density
        } else {
            match problem.density.with_delta(*delta) {
                Some(d) => {
                    staged = d;
                    &*staged
                }
                None => problem.density,
            }
        };
        let sub = Problem {
            mesh: problem.mesh,
            density,
            boundary: problem.boundary,
            force: problem.force,
            obstacle: problem.obstacle,
        };
        let budget = opts.max_iters / n_stages.max(1);
        let last = stage + 1 == n_stages;
        let (iters, g, ok) = bb_armijo(&sub, u, b, opts, budget.max(100), last);
        total_iters += iters;
        grad_norm = g;
        converged = ok;
    }
    (total_iters, grad_norm, converged)
}

fn project(u: &mut [f64], obstacle: Option<&[f64]>) {
    if let Some(obs) = obstacle {
        for (ui, oi) in u.iter_mut().zip(obs) {
            if *ui < *oi {
                *ui = *oi;
            }
        }
    }
}

fn bb_armijo(
    problem: &Problem,
    u: &mut DiscreteField,
    b: Option<&[f64]>,
    opts: &SolveOptions,
    max_iters: usize,
    final_stage: bool,
) -> (usize, f64, bool) {
    let sigma = 1e-4;
    let mut energy = objective(problem, u, b);
    let mut grad = objective_gradient(problem, u, b);
    let mut pg = projected_gradient_norm(problem, u, &grad);
    // the energy only decreases, so refreshing keeps the test honest
    // against the final energy
    let mut tol = opts.grad_tol * (1.0 + energy.abs());

    let mut step = {
        // cautious first step: unit displacement against the gradient scale
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 > 0.0 {
            (1.0 / g2.sqrt()).min(1.0)
        } else {
            1.0
        }
    };
    let mut prev_u: Vec<f64> = Vec::new();
    let mut prev_grad: Vec<f64> = Vec::new();
    let mut stall = 0usize;
    let mut iter = 0usize;

    while iter < max_iters {
        if pg <= tol {
            return (iter, pg, true);
        }
        // BB1 step from the previous pair
        if !prev_u.is_empty() {
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in 0..grad.len() {
                let s = u.dofs()[i] - prev_u[i];
                let y = grad[i] - prev_grad[i];
                ss += s * s;
                sy += s * y;
            }
            if sy > 1e-300 {
                step = (ss / sy).clamp(1e-12, 1e12);
            }
        }
        prev_u = u.dofs().to_vec();
        prev_grad = grad.clone();

        // Backtracking on the projected arc.
        let mut t = step;
        let mut accepted = false;
        let mut trial = u.clone();
        for _ in 0..60 {
            trial.dofs_mut().copy_from_slice(&prev_u);
            for (i, g) in grad.iter().enumerate() {
                trial.dofs_mut()[i] -= t * g;
            }
            // boundary dofs never move: their gradient entries are zero
            project(trial.dofs_mut(), problem.obstacle);
            let e_trial = objective(problem, &trial, b);
            let mut decrease = 0.0;
            for i in 0..grad.len() {
                decrease += grad[i] * (trial.dofs()[i] - prev_u[i]);
            }
            if e_trial <= energy + sigma * decrease {
                let drop = energy - e_trial;
                std::mem::swap(u, &mut trial);
                energy = e_trial;
                accepted = true;
                if drop.abs() <= opts.energy_tol * (1.0 + energy.abs()) {
                    stall += 1;
                } else {
                    stall = 0;
                }
                break;
            }
            t *= 0.5;
        }
        iter += 1;
        if !accepted {
            // no admissible decrease: report where we stand
            grad = objective_gradient(problem, u, b);
            pg = projected_gradient_norm(problem, u, &grad);
            return (iter, pg, pg <= tol);
        }
        grad = objective_gradient(problem, u, b);
        pg = projected_gradient_norm(problem, u, &grad);
        tol = opts.grad_tol * (1.0 + energy.abs());
        if stall >= 25 && !final_stage {
            break; // good enough for a continuation stage
        }
        if stall >= 200 {
            break;
        }
    }
    (iter, pg, pg <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{CoefficientField, ScalarLaw, Seed};
    use crate::mesh::Norm;

    fn identity_problem_setup(n: usize) -> (Mesh, CoefficientField, Integrand) {
        let mesh = Mesh::unit_square(n);
        let field = CoefficientField::constant(2, 1.0, 0.0, 2.0);
        let f = Integrand::power_law(2.0, 1, 2);
        (mesh, field, f)
    }

    #[test]
    fn affine_data_reproduced_by_cg() {
        // with A = I, zero force and affine boundary data, the affine lift is
        // the discrete minimizer (Jensen), so the solver must return it.
        let (mesh, field, f) = identity_problem_setup(12);
        let xi = MatMd::row(&[1.5, -0.25]);
        let lift = DiscreteField::affine(mesh.clone(), &xi, &[0.0]);
        let (u, rep) = minimize_energy(
            &f,
            &field,
            Seed(0),
            1.0,
            &mesh,
            &lift,
            None,
            None,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(rep.converged);
        assert_eq!(rep.method, Method::CgLinear);
        let err: f64 = u
            .dofs()
            .iter()
            .zip(lift.dofs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max deviation {err}");
        assert!((rep.final_energy - xi.frob2()).abs() < 1e-9);
    }

    #[test]
    fn manufactured_sin_product_second_order() {
        // E(u) = int |grad u|^2 - int f u has the Euler-Lagrange equation
        // -2 lap u = f, so f = 4 pi^2 sin sin makes u = sin sin the solution;
        // the L2 error must drop by ~4x per mesh doubling.
        let pi = std::f64::consts::PI;
        let l2_err = |n: usize| -> f64 {
            let (mesh, field, f) = identity_problem_setup(n);
            let zero = DiscreteField::zeros(mesh.clone(), 1);
            let force = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
                out[0] = 4.0 * pi * pi * (pi * x[0]).sin() * (pi * x[1]).sin();
            });
            let opts = SolveOptions { grad_tol: 1e-10, ..Default::default() };
            let (u, rep) = minimize_energy(
                &f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), None, &opts,
            )
            .unwrap();
            assert!(rep.converged);
            let exact = DiscreteField::interpolate(mesh, 1, |x, out| {
                out[0] = (pi * x[0]).sin() * (pi * x[1]).sin();
            });
            u.sub(&exact).norm(Norm::Lp(2.0))
        };
        let e16 = l2_err(16);
        let e32 = l2_err(32);
        let ratio = e16 / e32;
        assert!((3.4..=4.6).contains(&ratio), "ratio {ratio} (e16 {e16}, e32 {e32})");
    }

    #[test]
    fn scale_consistency_of_quadratic_case() {
        // p = 2: scaling the force scales the solution linearly.
        let (mesh, field, f) = identity_problem_setup(10);
        let zero = DiscreteField::zeros(mesh.clone(), 1);
        let force = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
            out[0] = (3.0 * x[0]).cos() + x[1];
        });
        let mut scaled_force = force.clone();
        for v in scaled_force.dofs_mut() {
            *v *= 3.0;
        }
        let opts = SolveOptions { grad_tol: 1e-12, ..Default::default() };
        let (u1, _) =
            minimize_energy(&f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), None, &opts)
                .unwrap();
        let (u3, _) = minimize_energy(
            &f, &field, Seed(0), 1.0, &mesh, &zero, Some(&scaled_force), None, &opts,
        )
        .unwrap();
        for (a, b) in u1.dofs().iter().zip(u3.dofs()) {
            assert!((3.0 * a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn inactive_obstacle_is_transparent() {
        // An obstacle far below the unconstrained solution must not change it.
        // Both runs use the first-order method so the iterates coincide.
        let (mesh, field, f) = identity_problem_setup(12);
        let pi = std::f64::consts::PI;
        let zero = DiscreteField::zeros(mesh.clone(), 1);
        let force = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
            out[0] = 4.0 * pi * pi * (pi * x[0]).sin() * (pi * x[1]).sin();
        });
        let opts = SolveOptions {
            grad_tol: 1e-9,
            method: Some(Method::FirstOrder),
            max_iters: 200_000,
            ..Default::default()
        };
        let low = vec![-1e6; mesh.node_count()];
        let (u_con, _) = minimize_energy(
            &f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), Some(&low), &opts,
        )
        .unwrap();
        let (u_unc, _) =
            minimize_energy(&f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), None, &opts)
                .unwrap();
        let dev = u_con
            .dofs()
            .iter()
            .zip(u_unc.dofs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-10, "deviation {dev}");
    }

    #[test]
    fn active_obstacle_complementarity() {
        // Pull the membrane down, block it with a constant obstacle.
        let (mesh, field, f) = identity_problem_setup(16);
        let zero = DiscreteField::zeros(mesh.clone(), 1);
        let force = DiscreteField::interpolate(mesh.clone(), 1, |_, out| out[0] = -8.0);
        let obstacle = vec![-0.05; mesh.node_count()];
        let opts = SolveOptions {
            grad_tol: 1e-8,
            max_iters: 300_000,
            ..Default::default()
        };
        let coeffs = crate::mesh::sample_coefficients(&mesh, &field, Seed(0), 1.0);
        let density = SampledDensity::new(f, &coeffs);
        let problem = Problem {
            mesh: &mesh,
            density: &density,
            boundary: &zero,
            force: Some(&force),
            obstacle: Some(&obstacle),
        };
        let (u, rep) = minimize(&problem, &opts).unwrap();
        assert!(rep.converged, "grad norm {}", rep.grad_norm);
        // nodewise feasibility
        for (ui, oi) in u.dofs().iter().zip(&obstacle) {
            assert!(ui >= &(oi - 1e-12));
        }
        // contact set nonempty
        let contacts = u
            .dofs()
            .iter()
            .zip(&obstacle)
            .filter(|(ui, oi)| (*ui - *oi).abs() < 1e-9)
            .count();
        assert!(contacts > 0, "expected contact");
        let b = problem.load_vector();
        let grad = objective_gradient(&problem, &u, b.as_deref());
        let res = complementarity_residual(&problem, &u, &grad);
        assert!(res <= 1e-6, "complementarity residual {res}");
        // constrained energy dominates the unconstrained one
        let (u_free, _) = minimize_energy(
            &f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), None, &opts,
        )
        .unwrap();
        let b_ref = b.as_deref();
        let free_energy = objective(
            &Problem { mesh: &mesh, density: &density, boundary: &zero, force: Some(&force), obstacle: None },
            &u_free,
            b_ref,
        );
        assert!(rep.final_energy >= free_energy - 1e-10);
    }

    #[test]
    fn infeasible_obstacle_rejected() {
        let (mesh, field, f) = identity_problem_setup(4);
        let zero = DiscreteField::zeros(mesh.clone(), 1);
        let obstacle = vec![0.5; mesh.node_count()]; // above the boundary datum
        let out = minimize_energy(
            &f,
            &field,
            Seed(0),
            1.0,
            &mesh,
            &zero,
            None,
            Some(&obstacle),
            &SolveOptions::default(),
        );
        assert!(matches!(out, Err(SolveError::InfeasibleObstacle { .. })));
    }

    #[test]
    fn first_order_handles_p_three() {
        // p = 3 power law with affine data: affine is again the minimizer.
        let mesh = Mesh::unit_square(8);
        let field = CoefficientField::constant(2, 1.0, 0.0, 3.0);
        let f = Integrand::power_law(3.0, 1, 2);
        let xi = MatMd::row(&[1.0, 0.5]);
        let lift = DiscreteField::affine(mesh.clone(), &xi, &[0.0]);
        let opts = SolveOptions { grad_tol: 1e-8, ..Default::default() };
        let (u, rep) =
            minimize_energy(&f, &field, Seed(0), 1.0, &mesh, &lift, None, None, &opts).unwrap();
        assert_eq!(rep.method, Method::FirstOrder);
        assert!(rep.converged);
        let exact = xi.frob2().powf(1.5);
        assert!((rep.final_energy - exact).abs() / exact < 1e-8);
        let dev = u
            .dofs()
            .iter()
            .zip(lift.dofs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6, "deviation {dev}");
    }

    #[test]
    fn uniqueness_probe_zero_vs_random_init() {
        // strict convexity: both initializations land on the same energy.
        let mesh = Mesh::unit_square(10);
        let field = CoefficientField::checkerboard(
            2,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.0 },
            2.0,
        );
        for (p, tol) in [(2.0f64, 1e-11f64), (1.5, 1e-9)] {
            let f = Integrand::power_law(p, 1, 2).with_delta(if p < 2.0 { 1e-3 } else { 0.0 });
            let xi = MatMd::row(&[1.0, 0.0]);
            let lift = DiscreteField::affine(mesh.clone(), &xi, &[0.0]);
            let mut opts = SolveOptions {
                grad_tol: 1e-11,
                max_iters: 400_000,
                ..Default::default()
            };
            if p < 2.0 {
                opts.continuation_deltas = vec![1e-1, 1e-2, 1e-3];
            }
            let (_, rep0) = minimize_energy(
                &f, &field, Seed(3), 1.0, &mesh, &lift, None, None, &opts,
            )
            .unwrap();
            opts.random_init_seed = Some(77);
            let (_, rep1) = minimize_energy(
                &f, &field, Seed(3), 1.0, &mesh, &lift, None, None, &opts,
            )
            .unwrap();
            let gap = (rep0.final_energy - rep1.final_energy).abs()
                / (1.0 + rep0.final_energy.abs());
            assert!(gap < tol.max(1e-8), "p={p} energy gap {gap}");
        }
    }

    #[test]
    fn monotone_energy_along_accepted_iterates() {
        // indirect check: the final energy never exceeds the lift energy
        let mesh = Mesh::unit_square(8);
        let field = CoefficientField::laminate(
            2,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.0 },
            2.0,
        );
        let f = Integrand::power_law(2.0, 1, 2);
        let xi = MatMd::row(&[1.0, 0.0]);
        let lift = DiscreteField::affine(mesh.clone(), &xi, &[0.0]);
        let lift_energy = crate::mesh::energy(&lift, &f, &field, Seed(5), 1.0).unwrap();
        let (_, rep) = minimize_energy(
            &f,
            &field,
            Seed(5),
            1.0,
            &mesh,
            &lift,
            None,
            None,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(rep.final_energy <= lift_energy + 1e-12);
    }

    #[test]
    fn cg_rejected_for_non_quadratic() {
        let mesh = Mesh::unit_square(4);
        let field = CoefficientField::constant(2, 1.0, 0.0, 3.0);
        let f = Integrand::power_law(3.0, 1, 2);
        let lift = DiscreteField::zeros(mesh.clone(), 1);
        let opts = SolveOptions { method: Some(Method::CgLinear), ..Default::default() };
        let out = minimize_energy(&f, &field, Seed(0), 1.0, &mesh, &lift, None, None, &opts);
        assert!(matches!(out, Err(SolveError::NotQuadratic)));
    }

    #[test]
    fn non_convergence_returns_flagged_partial_result() {
        let (mesh, field, f) = identity_problem_setup(16);
        let zero = DiscreteField::zeros(mesh.clone(), 1);
        let force = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
            out[0] = (7.0 * x[0]).sin();
        });
        let opts = SolveOptions { max_iters: 2, grad_tol: 1e-14, ..Default::default() };
        let (u, rep) =
            minimize_energy(&f, &field, Seed(0), 1.0, &mesh, &zero, Some(&force), None, &opts)
                .unwrap();
        assert!(!rep.converged);
        assert!(u.is_finite());
        assert!(rep.grad_norm > 0.0);
    }

    #[test]
    fn report_serializes_to_json() {
        let rep = SolveReport {
            final_energy: 1.0,
            iterations: 3,
            grad_norm: 1e-9,
            converged: true,
            wall_time: 0.1,
            method: Method::CgLinear,
        };
        let s = rep.to_json();
        assert!(s.contains("\"converged\":true"));
    }
}
