//! Numerical laboratory for stochastic homogenization of degenerate energies.
//!
//! The crate estimates effective (homogenized) energy densities of random
//! media with degenerate weights: seeded coefficient fields, convex energy
//! densities with weighted p-growth, P1 finite elements on Kuhn-triangulated
//! boxes, matrix-free convex solvers, cell problems with Dirichlet or
//! periodic boundary conditions, Euler-Lagrange PDE homogenization studies,
//! and empirical ergodic-theorem probes.

pub mod cell;
pub mod ergodic;
pub mod fields;
pub mod integrand;
pub mod mat;
pub mod mesh;
pub mod pde;
pub mod solver;
pub mod stats;

pub use cell::{
    bound_constants, cell_dirichlet, cell_periodic, convexity_scan, degeneracy_probe, dfhom,
    estimate_fhom, CellError, CellResult, CellSchedule, HomogenizedTable, Verdict,
};
pub use fields::{CoefficientField, FieldError, FieldKind, FieldSample, ScalarLaw, Seed};
pub use integrand::{truncate, Integrand, IntegrandKind};
pub use mat::MatMd;
pub use mesh::{DiscreteField, Mesh, Norm};
pub use pde::{HomogenizedLaw, PdeError};
pub use solver::{
    complementarity_residual, minimize, Method, SolveError, SolveOptions, SolveReport,
};

pub const MAX_DIM: usize = 3;
