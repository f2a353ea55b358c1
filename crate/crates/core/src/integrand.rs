//! Convex energy densities with degenerate weighted p-growth, their
//! gradients, and the nodewise vector truncation operator.
//!
//! The density acts on the column-weighted gradient M = xi * A through the
//! Frobenius norm; for scalar fields (m = 1) this is exactly the Euclidean
//! norm of the weighted row, so the operator-norm growth envelope
//! `c |xi A|^p <= f <= |xi A|^p + Lambda` is met with equality constants.
//! For m > 1 the envelopes hold up to fixed norm-equivalence factors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::FieldSample;
use crate::mat::MatMd;
use crate::MAX_DIM;

#[derive(Debug, Error)]
pub enum IntegrandError {
    #[error("invalid integrand: {0}")]
    Invalid(String),
    #[error("truncation level must be positive, got {0}")]
    BadLevel(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrandKind {
    /// f = |xi A|^p (delta-regularized for 1 < p < 2).
    PowerLaw,
    /// f = (1 - rho) |xi A|^p + rho h(|xi A|) with the smooth convex
    /// perturbation h(s) = (sqrt(1 + s^2) - 1)^p <= s^p. Keeps the upper
    /// growth envelope with coefficient one and lower constant c = 1 - rho.
    PerturbedConvex { rho: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integrand {
    pub kind: IntegrandKind,
    /// Growth exponent, > 1.
    pub p: f64,
    /// Components of u (rows of xi).
    pub m: usize,
    /// Spatial dimension (columns of xi).
    pub d: usize,
    /// Smoothing parameter for 1 < p < 2: |M|^p becomes
    /// (delta^2 + |M|^2)^(p/2) - delta^p.
    pub regularization_delta: f64,
    /// When set, Lambda is added to the density (upper envelope attained).
    pub add_lambda: bool,
}

impl Integrand {
    pub fn power_law(p: f64, m: usize, d: usize) -> Self {
        Integrand {
            kind: IntegrandKind::PowerLaw,
            p,
            m,
            d,
            regularization_delta: 0.0,
            add_lambda: false,
        }
    }

    pub fn perturbed(p: f64, m: usize, d: usize, rho: f64) -> Self {
        Integrand {
            kind: IntegrandKind::PerturbedConvex { rho },
            p,
            m,
            d,
            regularization_delta: 0.0,
            add_lambda: false,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.regularization_delta = delta;
        self
    }

    pub fn with_lambda_term(mut self) -> Self {
        self.add_lambda = true;
        self
    }

    pub fn validate(&self) -> Result<(), IntegrandError> {
        if !(self.p > 1.0) {
            return Err(IntegrandError::Invalid("p must exceed 1".into()));
        }
        if self.m < 1 || self.m > MAX_DIM || self.d < 1 || self.d > MAX_DIM {
            return Err(IntegrandError::Invalid("m and d must lie in 1..=3".into()));
        }
        if self.regularization_delta < 0.0 {
            return Err(IntegrandError::Invalid("regularization delta must be >= 0".into()));
        }
        if let IntegrandKind::PerturbedConvex { rho } = self.kind {
            if !(0.0..1.0).contains(&rho) {
                return Err(IntegrandError::Invalid("rho must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Lower growth constant c with c |xi A|^p <= f + delta^p.
    pub fn c_lower(&self) -> f64 {
        match self.kind {
            IntegrandKind::PowerLaw => 1.0,
            IntegrandKind::PerturbedConvex { rho } => 1.0 - rho,
        }
    }

    fn rho(&self) -> f64 {
        match self.kind {
            IntegrandKind::PowerLaw => 0.0,
            IntegrandKind::PerturbedConvex { rho } => rho,
        }
    }

    /// Density value at the weighted gradient. Non-finite xi is rejected.
    #[inline]
    pub fn eval(&self, sample: &FieldSample, xi: &MatMd) -> f64 {
        self.eval_with_delta(sample, xi, self.regularization_delta)
    }

    #[inline]
    pub fn eval_with_delta(&self, sample: &FieldSample, xi: &MatMd, delta: f64) -> f64 {
        debug_assert!(xi.m == self.m && xi.d == self.d);
        assert!(xi.is_finite(), "non-finite gradient rejected");
        let s2 = xi.scale_cols(&sample.a).frob2();
        let rho = self.rho();
        let core = if delta == 0.0 {
            s2.powf(0.5 * self.p)
        } else {
            (delta * delta + s2).powf(0.5 * self.p) - delta.powf(self.p)
        };
        let mut value = (1.0 - rho) * core;
        if rho != 0.0 {
            value += rho * ((1.0 + s2).sqrt() - 1.0).powf(self.p);
        }
        if self.add_lambda {
            value += sample.lambda;
        }
        value
    }

    /// Gradient of `eval` with respect to xi.
    #[inline]
    pub fn grad(&self, sample: &FieldSample, xi: &MatMd) -> MatMd {
        self.grad_with_delta(sample, xi, self.regularization_delta)
    }

    #[inline]
    pub fn grad_with_delta(&self, sample: &FieldSample, xi: &MatMd, delta: f64) -> MatMd {
        debug_assert!(xi.m == self.m && xi.d == self.d);
        assert!(xi.is_finite(), "non-finite gradient rejected");
        let weighted = xi.scale_cols(&sample.a);
        let s2 = weighted.frob2();
        let rho = self.rho();
        let t = delta * delta + s2;
        // d/dM (t^(p/2)) = p t^(p/2 - 1) M; the limit at M = 0 vanishes for p > 1.
        let mut coef = if t == 0.0 {
            0.0
        } else {
            (1.0 - rho) * self.p * t.powf(0.5 * self.p - 1.0)
        };
        if rho != 0.0 && s2 > 0.0 {
            let root = (1.0 + s2).sqrt();
            coef += rho * self.p * (root - 1.0).powf(self.p - 1.0) / root;
        }
        // grad_kj = coef * (xi A)_kj * a_j
        weighted.scale_cols(&sample.a).scaled(coef)
    }
}

// ---------------------------------------------------------------------------
// Nodewise vector truncation
// ---------------------------------------------------------------------------

/// Radial profile rho(s) = |psi_r(x)|/r at s = |x|/r: identity up to 1,
/// C^1, slope in [-1, 1], peak 1.125, and zero from 3 on.
pub fn truncation_profile(s: f64) -> f64 {
    if s <= 1.0 {
        s
    } else if s <= 1.5 {
        let u = s - 1.0;
        1.0 + u - 2.0 * u * u
    } else if s <= 2.0 {
        1.0 - (s - 1.5)
    } else if s <= 3.0 {
        let u = s - 2.0;
        0.5 - u + 0.5 * u * u
    } else {
        0.0
    }
}

/// The smooth radial retraction psi_r applied to one vector value.
pub fn truncate_vector(x: &mut [f64], r: f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= r {
        return;
    }
    let s = norm / r;
    let factor = if s > 0.0 { truncation_profile(s) / s } else { 1.0 };
    for v in x.iter_mut() {
        *v *= factor;
    }
}

/// Nodewise truncation of a nodal vector field with m components per node.
/// The map is 1-Lipschitz, equals the identity where |u| <= r, keeps
/// |psi_r(u)| <= 2r everywhere and vanishes where |u| >= 3r.
pub fn truncate_nodal(dofs: &[f64], m: usize, r: f64) -> Result<Vec<f64>, IntegrandError> {
    if !(r > 0.0) {
        return Err(IntegrandError::BadLevel(r));
    }
    assert!(dofs.len() % m == 0, "dof count must be a multiple of m");
    let mut out = dofs.to_vec();
    for chunk in out.chunks_mut(m) {
        truncate_vector(chunk, r);
    }
    Ok(out)
}

/// Truncation of a discrete field; see [`truncate_nodal`].
pub fn truncate(
    u: &crate::mesh::DiscreteField,
    r: f64,
) -> Result<crate::mesh::DiscreteField, IntegrandError> {
    let dofs = truncate_nodal(u.dofs(), u.m(), r)?;
    Ok(crate::mesh::DiscreteField::from_dofs(u.mesh().clone(), u.m(), dofs))
}
