//! Seeded, stationary, ergodic coefficient fields (A, Lambda) on R^d.
//!
//! Randomness is counter-based: the value attached to a lattice cell k is
//! `hash64(seed, field_id, stream, k)` pushed through the inverse CDF of the
//! declared scalar law. Any cell of an arbitrarily large box can therefore be
//! evaluated in O(1) without storing the field. A per-seed uniform shift in
//! [0,1)^d turns the Z^d-stationary lattice construction into an
//! R^d-stationary one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::MAX_DIM;

/// The random sample: a 64-bit seed identifies one realization of the medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed(pub u64);

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("moment exponent must exceed 1, got {0}")]
    BadExponent(f64),
    #[error("need at least one cell, got {0}")]
    NoCells(usize),
    #[error("invalid law: {0}")]
    BadLaw(String),
    #[error("invalid field: {0}")]
    BadField(String),
}

// ---------------------------------------------------------------------------
// Counter-based hashing
// ---------------------------------------------------------------------------

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of (seed, field id, stream, lattice cell) with full avalanche.
#[inline]
fn hash_cell(seed: u64, field_id: u64, stream: u64, cell: [i64; MAX_DIM]) -> u64 {
    let mut h = splitmix64(seed ^ 0x243f_6a88_85a3_08d3);
    h = splitmix64(h ^ splitmix64(field_id));
    h = splitmix64(h ^ splitmix64(stream.wrapping_mul(0x1000_0000_1b3)));
    for c in cell {
        h = splitmix64(h ^ (c as u64));
    }
    h
}

/// Uniform in [0, 1) with 53 bits of the hash.
#[inline]
fn to_unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// ---------------------------------------------------------------------------
// Scalar laws
// ---------------------------------------------------------------------------

/// Law of a nonnegative scalar coefficient, sampled by inverse CDF.
///
/// All laws admit closed-form moments, which the oracle tests lean on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScalarLaw {
    Constant { value: f64 },
    /// Two atoms with P(lo) = p_lo.
    TwoPoint { lo: f64, hi: f64, p_lo: f64 },
    /// Finite support: (value, probability) pairs summing to 1.
    Discrete { atoms: Vec<(f64, f64)> },
    /// Pareto on [min, inf): P(X > x) = (min/x)^alpha. E[X^q] finite iff q < alpha.
    Pareto { alpha: f64, min: f64 },
    /// X = max * U^(1/alpha) on (0, max]. E[X^-q] finite iff q < alpha.
    InversePareto { alpha: f64, max: f64 },
}

impl ScalarLaw {
    pub fn two_point(lo: f64, hi: f64) -> Self {
        ScalarLaw::TwoPoint { lo, hi, p_lo: 0.5 }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |msg: &str| Err(FieldError::BadLaw(msg.to_string()));
        match self {
            ScalarLaw::Constant { value } => {
                if !value.is_finite() || *value < 0.0 {
                    return bad("constant value must be finite and nonnegative");
                }
            }
            ScalarLaw::TwoPoint { lo, hi, p_lo } => {
                if !(*lo >= 0.0 && hi > lo && (0.0..=1.0).contains(p_lo)) {
                    return bad("two-point law needs 0 <= lo < hi and p_lo in [0,1]");
                }
            }
            ScalarLaw::Discrete { atoms } => {
                if atoms.is_empty() {
                    return bad("discrete law needs at least one atom");
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 || atoms.iter().any(|(v, p)| *v < 0.0 || *p < 0.0) {
                    return bad("discrete law needs nonnegative atoms with probabilities summing to 1");
                }
            }
            ScalarLaw::Pareto { alpha, min } => {
                if !(*alpha > 0.0 && *min > 0.0) {
                    return bad("pareto law needs alpha > 0 and min > 0");
                }
            }
            ScalarLaw::InversePareto { alpha, max } => {
                if !(*alpha > 0.0 && *max > 0.0) {
                    return bad("inverse pareto law needs alpha > 0 and max > 0");
                }
            }
        }
        Ok(())
    }

    /// Inverse CDF at u in [0, 1).
    pub fn sample(&self, u: f64) -> f64 {
        match self {
            ScalarLaw::Constant { value } => *value,
            ScalarLaw::TwoPoint { lo, hi, p_lo } => {
                if u < *p_lo {
                    *lo
                } else {
                    *hi
                }
            }
            ScalarLaw::Discrete { atoms } => {
                let mut acc = 0.0;
                for (v, p) in atoms {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                atoms.last().unwrap().0
            }
            ScalarLaw::Pareto { alpha, min } => min * (1.0 - u).powf(-1.0 / alpha),
            ScalarLaw::InversePareto { alpha, max } => max * u.powf(1.0 / alpha),
        }
    }

    /// E[X^q] in closed form; `None` when the moment diverges.
    pub fn moment(&self, q: f64) -> Option<f64> {
        match self {
            ScalarLaw::Constant { value } => {
                if *value == 0.0 && q < 0.0 {
                    None
                } else {
                    Some(value.powf(q))
                }
            }
            ScalarLaw::TwoPoint { lo, hi, p_lo } => {
                if *lo == 0.0 && q < 0.0 {
                    None
                } else {
                    Some(p_lo * lo.powf(q) + (1.0 - p_lo) * hi.powf(q))
                }
            }
            ScalarLaw::Discrete { atoms } => {
                if q < 0.0 && atoms.iter().any(|(v, p)| *v == 0.0 && *p > 0.0) {
                    None
                } else {
                    Some(atoms.iter().map(|(v, p)| p * v.powf(q)).sum())
                }
            }
            ScalarLaw::Pareto { alpha, min } => {
                if q >= *alpha {
                    None
                } else {
                    Some(alpha / (alpha - q) * min.powf(q))
                }
            }
            ScalarLaw::InversePareto { alpha, max } => {
                if q <= -*alpha {
                    None
                } else {
                    Some(alpha / (alpha + q) * max.powf(q))
                }
            }
        }
    }

    /// Tail mass E[(X^q - k)_+] for k > 0; `None` when it diverges.
    pub fn excess_moment(&self, q: f64, k: f64) -> Option<f64> {
        assert!(k > 0.0 && q > 0.0);
        match self {
            ScalarLaw::Constant { value } => Some((value.powf(q) - k).max(0.0)),
            ScalarLaw::TwoPoint { lo, hi, p_lo } => Some(
                p_lo * (lo.powf(q) - k).max(0.0) + (1.0 - p_lo) * (hi.powf(q) - k).max(0.0),
            ),
            ScalarLaw::Discrete { atoms } => {
                Some(atoms.iter().map(|(v, p)| p * (v.powf(q) - k).max(0.0)).sum())
            }
            // For Y = X^q with X Pareto(alpha, min): P(Y > s) = (min^q / s)^(alpha/q)
            // for s >= min^q, hence E[(Y - k)_+] = integral of the tail.
            ScalarLaw::Pareto { alpha, min } => {
                let beta = alpha / q;
                let y0 = min.powf(q);
                if beta <= 1.0 {
                    return None;
                }
                if k >= y0 {
                    Some(y0.powf(beta) * k.powf(1.0 - beta) / (beta - 1.0))
                } else {
                    // full mass above y0 plus the slab between k and y0
                    Some((y0 - k) + y0 / (beta - 1.0))
                }
            }
            ScalarLaw::InversePareto { alpha, max } => {
                // Y = X^q is bounded by y0 = max^q with P(Y <= s) = (s/y0)^beta.
                let y0 = max.powf(q);
                if k >= y0 {
                    return Some(0.0);
                }
                let beta = alpha / q;
                // E[(Y-k)_+] = int_k^{y0} 1 - (s/y0)^beta ds
                Some((y0 - k) - (y0 - k.powf(beta + 1.0) / y0.powf(beta)) / (beta + 1.0))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Coefficient fields
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Deterministic medium: laws are evaluated once per seed, same value everywhere.
    Constant,
    /// Values depend only on the x1 lattice cell.
    #[serde(rename = "laminate1d")]
    Laminate1D,
    /// Independent draw per lattice cell.
    IidCheckerboard,
    /// Same dependence as the checkerboard; tagged for heavy-tailed laws.
    HeavyTailCheckerboard,
    /// Deterministic periodic laminate with an explicit value pattern along x1.
    Custom,
}

/// How the diagonal entries of A are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalLaws {
    /// A = lambda I with a single scalar draw per cell.
    Isotropic(ScalarLaw),
    /// One independent draw per diagonal entry (d laws).
    PerAxis(Vec<ScalarLaw>),
}

/// One evaluation of the medium: diagonal weight entries and the additive
/// weight Lambda.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub a: [f64; MAX_DIM],
    pub lambda: f64,
}

impl FieldSample {
    /// Operator norm of the diagonal matrix A.
    pub fn a_norm_op(&self, d: usize) -> f64 {
        self.a[..d].iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Operator norm of A^{-1} = max of reciprocal entries.
    pub fn a_inv_norm_op(&self, d: usize) -> f64 {
        self.a[..d].iter().fold(0.0f64, |m, x| m.max(1.0 / x.abs()))
    }
}

/// A stationary ergodic random medium on R^d, evaluated pointwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub kind: FieldKind,
    pub d: usize,
    pub diag: DiagonalLaws,
    pub lambda_law: ScalarLaw,
    /// Growth exponent carried along with the medium description.
    pub p: f64,
    /// Only for `FieldKind::Custom`: periodic value pattern along x1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<f64>>,
    /// Distinguishes independent fields sharing one seed.
    #[serde(default)]
    pub field_id: u64,
}

const STREAM_LAMBDA: u64 = 101;
const STREAM_SHIFT: u64 = 202;

impl CoefficientField {
    pub fn constant(d: usize, a: f64, lambda: f64, p: f64) -> Self {
        CoefficientField {
            kind: FieldKind::Constant,
            d,
            diag: DiagonalLaws::Isotropic(ScalarLaw::Constant { value: a }),
            lambda_law: ScalarLaw::Constant { value: lambda },
            p,
            pattern: None,
            field_id: 0,
        }
    }

    pub fn laminate(d: usize, law: ScalarLaw, lambda_law: ScalarLaw, p: f64) -> Self {
        CoefficientField {
            kind: FieldKind::Laminate1D,
            d,
            diag: DiagonalLaws::Isotropic(law),
            lambda_law,
            p,
            pattern: None,
            field_id: 0,
        }
    }

    pub fn checkerboard(d: usize, law: ScalarLaw, lambda_law: ScalarLaw, p: f64) -> Self {
        CoefficientField {
            kind: FieldKind::IidCheckerboard,
            d,
            diag: DiagonalLaws::Isotropic(law),
            lambda_law,
            p,
            pattern: None,
            field_id: 0,
        }
    }

    pub fn heavy_tail_laminate(d: usize, law: ScalarLaw, p: f64) -> Self {
        CoefficientField {
            kind: FieldKind::Laminate1D,
            d,
            diag: DiagonalLaws::Isotropic(law),
            lambda_law: ScalarLaw::Constant { value: 0.0 },
            p,
            pattern: None,
            field_id: 0,
        }
    }

    /// Deterministic periodic laminate: A = pattern[k mod len] * I on slab k,
    /// Lambda = 0, no random shift.
    pub fn custom_laminate(d: usize, pattern: Vec<f64>, p: f64) -> Self {
        CoefficientField {
            kind: FieldKind::Custom,
            d,
            diag: DiagonalLaws::Isotropic(ScalarLaw::Constant { value: 1.0 }),
            lambda_law: ScalarLaw::Constant { value: 0.0 },
            p,
            pattern: Some(pattern),
            field_id: 0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.d < 1 || self.d > MAX_DIM {
            return Err(FieldError::BadField(format!("dimension {} unsupported", self.d)));
        }
        if !(self.p > 1.0) {
            return Err(FieldError::BadField("growth exponent p must exceed 1".into()));
        }
        match &self.diag {
            DiagonalLaws::Isotropic(law) => law.validate()?,
            DiagonalLaws::PerAxis(laws) => {
                if laws.len() != self.d {
                    return Err(FieldError::BadField("need one diagonal law per axis".into()));
                }
                for law in laws {
                    law.validate()?;
                }
            }
        }
        self.lambda_law.validate()?;
        if self.kind == FieldKind::Custom {
            match &self.pattern {
                Some(p) if !p.is_empty() && p.iter().all(|v| *v > 0.0 && v.is_finite()) => {}
                _ => {
                    return Err(FieldError::BadField(
                        "custom field needs a nonempty positive pattern".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Uniform shift in [0,1)^d derived from the seed. Zero for the
    /// deterministic kinds.
    pub fn shift(&self, seed: Seed) -> [f64; MAX_DIM] {
        let mut s = [0.0; MAX_DIM];
        if matches!(self.kind, FieldKind::Constant | FieldKind::Custom) {
            return s;
        }
        for (j, sj) in s.iter_mut().enumerate().take(self.d) {
            *sj = to_unit(hash_cell(seed.0, self.field_id, STREAM_SHIFT + j as u64, [0; MAX_DIM]));
        }
        s
    }

    #[inline]
    fn cell_of(&self, seed: Seed, x: &[f64]) -> [i64; MAX_DIM] {
        let shift = self.shift(seed);
        let mut cell = [0i64; MAX_DIM];
        match self.kind {
            FieldKind::Constant => {}
            FieldKind::Laminate1D | FieldKind::Custom => {
                cell[0] = (x[0] - shift[0]).floor() as i64;
            }
            FieldKind::IidCheckerboard | FieldKind::HeavyTailCheckerboard => {
                for j in 0..self.d {
                    cell[j] = (x[j] - shift[j]).floor() as i64;
                }
            }
        }
        cell
    }

    /// Value of the medium at a lattice cell.
    #[inline]
    pub fn at_cell(&self, seed: Seed, cell: [i64; MAX_DIM]) -> FieldSample {
        if let Some(pattern) = &self.pattern {
            let len = pattern.len() as i64;
            let idx = cell[0].rem_euclid(len) as usize;
            let mut a = [0.0; MAX_DIM];
            a[..self.d].iter_mut().for_each(|v| *v = pattern[idx]);
            return FieldSample { a, lambda: 0.0 };
        }
        let mut a = [0.0; MAX_DIM];
        match &self.diag {
            DiagonalLaws::Isotropic(law) => {
                let u = to_unit(hash_cell(seed.0, self.field_id, 0, cell));
                let v = law.sample(u);
                a[..self.d].iter_mut().for_each(|x| *x = v);
            }
            DiagonalLaws::PerAxis(laws) => {
                for (j, law) in laws.iter().enumerate() {
                    let u = to_unit(hash_cell(seed.0, self.field_id, 1 + j as u64, cell));
                    a[j] = law.sample(u);
                }
            }
        }
        let lu = to_unit(hash_cell(seed.0, self.field_id, STREAM_LAMBDA, cell));
        FieldSample { a, lambda: self.lambda_law.sample(lu) }
    }

    /// Evaluate (A, Lambda) at a point x in R^d. Deterministic in
    /// (field, seed, x) and piecewise constant on shifted unit lattice cells.
    #[inline]
    pub fn at(&self, seed: Seed, x: &[f64]) -> FieldSample {
        debug_assert!(x.len() >= self.d && x[..self.d].iter().all(|v| v.is_finite()));
        self.at_cell(seed, self.cell_of(seed, x))
    }

    /// Exact moment of |A| under the law (operator norm = max diagonal entry),
    /// available when the diagonal is isotropic or constant.
    pub fn exact_a_moment(&self, q: f64) -> Option<f64> {
        if let Some(pattern) = &self.pattern {
            let n = pattern.len() as f64;
            return Some(pattern.iter().map(|v| v.powf(q)).sum::<f64>() / n);
        }
        match &self.diag {
            DiagonalLaws::Isotropic(law) => law.moment(q),
            DiagonalLaws::PerAxis(_) => None,
        }
    }
}

/// Module-level alias for the pointwise evaluation, mirroring the operation
/// name used in configs and docs.
pub fn field_at(field: &CoefficientField, seed: Seed, x: &[f64]) -> FieldSample {
    field.at(seed, x)
}

// ---------------------------------------------------------------------------
// Monte Carlo moment estimation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct DivergenceFlags {
    pub a_pow: bool,
    pub a_inv_pow: bool,
    pub lambda: bool,
}

impl DivergenceFlags {
    pub fn any(&self) -> bool {
        self.a_pow || self.a_inv_pow || self.lambda
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Moments {
    /// Sample mean of |A|^p (operator norm).
    pub a_pow: f64,
    /// Sample mean of |A^{-1}|^{p/(p-1)}.
    pub a_inv_pow: f64,
    /// Sample mean of Lambda.
    pub lambda: f64,
    pub n_cells: usize,
    pub flags: DivergenceFlags,
}

/// Share of the total sum that the single largest sample may contribute
/// before the running mean is declared unstable. Under a finite moment the
/// share vanishes as the sample grows; under an infinite moment it converges
/// to a nondegenerate positive limit.
const MAX_SHARE_THRESHOLD: f64 = 0.2;

/// Growth of the running mean across the 8x sample enlargement that marks an
/// unbounded trend.
const GROWTH_FACTOR: f64 = 2.0;

fn divergence_flag(sum_eighth: f64, n_eighth: usize, sum: f64, n: usize, max: f64) -> bool {
    if sum <= 0.0 {
        return false;
    }
    let share = max / sum;
    let growth = if n_eighth > 0 && sum_eighth > 0.0 {
        (sum / n as f64) / (sum_eighth / n_eighth as f64)
    } else {
        1.0
    };
    share >= MAX_SHARE_THRESHOLD || growth >= GROWTH_FACTOR
}

/// Monte Carlo estimate of the three moments over `n_cells` distinct lattice
/// cells. The divergence flags combine a running-mean stability test across
/// an 8x sample enlargement with the max-share statistic; both stay quiet
/// under finite moments and at least one fires under tail indices at or
/// below one.
pub fn estimate_moments(
    field: &CoefficientField,
    seed: Seed,
    p: f64,
    n_cells: usize,
) -> Result<Moments, FieldError> {
    if p <= 1.0 {
        return Err(FieldError::BadExponent(p));
    }
    if n_cells == 0 {
        return Err(FieldError::NoCells(n_cells));
    }
    field.validate()?;
    let q = p / (p - 1.0);
    let mut sums = [0.0f64; 3];
    let mut maxes = [0.0f64; 3];
    let mut at_eighth = [0.0f64; 3];
    for i in 0..n_cells {
        let cell = [i as i64, 0, 0];
        let s = field.at_cell(seed, cell);
        let vals = [
            s.a_norm_op(field.d).powf(p),
            s.a_inv_norm_op(field.d).powf(q),
            s.lambda,
        ];
        for j in 0..3 {
            sums[j] += vals[j];
            maxes[j] = maxes[j].max(vals[j]);
        }
        if i + 1 == n_cells / 8 {
            at_eighth = sums;
        }
    }
    let n = n_cells as f64;
    let means = [sums[0] / n, sums[1] / n, sums[2] / n];
    let flags = if n_cells >= 16 {
        let n8 = n_cells / 8;
        let f = |j: usize| divergence_flag(at_eighth[j], n8, sums[j], n_cells, maxes[j]);
        DivergenceFlags { a_pow: f(0), a_inv_pow: f(1), lambda: f(2) }
    } else {
        DivergenceFlags::default()
    };
    Ok(Moments {
        a_pow: means[0],
        a_inv_pow: means[1],
        lambda: means[2],
        n_cells,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_field(d: usize) -> CoefficientField {
        CoefficientField::checkerboard(
            d,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.0 },
            2.0,
        )
    }

    #[test]
    fn constant_field_ignores_seed_and_point() {
        let f = CoefficientField::constant(2, 2.0, 0.0, 2.0);
        for seed in [0u64, 1, 99] {
            for x in [[0.3, 0.7], [-5.2, 11.0], [100.0, -100.0]] {
                let s = f.at(Seed(seed), &x);
                assert_eq!(s.a[0], 2.0);
                assert_eq!(s.a[1], 2.0);
                assert_eq!(s.lambda, 0.0);
            }
        }
    }

    #[test]
    fn evaluations_are_bit_identical() {
        let f = two_point_field(2);
        let seed = Seed(42);
        for x in [[0.1, 0.2], [3.7, -1.4], [1e6, -1e6]] {
            let a = f.at(seed, &x);
            let b = f.at(seed, &x);
            assert_eq!(a.a[0].to_bits(), b.a[0].to_bits());
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
        }
    }

    #[test]
    fn laminate_depends_only_on_x1_cell() {
        let f = CoefficientField::laminate(
            2,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.0 },
            2.0,
        );
        let seed = Seed(7);
        let shift = f.shift(seed);
        // Pick x1 well inside one slab, vary x2 wildly.
        let x1 = shift[0] + 0.5;
        let base = f.at(seed, &[x1, 0.0]);
        for x2 in [-3.0, 0.4, 17.9] {
            assert_eq!(f.at(seed, &[x1, x2]), base);
        }
    }

    #[test]
    fn checkerboard_second_moment_matches_law() {
        // E[lambda^2] = (1 + 4)/2 = 2.5 for the two-point law; CLT band with
        // 3 sigma over 10^4 cells.
        let f = two_point_field(2);
        let n = 10_000usize;
        let mut sum = 0.0;
        for i in 0..n {
            let s = f.at_cell(Seed(3), [i as i64, 0, 0]);
            sum += s.a[0] * s.a[0];
        }
        let mean = sum / n as f64;
        let sigma = 1.5 / (n as f64).sqrt();
        assert!((mean - 2.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn moment_estimates_match_closed_form() {
        let f = two_point_field(2);
        let m = estimate_moments(&f, Seed(11), 2.0, 100_000).unwrap();
        assert!((m.a_pow - 2.5).abs() / 2.5 < 0.02, "a_pow {}", m.a_pow);
        assert!((m.a_inv_pow - 0.625).abs() / 0.625 < 0.02, "a_inv {}", m.a_inv_pow);
        assert_eq!(m.lambda, 0.0);
        assert!(!m.flags.any());
    }

    #[test]
    fn constant_moments_are_exact() {
        let f = CoefficientField::constant(2, 1.0, 0.0, 2.0);
        let m = estimate_moments(&f, Seed(0), 2.0, 100).unwrap();
        assert_eq!(m.a_pow, 1.0);
        assert_eq!(m.a_inv_pow, 1.0);
        assert_eq!(m.lambda, 0.0);
        assert!(!m.flags.any());
    }

    #[test]
    fn rejects_bad_exponent() {
        let f = two_point_field(2);
        assert!(estimate_moments(&f, Seed(0), 1.0, 10).is_err());
        assert!(estimate_moments(&f, Seed(0), 0.5, 10).is_err());
    }

    #[test]
    fn pareto_divergence_flag_raised_across_sweep() {
        // alpha < p means E[lambda^p] = inf; the flag must fire at every size
        // in the sweep while the inverse moment stays quiet.
        let p = 2.0;
        let f = CoefficientField::heavy_tail_laminate(
            2,
            ScalarLaw::Pareto { alpha: p / 2.0, min: 1.0 },
            p,
        );
        for n in [1_000usize, 10_000, 100_000, 1_000_000] {
            let m = estimate_moments(&f, Seed(5), p, n).unwrap();
            assert!(m.flags.a_pow, "no divergence flag at n = {n}");
            assert!(!m.flags.a_inv_pow);
        }
    }

    #[test]
    fn inverse_pareto_flags_the_inverse_moment() {
        // E[lambda^{-p/(p-1)}] = inf but E[lambda^p] < inf: only the inverse
        // moment may be flagged.
        let p = 2.0;
        let f = CoefficientField::heavy_tail_laminate(
            2,
            ScalarLaw::InversePareto { alpha: 1.0, max: 1.0 },
            p,
        );
        let m = estimate_moments(&f, Seed(7), p, 100_000).unwrap();
        assert!(m.flags.a_inv_pow, "inverse-moment divergence missed");
        assert!(!m.flags.a_pow);
    }

    #[test]
    fn finite_moment_laws_do_not_flag() {
        // alpha > p: moment finite, no flag expected at these sizes.
        let p = 2.0;
        let f = CoefficientField::heavy_tail_laminate(
            2,
            ScalarLaw::Pareto { alpha: 4.5, min: 1.0 },
            p,
        );
        let m = estimate_moments(&f, Seed(5), p, 100_000).unwrap();
        assert!(!m.flags.a_pow);
    }

    #[test]
    fn pareto_moment_formula_matches_quadrature() {
        // Oracle: E[X^q] = q int_0^inf s^{q-1} P(X > s) ds computed numerically
        // from the analytic CDF, against the closed form.
        let law = ScalarLaw::Pareto { alpha: 3.0, min: 1.5 };
        let q = 2.0;
        let closed = law.moment(q).unwrap();
        let tail = |s: f64| if s <= 1.5 { 1.0 } else { (1.5f64 / s).powf(3.0) };
        let mut acc = 0.0;
        let h = 1e-4;
        let mut s: f64 = h / 2.0;
        while s < 2_000.0 {
            acc += q * s.powf(q - 1.0) * tail(s) * h;
            s += h;
        }
        assert!((acc - closed).abs() / closed < 1e-3, "quadrature {acc} vs closed {closed}");
    }

    #[test]
    fn inverse_pareto_moments() {
        let law = ScalarLaw::InversePareto { alpha: 1.0, max: 1.0 };
        // E[X^q] = alpha/(alpha+q): finite for q > -1, divergent at q = -2.
        assert!((law.moment(2.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(law.moment(-2.0).is_none());
        assert!(law.moment(-0.5).is_some());
    }

    #[test]
    fn positivity_over_many_cells() {
        let laws: Vec<CoefficientField> = vec![
            two_point_field(2),
            CoefficientField::heavy_tail_laminate(2, ScalarLaw::Pareto { alpha: 1.0, min: 0.5 }, 2.0),
            CoefficientField::heavy_tail_laminate(
                2,
                ScalarLaw::InversePareto { alpha: 1.0, max: 1.0 },
                2.0,
            ),
        ];
        for f in &laws {
            let mut min = f64::INFINITY;
            for i in 0..1_000_000i64 {
                let s = f.at_cell(Seed(9), [i, 0, 0]);
                for j in 0..f.d {
                    min = min.min(s.a[j]);
                }
            }
            assert!(min > 0.0, "nonpositive diagonal entry found: {min}");
        }
    }

    #[test]
    fn custom_pattern_tiles_periodically() {
        let f = CoefficientField::custom_laminate(2, vec![1.0, 2.0], 2.0);
        let s0 = f.at(Seed(1), &[0.5, 0.3]);
        let s1 = f.at(Seed(1), &[1.5, 0.3]);
        let s2 = f.at(Seed(99), &[2.5, -4.0]);
        assert_eq!(s0.a[0], 1.0);
        assert_eq!(s1.a[0], 2.0);
        assert_eq!(s2.a[0], 1.0); // seed-independent, period 2
        let sm = f.at(Seed(1), &[-0.5, 0.0]);
        assert_eq!(sm.a[0], 2.0); // cell -1 wraps to pattern index 1
    }

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks_stat(a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < n && j < m {
            let x = a[i].min(b[j]);
            while i < n && a[i] <= x {
                i += 1;
            }
            while j < m && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn stationarity_two_sample_ks() {
        // Multisets of cell values on [0,N)^2 and z+[0,N)^2 across 100 seeds
        // must pass a two-sample KS test at level 0.01.
        let f = two_point_field(2);
        let n = 6i64;
        let z = [13i64, -4];
        let mut here = Vec::new();
        let mut there = Vec::new();
        for seed in 0..100u64 {
            for i in 0..n {
                for j in 0..n {
                    here.push(f.at(Seed(seed), &[i as f64 + 0.5, j as f64 + 0.5]).a[0]);
                    there.push(
                        f.at(Seed(seed), &[(i + z[0]) as f64 + 0.5, (j + z[1]) as f64 + 0.5]).a[0],
                    );
                }
            }
        }
        let nn = here.len() as f64;
        let d = ks_stat(&mut here, &mut there);
        // c(0.01) = 1.628 for the two-sample test; conservative under ties.
        let crit = 1.628 * (2.0 / nn).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds critical value {crit}");
    }

    #[test]
    fn shift_is_uniform_in_unit_cube() {
        let f = two_point_field(2);
        for seed in 0..50u64 {
            let s = f.shift(Seed(seed));
            assert!((0.0..1.0).contains(&s[0]) && (0.0..1.0).contains(&s[1]));
        }
        // different seeds should give different shifts
        assert_ne!(f.shift(Seed(1)), f.shift(Seed(2)));
    }
}
