//! Empirical probes of the ergodic ingredients: spatial averages of the
//! oscillating weight functionals over boxes, and the weak-L1 test on finite
//! unions of boxes, which separates genuine weak convergence from mere
//! averages over nice sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{CoefficientField, FieldSample, Seed};
use crate::stats;
use crate::MAX_DIM;

/// The three weight functionals entering the moment conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    /// |A|^p (operator norm of the diagonal matrix).
    APower,
    /// |A^{-1}|^{p/(p-1)}.
    AInvPower,
    Lambda,
}

impl Observable {
    pub fn eval(&self, s: &FieldSample, d: usize, p: f64) -> f64 {
        match self {
            Observable::APower => s.a_norm_op(d).powf(p),
            Observable::AInvPower => s.a_inv_norm_op(d).powf(p / (p - 1.0)),
            Observable::Lambda => s.lambda,
        }
    }

    /// Closed-form mean under the field's laws, when available (isotropic or
    /// deterministic diagonals).
    pub fn exact_mean(&self, field: &CoefficientField) -> Option<f64> {
        let p = field.p;
        match self {
            Observable::APower => field.exact_a_moment(p),
            Observable::AInvPower => field.exact_a_moment(-p / (p - 1.0)),
            Observable::Lambda => field.lambda_law.moment(1.0),
        }
    }
}

/// An axis-aligned box [lo, hi].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: [f64; MAX_DIM],
    pub hi: [f64; MAX_DIM],
}

impl BoxRegion {
    pub fn new(lo: [f64; MAX_DIM], hi: [f64; MAX_DIM]) -> Self {
        BoxRegion { lo, hi }
    }

    pub fn measure(&self, d: usize) -> f64 {
        (0..d).map(|j| (self.hi[j] - self.lo[j]).max(0.0)).product()
    }

    fn intersects(&self, other: &BoxRegion, d: usize) -> bool {
        (0..d).all(|j| self.lo[j] < other.hi[j] && other.lo[j] < self.hi[j])
    }
}

/// Quadrature resolution: sample points per oscillation period per axis.
pub const POINTS_PER_PERIOD: f64 = 4.0;

/// Midpoint quadrature of x -> g(field(x/eps)) over a box.
fn box_integral(
    g: &(impl Fn(&FieldSample) -> f64 + ?Sized),
    field: &CoefficientField,
    seed: Seed,
    region: &BoxRegion,
    eps: f64,
) -> f64 {
    let d = field.d;
    let mut counts = [1usize; MAX_DIM];
    let mut steps = [0.0f64; MAX_DIM];
    for j in 0..d {
        let len = region.hi[j] - region.lo[j];
        // at least POINTS_PER_PERIOD points per period of length eps
        counts[j] = ((len / eps * POINTS_PER_PERIOD).ceil() as usize).max(2);
        steps[j] = len / counts[j] as f64;
    }
    let total: usize = counts[..d].iter().product();
    let cell: f64 = steps[..d].iter().product();
    let mut acc = 0.0;
    let mut x = [0.0f64; MAX_DIM];
    for lin in 0..total {
        let mut r = lin;
        for j in 0..d {
            let i = r % counts[j];
            r /= counts[j];
            x[j] = (region.lo[j] + (i as f64 + 0.5) * steps[j]) / eps;
        }
        acc += g(&field.at(seed, &x[..d]));
    }
    acc * cell
}

/// Ergodic spatial average of the observable over a region at scale eps.
pub fn ergodic_average(
    obs: Observable,
    field: &CoefficientField,
    seed: Seed,
    region: &BoxRegion,
    eps: f64,
) -> f64 {
    let p = field.p;
    let d = field.d;
    let g = move |s: &FieldSample| obs.eval(s, d, p);
    box_integral(&g, field, seed, region, eps) / region.measure(d)
}

/// A Borel test set: a finite disjoint union of boxes inside the domain,
/// optionally complemented within the domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BorelProbe {
    pub domain: BoxRegion,
    pub boxes: Vec<BoxRegion>,
    #[serde(default)]
    pub complement: bool,
}

impl BorelProbe {
    pub fn full_domain(domain: BoxRegion) -> Self {
        BorelProbe { domain, boxes: vec![domain], complement: false }
    }

    /// Seeded rejection sampling of pairwise disjoint boxes inside the
    /// domain covering roughly `target_fraction` of it. Box corners are
    /// generic reals, so lattice alignment artifacts are avoided.
    pub fn random_disjoint(
        domain: BoxRegion,
        d: usize,
        n_boxes: usize,
        target_fraction: f64,
        seed: u64,
    ) -> Self {
        let mut state = seed ^ 0x0b0c_0d0e_0f10_1112;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let total = domain.measure(d);
        // aim for equal-volume boxes
        let side_scale = (target_fraction * total / n_boxes as f64).powf(1.0 / d as f64);
        let mut boxes: Vec<BoxRegion> = Vec::new();
        let mut attempts = 0usize;
        while boxes.len() < n_boxes && attempts < 100_000 {
            attempts += 1;
            let mut lo = [0.0; MAX_DIM];
            let mut hi = [0.0; MAX_DIM];
            let mut ok = true;
            for j in 0..d {
                let len = side_scale * (0.6 + 0.8 * next());
                let span = domain.hi[j] - domain.lo[j] - len;
                if span <= 0.0 {
                    ok = false;
                    break;
                }
                lo[j] = domain.lo[j] + next() * span;
                hi[j] = lo[j] + len;
            }
            if !ok {
                continue;
            }
            let candidate = BoxRegion { lo, hi };
            if boxes.iter().all(|b| !b.intersects(&candidate, d)) {
                boxes.push(candidate);
            }
        }
        BorelProbe { domain, boxes, complement: false }
    }

    pub fn validate(&self, d: usize) -> Result<(), String> {
        for b in &self.boxes {
            for j in 0..d {
                if !(b.lo[j] >= self.domain.lo[j] - 1e-12 && b.hi[j] <= self.domain.hi[j] + 1e-12)
                {
                    return Err("probe box leaves the domain".into());
                }
                if !(b.hi[j] > b.lo[j]) {
                    return Err("probe box has nonpositive extent".into());
                }
            }
        }
        for (i, a) in self.boxes.iter().enumerate() {
            for b in self.boxes.iter().skip(i + 1) {
                if a.intersects(b, d) {
                    return Err("probe boxes must be pairwise disjoint".into());
                }
            }
        }
        if self.measure(d) <= 0.0 {
            return Err("probe must have positive measure".into());
        }
        Ok(())
    }

    /// Measure of the test set E.
    pub fn measure(&self, d: usize) -> f64 {
        let union: f64 = self.boxes.iter().map(|b| b.measure(d)).sum();
        if self.complement {
            self.domain.measure(d) - union
        } else {
            union
        }
    }

    fn integral(
        &self,
        g: &(impl Fn(&FieldSample) -> f64 + ?Sized),
        field: &CoefficientField,
        seed: Seed,
        eps: f64,
    ) -> f64 {
        let union: f64 = self
            .boxes
            .iter()
            .map(|b| box_integral(g, field, seed, b, eps))
            .sum();
        if self.complement {
            box_integral(g, field, seed, &self.domain, eps) - union
        } else {
            union
        }
    }
}

/// Per-seed absolute deviations |int_E g(x/eps) - |E| gbar| for each eps,
/// for a generic observable. Rows follow eps_list, columns follow seeds.
pub fn weak_l1_deviation_rows_fn(
    g: &(impl Fn(&FieldSample) -> f64 + Sync + ?Sized),
    field: &CoefficientField,
    seeds: &[u64],
    probe: &BorelProbe,
    eps_list: &[f64],
    exact_mean: f64,
) -> Vec<Vec<f64>> {
    let measure = probe.measure(field.d);
    eps_list
        .iter()
        .map(|&eps| {
            seeds
                .par_iter()
                .map(|&s| {
                    (probe.integral(g, field, Seed(s), eps) - measure * exact_mean).abs()
                })
                .collect()
        })
        .collect()
}

/// Per-eps mean absolute deviation over the seed ensemble.
pub fn weak_l1_deviations_fn(
    g: &(impl Fn(&FieldSample) -> f64 + Sync + ?Sized),
    field: &CoefficientField,
    seeds: &[u64],
    probe: &BorelProbe,
    eps_list: &[f64],
    exact_mean: f64,
) -> Vec<f64> {
    weak_l1_deviation_rows_fn(g, field, seeds, probe, eps_list, exact_mean)
        .iter()
        .map(|row| stats::mean(row))
        .collect()
}

/// Reference mean of an observable: the closed-form law moment when
/// available, otherwise a wide Monte Carlo cell average.
pub fn reference_mean(obs: Observable, field: &CoefficientField, seed: u64) -> f64 {
    obs.exact_mean(field).unwrap_or_else(|| {
        let m = crate::fields::estimate_moments(field, Seed(seed), field.p, 200_000)
            .expect("moment estimate");
        match obs {
            Observable::APower => m.a_pow,
            Observable::AInvPower => m.a_inv_pow,
            Observable::Lambda => m.lambda,
        }
    })
}

/// Per-seed deviation rows for a named observable.
pub fn weak_l1_deviation_rows(
    obs: Observable,
    field: &CoefficientField,
    seeds: &[u64],
    probe: &BorelProbe,
    eps_list: &[f64],
) -> Vec<Vec<f64>> {
    let p = field.p;
    let d = field.d;
    let gbar = reference_mean(obs, field, seeds.first().copied().unwrap_or(0));
    let g = move |s: &FieldSample| obs.eval(s, d, p);
    weak_l1_deviation_rows_fn(&g, field, seeds, probe, eps_list, gbar)
}

/// Weak-L1 probe for one of the named observables: per-eps mean absolute
/// deviations over the seed ensemble.
pub fn weak_l1_probe(
    obs: Observable,
    field: &CoefficientField,
    seeds: &[u64],
    probe: &BorelProbe,
    eps_list: &[f64],
) -> Vec<f64> {
    weak_l1_deviation_rows(obs, field, seeds, probe, eps_list)
        .iter()
        .map(|row| stats::mean(row))
        .collect()
}

/// Trend verdict: the final deviation must at least halve the initial one and
/// fall below an absolute tolerance scaled by the test-set measure.
pub fn trend_check(devs: &[f64], measure: f64, halving: f64, abs_tol: f64) -> bool {
    match (devs.first(), devs.last()) {
        (Some(first), Some(last)) => {
            *last <= halving * *first + 1e-15 && *last <= abs_tol * measure
        }
        _ => false,
    }
}
