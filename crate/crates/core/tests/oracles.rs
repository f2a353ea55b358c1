//! Independent oracles for the frozen expected values used across the suite.
//!
//! Each oracle computes its number by a route that shares nothing with the
//! implementation it later checks: direct enumeration of finite laws, brute
//! grid search for the two-slab minimizer, column-weight reductions for
//! laminate cell problems, and quadrature of analytic distribution tails.

use homlab::cell::{cell_periodic, CellResult};
use homlab::fields::{CoefficientField, ScalarLaw, Seed};
use homlab::integrand::Integrand;
use homlab::mat::MatMd;
use homlab::mesh::{sample_coefficients, Mesh};
use homlab::solver::SolveOptions;

/// Enumerate moments of a finite law directly from its atoms.
fn discrete_moment(atoms: &[(f64, f64)], q: f64) -> f64 {
    atoms.iter().map(|(v, p)| p * v.powf(q)).sum()
}

#[test]
fn two_point_law_moments_frozen() {
    // the two-point law lambda in {1, 2} with equal weights drives the
    // laminate and checkerboard oracles; freeze its moments.
    let atoms = [(1.0, 0.5), (2.0, 0.5)];
    assert_eq!(discrete_moment(&atoms, 2.0), 2.5); // E[lambda^2]
    assert_eq!(discrete_moment(&atoms, -2.0), 0.625); // E[lambda^-2]
    assert_eq!(1.0 / discrete_moment(&atoms, -2.0), 1.6); // harmonic mean of lambda^2
}

#[test]
fn two_slab_minimizer_by_grid_search() {
    // periodic two-slab problem with weights (1, 4): minimize
    // (1/2)[(1 + s)^2 + 4 (1 - s)^2] over the slope split s by brute force;
    // the value must agree with the harmonic mean 1.6.
    let mut best = f64::INFINITY;
    let mut s = -1.0;
    while s <= 1.0 {
        let value = 0.5 * ((1.0 + s) * (1.0 + s) + 4.0 * (1.0 - s) * (1.0 - s));
        best = best.min(value);
        s += 1e-5;
    }
    assert!((best - 1.6).abs() < 1e-6, "grid search {best}");
}

#[test]
fn periodic_laminate_matches_column_weight_reduction() {
    // For a laminate the periodic minimizer with xi = e1 depends on x1 only;
    // the discrete value then reduces to the harmonic mean of column-averaged
    // weights, computable directly from the sampled coefficients.
    let field = CoefficientField::laminate(
        2,
        ScalarLaw::two_point(1.0, 2.0),
        ScalarLaw::Constant { value: 0.0 },
        2.0,
    );
    let f = Integrand::power_law(2.0, 1, 2);
    let (t, n) = (4.0, 24usize);
    let mesh = Mesh::cube(2, t, n).unwrap();
    let opts = SolveOptions { grad_tol: 1e-11, ..Default::default() };
    for seed in [3u64, 17, 99] {
        let coeffs = sample_coefficients(&mesh, &field, Seed(seed), 1.0);
        // column weights: mean of lambda^2 over the elements of each x1 strip
        let mut col = vec![0.0; n];
        let mut cnt = vec![0usize; n];
        for e in 0..mesh.element_count() {
            let bx = mesh.barycenter(e)[0];
            let ix = ((bx / t * n as f64).floor() as usize).min(n - 1);
            col[ix] += coeffs[e].a[0] * coeffs[e].a[0];
            cnt[ix] += 1;
        }
        for (c, k) in col.iter_mut().zip(&cnt) {
            *c /= *k as f64;
        }
        let harmonic = n as f64 / col.iter().map(|w| 1.0 / w).sum::<f64>();
        let r: CellResult =
            cell_periodic(&MatMd::row(&[1.0, 0.0]), &field, Seed(seed), t, n, &f, &opts)
                .unwrap();
        assert!(
            (r.value - harmonic).abs() < 1e-8 * (1.0 + harmonic),
            "seed {seed}: periodic {} vs column oracle {harmonic}",
            r.value
        );
    }
}

#[test]
fn aligned_custom_laminate_periodic_values() {
    // integer slabs on an aligned grid: e1 gives the harmonic mean exactly,
    // e2 the arithmetic mean exactly.
    let field = CoefficientField::custom_laminate(2, vec![1.0, 2.0], 2.0);
    let f = Integrand::power_law(2.0, 1, 2);
    let opts = SolveOptions { grad_tol: 1e-11, ..Default::default() };
    let along = cell_periodic(&MatMd::row(&[1.0, 0.0]), &field, Seed(0), 2.0, 8, &f, &opts)
        .unwrap();
    let across = cell_periodic(&MatMd::row(&[0.0, 1.0]), &field, Seed(0), 2.0, 8, &f, &opts)
        .unwrap();
    assert!((along.value - 1.6).abs() < 1e-9, "harmonic {}", along.value);
    assert!((across.value - 2.5).abs() < 1e-9, "arithmetic {}", across.value);
}

#[test]
fn pareto_excess_moment_against_quadrature() {
    // E[(X^q - k)_+] for X Pareto(alpha, min): integrate the analytic tail
    // P(X^q > s) numerically and compare with the closed form.
    let law = ScalarLaw::Pareto { alpha: 5.0, min: 1.0 };
    let (q, k) = (2.0, 4.0);
    let closed = law.excess_moment(q, k).unwrap();
    let tail = |s: f64| {
        if s <= 1.0 {
            1.0
        } else {
            s.powf(-5.0 / q)
        }
    };
    let mut acc = 0.0;
    let h = 1e-4;
    let mut s = k + h / 2.0;
    while s < 10_000.0 {
        acc += tail(s) * h;
        s += h;
    }
    assert!(
        (acc - closed).abs() / closed < 1e-3,
        "quadrature {acc} vs closed {closed}"
    );
}

#[test]
fn inverse_pareto_excess_moment_against_quadrature() {
    let law = ScalarLaw::InversePareto { alpha: 2.0, max: 3.0 };
    let (q, k) = (2.0, 1.5);
    let closed = law.excess_moment(q, k).unwrap();
    // P(X^q > s) = 1 - (s / max^q)^(alpha/q) for s <= max^q
    let y0 = 9.0;
    let beta = 1.0;
    let tail = |s: f64| {
        if s >= y0 {
            0.0
        } else {
            1.0 - (s / y0).powf(beta)
        }
    };
    let mut acc = 0.0;
    let h = 1e-5;
    let mut s = k + h / 2.0;
    while s < y0 {
        acc += tail(s) * h;
        s += h;
    }
    assert!(
        (acc - closed).abs() / closed.max(1e-12) < 1e-3,
        "quadrature {acc} vs closed {closed}"
    );
}

#[test]
fn degenerate_law_moment_structure() {
    // the blow-up law: E[lambda^p] = inf, E[lambda^(-p/(p-1))] < inf
    let p = 2.0;
    let blow = ScalarLaw::Pareto { alpha: p / 2.0, min: 1.0 };
    assert!(blow.moment(p).is_none());
    assert!(blow.moment(-p / (p - 1.0)).is_some());
    // the collapse law: E[lambda^(-p/(p-1))] = inf, E[lambda^p] < inf
    let collapse = ScalarLaw::InversePareto { alpha: 1.0, max: 1.0 };
    assert!(collapse.moment(-p / (p - 1.0)).is_none());
    assert!(collapse.moment(p).is_some());
}
