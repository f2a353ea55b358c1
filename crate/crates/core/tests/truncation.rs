//! The nodewise truncation must not increase the weighted Frobenius
//! seminorm of discrete gradients, elementwise, for diagonal weights.

use homlab::fields::{CoefficientField, ScalarLaw, Seed};
use homlab::integrand::truncate;
use homlab::mesh::{sample_coefficients, DiscreteField, Mesh};

struct Lcg(u64);
impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        2.0 * ((self.0 >> 11) as f64 / (1u64 << 53) as f64) - 1.0
    }
}

#[test]
fn weighted_gradient_seminorm_never_increases() {
    let mesh = Mesh::unit_square(12);
    let field = CoefficientField::checkerboard(
        2,
        ScalarLaw::two_point(0.3, 4.0),
        ScalarLaw::Constant { value: 0.0 },
        2.0,
    );
    let mut rng = Lcg(2024);
    for case in 0..50 {
        let m = 1 + (case % 3); // scalar and vector-valued fields
        let mut u = DiscreteField::zeros(mesh.clone(), m);
        for v in u.dofs_mut() {
            *v = 3.0 * rng.next();
        }
        let r = 0.4 + 0.2 * (case as f64 % 5.0);
        let truncated = truncate(&u, r).unwrap();
        let coeffs = sample_coefficients(&mesh, &field, Seed(case as u64), 0.25);
        for e in 0..mesh.element_count() {
            let diag = &coeffs[e].a;
            let before = u.gradient_on_element(e).scale_cols(diag).frob();
            let after = truncated.gradient_on_element(e).scale_cols(diag).frob();
            assert!(
                after <= before * (1.0 + 1e-10) + 1e-12,
                "case {case} element {e}: {after} > {before}"
            );
        }
    }
}
