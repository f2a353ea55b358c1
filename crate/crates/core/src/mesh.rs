//! Uniform simplicial meshes of axis-aligned boxes and P1 discrete fields.
//!
//! Each grid cube is split by the Kuhn triangulation into d! simplices, one
//! per permutation of the axes. With vertices ordered along the permutation,
//! the P1 gradient reduces to successive vertex differences, so element
//! gradients never touch a local linear solve. Coefficients enter through a
//! single sample at the element barycenter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{CoefficientField, FieldSample, Seed};
use crate::integrand::Integrand;
use crate::mat::MatMd;
use crate::MAX_DIM;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("non-finite degrees of freedom")]
    NonFiniteDofs,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

const PERMS_D2: &[&[usize]] = &[&[0, 1], &[1, 0]];
const PERMS_D3: &[&[usize]] = &[
    &[0, 1, 2],
    &[0, 2, 1],
    &[1, 0, 2],
    &[1, 2, 0],
    &[2, 0, 1],
    &[2, 1, 0],
];

/// Uniform Kuhn-triangulated mesh of an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub d: usize,
    pub origin: [f64; MAX_DIM],
    pub lengths: [f64; MAX_DIM],
    /// Subdivisions per axis.
    pub n: usize,
}

impl Mesh {
    pub fn new(
        d: usize,
        origin: [f64; MAX_DIM],
        lengths: [f64; MAX_DIM],
        n: usize,
    ) -> Result<Self, MeshError> {
        if !(2..=MAX_DIM).contains(&d) {
            return Err(MeshError::Invalid(format!("dimension {d} unsupported (need 2 or 3)")));
        }
        if n == 0 {
            return Err(MeshError::Invalid("need at least one subdivision".into()));
        }
        for j in 0..d {
            if !(lengths[j] > 0.0 && lengths[j].is_finite() && origin[j].is_finite()) {
                return Err(MeshError::Invalid("box sides must be positive and finite".into()));
            }
        }
        Ok(Mesh { d, origin, lengths, n })
    }

    /// Cube (0, t)^d with n subdivisions per axis.
    pub fn cube(d: usize, t: f64, n: usize) -> Result<Self, MeshError> {
        Self::new(d, [0.0; MAX_DIM], [t, t, t], n)
    }

    pub fn unit_square(n: usize) -> Self {
        Self::cube(2, 1.0, n).unwrap()
    }

    #[inline]
    fn perms(&self) -> &'static [&'static [usize]] {
        if self.d == 2 {
            PERMS_D2
        } else {
            PERMS_D3
        }
    }

    #[inline]
    pub fn h(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.n as f64
    }

    pub fn node_count(&self) -> usize {
        (self.n + 1).pow(self.d as u32)
    }

    pub fn element_count(&self) -> usize {
        self.perms().len() * self.n.pow(self.d as u32)
    }

    pub fn n_perms(&self) -> usize {
        self.perms().len()
    }

    pub fn perm(&self, q: usize) -> &'static [usize] {
        self.perms()[q]
    }

    pub fn volume(&self) -> f64 {
        (0..self.d).map(|j| self.lengths[j]).product()
    }

    /// All Kuhn simplices in a cube share the same volume.
    pub fn element_volume(&self) -> f64 {
        let cell: f64 = (0..self.d).map(|j| self.h(j)).product();
        let fact: usize = (1..=self.d).product();
        cell / fact as f64
    }

    #[inline]
    pub fn node_grid(&self, node: usize) -> [usize; MAX_DIM] {
        let s = self.n + 1;
        let mut g = [0usize; MAX_DIM];
        let mut r = node;
        for gj in g.iter_mut().take(self.d) {
            *gj = r % s;
            r /= s;
        }
        g
    }

    #[inline]
    pub fn node_index(&self, grid: [usize; MAX_DIM]) -> usize {
        let s = self.n + 1;
        let mut idx = 0usize;
        for j in (0..self.d).rev() {
            idx = idx * s + grid[j];
        }
        idx
    }

    #[inline]
    pub fn node_coord(&self, node: usize) -> [f64; MAX_DIM] {
        let g = self.node_grid(node);
        let mut x = [0.0; MAX_DIM];
        for j in 0..self.d {
            x[j] = self.origin[j] + g[j] as f64 * self.h(j);
        }
        x
    }

    #[inline]
    pub fn is_boundary(&self, node: usize) -> bool {
        let g = self.node_grid(node);
        (0..self.d).any(|j| g[j] == 0 || g[j] == self.n)
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        (0..self.node_count()).map(|i| self.is_boundary(i)).collect()
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

    #[inline]
    pub fn cube_index(&self, grid: [usize; MAX_DIM]) -> usize {
        let mut idx = 0usize;
        for j in (0..self.d).rev() {
            idx = idx * self.n + grid[j];
        }
        idx
    }

    /// Vertex node indices of element `e`, ordered along the permutation
    /// chain (d + 1 entries used).
    #[inline]
    pub fn element_nodes(&self, e: usize) -> [usize; MAX_DIM + 1] {
        assert!(e < self.element_count(), "element index {e} out of range");
        let q = e % self.perms().len();
        let cube = self.cube_grid(e / self.perms().len());
        let mut grid = cube;
        let mut nodes = [0usize; MAX_DIM + 1];
        nodes[0] = self.node_index(grid);
        for (step, &axis) in self.perms()[q].iter().enumerate() {
            grid[axis] += 1;
            nodes[step + 1] = self.node_index(grid);
        }
        nodes
    }

    #[inline]
    pub fn barycenter(&self, e: usize) -> [f64; MAX_DIM] {
        let q = e % self.perms().len();
        let cube = self.cube_grid(e / self.perms().len());
        let mut x = [0.0; MAX_DIM];
        for j in 0..self.d {
            x[j] = self.origin[j] + cube[j] as f64 * self.h(j);
        }
        // vertex k adds axis perm[k-1]; axis perm[j] appears in d - j of the
        // d + 1 vertices, so its barycentric offset is (d - j)/(d + 1).
        for (j, &axis) in self.perms()[q].iter().enumerate() {
            x[axis] += self.h(axis) * (self.d - j) as f64 / (self.d + 1) as f64;
        }
        x
    }

    /// Visit the elements incident to a node as (element, local vertex index).
    pub fn for_incident_elements(&self, node: usize, mut visit: impl FnMut(usize, usize)) {
        let g = self.node_grid(node);
        let n_off = 1usize << self.d;
        for bits in 0..n_off {
            // candidate cube = g - offset
            let mut cube = [0usize; MAX_DIM];
            let mut ok = true;
            for j in 0..self.d {
                let o = (bits >> j) & 1;
                if g[j] < o || g[j] - o >= self.n {
                    ok = false;
                    break;
                }
                cube[j] = g[j] - o;
            }
            if !ok {
                continue;
            }
            let k = (bits as u32).count_ones() as usize;
            let cube_idx = self.cube_index(cube);
            for (q, perm) in self.perms().iter().enumerate() {
                // node offset must equal the k-th chain vertex: its support is
                // the first k axes of the permutation.
                let mut support_ok = true;
                for &axis in perm.iter().take(k) {
                    if (bits >> axis) & 1 == 0 {
                        support_ok = false;
                        break;
                    }
                }
                if support_ok {
                    visit(cube_idx * self.perms().len() + q, k);
                }
            }
        }
    }

    /// Gradient of the hat function of local vertex `k` on any element with
    /// permutation `q` (constant across cubes).
    pub fn hat_gradient(&self, q: usize, k: usize) -> MatMd {
        let perm = &self.perms()[q];
        let mut g = MatMd::zeros(1, self.d);
        if k > 0 {
            let axis = perm[k - 1];
            g.set(0, axis, 1.0 / self.h(axis));
        }
        if k < self.d {
            let axis = perm[k];
            g.set(0, axis, g.get(0, axis) - 1.0 / self.h(axis));
        }
        g
    }

    /// Lumped quadrature weight per node: sum of vol/(d+1) over incident
    /// elements.
    pub fn lumped_node_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.node_count()];
        let vol = self.element_volume() / (self.d + 1) as f64;
        for e in 0..self.element_count() {
            let nodes = self.element_nodes(e);
            for &node in nodes.iter().take(self.d + 1) {
                w[node] += vol;
            }
        }
        w
    }
}

/// Nodal vector-valued P1 field on a mesh. Dofs are node-major:
/// `dofs[node * m + component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteField {
    mesh: Mesh,
    m: usize,
    dofs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Norm {
    L1,
    Lp(f64),
    /// L^{d/(d-1)}, the norm of the critical Sobolev embedding.
    LdOverDm1,
    W11,
}

impl DiscreteField {
    pub fn zeros(mesh: Mesh, m: usize) -> Self {
        let n = mesh.node_count() * m;
        DiscreteField { mesh, m, dofs: vec![0.0; n] }
    }

    pub fn from_dofs(mesh: Mesh, m: usize, dofs: Vec<f64>) -> Self {
        assert_eq!(dofs.len(), mesh.node_count() * m, "dof count mismatch");
        DiscreteField { mesh, m, dofs }
    }

    /// Nodal interpolation of a function x -> R^m.
    pub fn interpolate(mesh: Mesh, m: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let mut dofs = vec![0.0; mesh.node_count() * m];
        for node in 0..mesh.node_count() {
            let x = mesh.node_coord(node);
            f(&x[..mesh.d], &mut dofs[node * m..(node + 1) * m]);
        }
        DiscreteField { mesh, m, dofs }
    }

    /// Interpolation of the affine map x -> xi x (+ offset).
    pub fn affine(mesh: Mesh, xi: &MatMd, offset: &[f64]) -> Self {
        let m = xi.m;
        assert_eq!(offset.len(), m);
        DiscreteField::interpolate(mesh, m, |x, out| {
            for (k, o) in out.iter_mut().enumerate() {
                let mut v = offset[k];
                for (j, xj) in x.iter().enumerate() {
                    v += xi.get(k, j) * xj;
                }
                *o = v;
            }
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dofs(&self) -> &[f64] {
        &self.dofs
    }

    pub fn dofs_mut(&mut self) -> &mut [f64] {
        &mut self.dofs
    }

    pub fn is_finite(&self) -> bool {
        self.dofs.iter().all(|v| v.is_finite())
    }

    fn assert_compatible(&self, other: &DiscreteField) {
        assert!(
            self.mesh == other.mesh && self.m == other.m,
            "fields must share mesh and component count"
        );
    }

    pub fn sub(&self, other: &DiscreteField) -> DiscreteField {
        self.assert_compatible(other);
        let dofs = self.dofs.iter().zip(&other.dofs).map(|(a, b)| a - b).collect();
        DiscreteField { mesh: self.mesh.clone(), m: self.m, dofs }
    }

    pub fn add_scaled(&mut self, other: &DiscreteField, s: f64) {
        self.assert_compatible(other);
        for (a, b) in self.dofs.iter_mut().zip(&other.dofs) {
            *a += s * b;
        }
    }

    /// Constant gradient of the affine interpolant on simplex `e`.
    #[inline]
    pub fn gradient_on_element(&self, e: usize) -> MatMd {
        let mesh = &self.mesh;
        let q = e % mesh.n_perms();
        let nodes = mesh.element_nodes(e);
        let mut g = MatMd::zeros(self.m, mesh.d);
        for (step, &axis) in mesh.perm(q).iter().enumerate() {
            let inv_h = 1.0 / mesh.h(axis);
            let a = nodes[step] * self.m;
            let b = nodes[step + 1] * self.m;
            for k in 0..self.m {
                g.set(k, axis, (self.dofs[b + k] - self.dofs[a + k]) * inv_h);
            }
        }
        g
    }

    /// Value of the P1 interpolant at the barycenter of element `e` (the
    /// vertex average), written into `out`.
    #[inline]
    pub fn barycenter_value(&self, e: usize, out: &mut [f64]) {
        let nodes = self.mesh.element_nodes(e);
        let d = self.mesh.d;
        out[..self.m].fill(0.0);
        for &node in nodes.iter().take(d + 1) {
            for k in 0..self.m {
                out[k] += self.dofs[node * self.m + k];
            }
        }
        let inv = 1.0 / (d + 1) as f64;
        for v in out.iter_mut().take(self.m) {
            *v *= inv;
        }
    }

    /// Composite-midpoint quadrature of the named norm.
    pub fn norm(&self, which: Norm) -> f64 {
        let mesh = &self.mesh;
        let vol = mesh.element_volume();
        let mut buf = [0.0; MAX_DIM];
        let p = match which {
            Norm::L1 => 1.0,
            Norm::Lp(p) => p,
            Norm::LdOverDm1 => mesh.d as f64 / (mesh.d as f64 - 1.0),
            Norm::W11 => {
                let mut acc = 0.0;
                for e in 0..mesh.element_count() {
                    self.barycenter_value(e, &mut buf);
                    let val: f64 = buf[..self.m].iter().map(|v| v * v).sum::<f64>().sqrt();
                    acc += vol * (val + self.gradient_on_element(e).frob());
                }
                return acc;
            }
        };
        let mut acc = 0.0;
        for e in 0..mesh.element_count() {
            self.barycenter_value(e, &mut buf);
            let val: f64 = buf[..self.m].iter().map(|v| v * v).sum::<f64>().sqrt();
            acc += vol * val.powf(p);
        }
        acc.powf(1.0 / p)
    }

    /// Flat little-endian binary dump of the dofs plus a JSON sidecar with the
    /// mesh metadata. `path` gets extensions `.f64` and `.json`.
    pub fn write_with_sidecar(&self, path: &std::path::Path) -> Result<(), MeshError> {
        use std::io::Write;
        let mut bin = std::fs::File::create(path.with_extension("f64"))?;
        for v in &self.dofs {
            bin.write_all(&v.to_le_bytes())?;
        }
        let sidecar = serde_json::json!({
            "format": "f64_le",
            "layout": "node_major",
            "m": self.m,
            "d": self.mesh.d,
            "n": self.mesh.n,
            "origin": &self.mesh.origin[..self.mesh.d],
            "lengths": &self.mesh.lengths[..self.mesh.d],
            "node_count": self.mesh.node_count(),
            "dof_count": self.dofs.len(),
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
        )?;
        Ok(())
    }
}

/// Per-element coefficient samples at barycenters, for the scaled medium
/// x -> field(x / eps).
pub fn sample_coefficients(
    mesh: &Mesh,
    field: &CoefficientField,
    seed: Seed,
    eps: f64,
) -> Vec<FieldSample> {
    assert!(eps > 0.0, "eps must be positive");
    let mut out = Vec::with_capacity(mesh.element_count());
    let mut x = [0.0; MAX_DIM];
    for e in 0..mesh.element_count() {
        let b = mesh.barycenter(e);
        for j in 0..mesh.d {
            x[j] = b[j] / eps;
        }
        out.push(field.at(seed, &x[..mesh.d]));
    }
    out
}

/// Heterogeneous energy sum over elements with cached coefficients.
pub fn energy_with_coeffs(u: &DiscreteField, f: &Integrand, coeffs: &[FieldSample]) -> f64 {
    let mesh = u.mesh();
    debug_assert_eq!(coeffs.len(), mesh.element_count());
    let vol = mesh.element_volume();
    let mut acc = 0.0;
    for (e, c) in coeffs.iter().enumerate() {
        acc += vol * f.eval(c, &u.gradient_on_element(e));
    }
    acc
}

/// The heterogeneous energy at scale eps:
/// sum over elements of vol * f(A(bary/eps), Lambda(bary/eps), grad u).
pub fn energy(
    u: &DiscreteField,
    f: &Integrand,
    field: &CoefficientField,
    seed: Seed,
    eps: f64,
) -> Result<f64, MeshError> {
    if !u.is_finite() {
        return Err(MeshError::NonFiniteDofs);
    }
    let coeffs = sample_coefficients(u.mesh(), field, seed, eps);
    Ok(energy_with_coeffs(u, f, &coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ScalarLaw;

    #[test]
    fn counts_match_formulas() {
        for d in [2usize, 3] {
            let n = 4;
            let mesh = Mesh::cube(d, 1.0, n).unwrap();
            let fact: usize = (1..=d).product();
            assert_eq!(mesh.element_count(), fact * n.pow(d as u32));
            assert_eq!(mesh.node_count(), (n + 1).pow(d as u32));
        }
    }

    #[test]
    fn partition_of_unity() {
        for d in [2usize, 3] {
            let mesh = Mesh::new(d, [0.5, -1.0, 2.0], [2.0, 3.0, 1.5], 5).unwrap();
            let total = mesh.element_volume() * mesh.element_count() as f64;
            assert!((total - mesh.volume()).abs() / mesh.volume() < 1e-12);
        }
    }

    #[test]
    fn affine_reproduction() {
        for d in [2usize, 3] {
            let mesh = Mesh::new(d, [0.0; 3], [1.0, 2.0, 0.5], 3).unwrap();
            let mut xi = MatMd::zeros(2, d);
            for k in 0..2 {
                for j in 0..d {
                    xi.set(k, j, (k + 1) as f64 * 0.7 - j as f64 * 1.3);
                }
            }
            let u = DiscreteField::affine(mesh.clone(), &xi, &[0.4, -0.1]);
            for e in 0..mesh.element_count() {
                let g = u.gradient_on_element(e);
                for k in 0..2 {
                    for j in 0..d {
                        assert!((g.get(k, j) - xi.get(k, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_field_zero_gradient() {
        let mesh = Mesh::unit_square(4);
        let u = DiscreteField::interpolate(mesh.clone(), 1, |_, out| out[0] = 3.25);
        for e in 0..mesh.element_count() {
            assert_eq!(u.gradient_on_element(e).frob(), 0.0);
        }
    }

    #[test]
    fn p1_gradient_first_order_consistency() {
        // max element-gradient error against pi cos(pi x1) at barycenters is
        // O(h): doubling n from 16 to 32 shrinks it by a factor in [1.7, 2.3].
        let pi = std::f64::consts::PI;
        let err = |n: usize| -> f64 {
            let mesh = Mesh::unit_square(n);
            let u = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
                out[0] = (pi * x[0]).sin()
            });
            let mut worst = 0.0f64;
            for e in 0..mesh.element_count() {
                let g = u.gradient_on_element(e);
                let b = mesh.barycenter(e);
                let exact = pi * (pi * b[0]).cos();
                worst = worst.max((g.get(0, 0) - exact).abs());
            }
            worst
        };
        let ratio = err(16) / err(32);
        assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn element_queries_reject_out_of_range() {
        let mesh = Mesh::unit_square(2);
        let result = std::panic::catch_unwind(|| mesh.element_nodes(mesh.element_count()));
        assert!(result.is_err());
    }

    #[test]
    fn energy_of_affine_on_identity_medium() {
        let mesh = Mesh::unit_square(8);
        let field = CoefficientField::constant(2, 1.0, 0.0, 2.0);
        let f = Integrand::power_law(2.0, 1, 2);
        let xi = MatMd::row(&[0.8, -0.6]);
        let u = DiscreteField::affine(mesh, &xi, &[0.0]);
        let e = energy(&u, &f, &field, Seed(0), 1.0).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "energy {e}");
    }

    #[test]
    fn pure_lambda_term_gives_box_volume() {
        let mesh = Mesh::new(2, [0.0; 3], [2.0, 1.5, 0.0], 6).unwrap();
        let field = CoefficientField::constant(2, 1.0, 1.0, 2.0);
        let f = Integrand::power_law(2.0, 1, 2).with_lambda_term();
        let u = DiscreteField::zeros(mesh.clone(), 1);
        let e = energy(&u, &f, &field, Seed(0), 1.0).unwrap();
        assert!((e - mesh.volume()).abs() < 1e-12);
    }

    #[test]
    fn transverse_laminate_energy_approaches_second_moment() {
        // u = xi x with xi = e2 on a growing box: energy/|D| is the ergodic
        // average of lambda^2 and must approach 2.5 within a CLT band.
        let field = CoefficientField::laminate(
            2,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.0 },
            2.0,
        );
        let f = Integrand::power_law(2.0, 1, 2);
        let len = 400.0;
        let mesh = Mesh::new(2, [0.0; 3], [len, 1.0, 0.0], 400).unwrap();
        let xi = MatMd::row(&[0.0, 1.0]);
        let u = DiscreteField::affine(mesh.clone(), &xi, &[0.0]);
        let e = energy(&u, &f, &field, Seed(21), 1.0).unwrap() / mesh.volume();
        // var(lambda^2) = 2.25 over ~400 slabs
        let sigma = 1.5 / (400f64).sqrt();
        assert!((e - 2.5).abs() < 3.0 * sigma, "ergodic mean {e}");
    }

    #[test]
    fn energy_invariant_under_constant_shift() {
        let mesh = Mesh::unit_square(6);
        let field = CoefficientField::checkerboard(
            2,
            ScalarLaw::two_point(1.0, 2.0),
            ScalarLaw::Constant { value: 0.5 },
            2.0,
        );
        let f = Integrand::power_law(2.0, 1, 2).with_lambda_term();
        let u = DiscreteField::interpolate(mesh.clone(), 1, |x, out| {
            out[0] = (x[0] * 2.1).sin() + x[1]
        });
        let mut v = u.clone();
        for dof in v.dofs_mut() {
            *dof += 7.5;
        }
        let eu = energy(&u, &f, &field, Seed(2), 0.5).unwrap();
        let ev = energy(&v, &f, &field, Seed(2), 0.5).unwrap();
        assert!((eu - ev).abs() < 1e-9 * eu.abs());
    }

    #[test]
    fn norms_of_simple_fields() {
        let mesh = Mesh::unit_square(16);
        let one = DiscreteField::interpolate(mesh.clone(), 1, |_, out| out[0] = 1.0);
        assert!((one.norm(Norm::L1) - 1.0).abs() < 1e-12);
        assert!((one.norm(Norm::LdOverDm1) - 1.0).abs() < 1e-12);
        let x1 = DiscreteField::interpolate(mesh.clone(), 1, |x, out| out[0] = x[0]);
        // midpoint quadrature integrates linear functions exactly
        assert!((x1.norm(Norm::L1) - 0.5).abs() < 1e-12);
        // W11 of x -> x1: integral of |u| + |grad u| = 0.5 + 1
        assert!((x1.norm(Norm::W11) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_dofs_rejected() {
        let mesh = Mesh::unit_square(2);
        let field = CoefficientField::constant(2, 1.0, 0.0, 2.0);
        let f = Integrand::power_law(2.0, 1, 2);
        let mut u = DiscreteField::zeros(mesh, 1);
        u.dofs_mut()[0] = f64::INFINITY;
        assert!(energy(&u, &f, &field, Seed(0), 1.0).is_err());
    }

    #[test]
    fn incident_elements_cover_node() {
        let mesh = Mesh::unit_square(3);
        for node in 0..mesh.node_count() {
            let mut seen = Vec::new();
            mesh.for_incident_elements(node, |e, k| {
                let nodes = mesh.element_nodes(e);
                assert_eq!(nodes[k], node, "local index mismatch");
                seen.push(e);
            });
            seen.sort();
            seen.dedup();
            // cross-check against a brute-force scan
            let mut brute = Vec::new();
            for e in 0..mesh.element_count() {
                let nodes = mesh.element_nodes(e);
                if nodes[..mesh.d + 1].contains(&node) {
                    brute.push(e);
                }
            }
            assert_eq!(seen, brute, "node {node}");
        }
    }

    #[test]
    fn hat_gradients_sum_to_zero() {
        let mesh = Mesh::new(2, [0.0; 3], [1.0, 2.0, 0.0], 4).unwrap();
        for q in 0..mesh.n_perms() {
            let mut sum = MatMd::zeros(1, 2);
            for k in 0..=2 {
                sum.add_assign_scaled(&mesh.hat_gradient(q, k), 1.0);
            }
            assert!(sum.frob() < 1e-14);
        }
    }

    #[test]
    fn lumped_weights_sum_to_volume() {
        let mesh = Mesh::new(2, [0.0; 3], [2.0, 1.0, 0.0], 5).unwrap();
        let w = mesh.lumped_node_weights();
        let total: f64 = w.iter().sum();
        assert!((total - mesh.volume()).abs() < 1e-12);
    }
}
