//! Lagrange finite element spaces on triangulations.
//!
//! `FeSpace` describes the continuous P1 or P2 space on a mesh, optionally
//! constrained to vanish on the outer boundary (the `W_h` variant used as the
//! dual test space). Degrees of freedom are nodal: vertices for P1, vertices
//! plus edge midpoints for P2. A function in the space is a coefficient
//! vector over the unconstrained DOFs.

use crate::mesh::{CellTag, Mesh};
use crate::{Error, Result};
use std::collections::HashMap;
use std::sync::Arc;

/// Symmetric quadrature rule on the reference triangle.
///
/// Points are barycentric; weights sum to the reference-simplex area 1/2.
/// The rule is exact for polynomials up to `degree`.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub degree: usize,
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Smallest built-in rule exact to at least `degree` (max 6).
    pub fn triangle(degree: usize) -> QuadratureRule {
        let (degree, raw): (usize, &[(f64, f64, f64)]) = if degree <= 2 {
            (
                2,
                &[
                    (2.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0),
                    (1.0 / 6.0, 2.0 / 3.0, 1.0 / 3.0),
                    (1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0),
                ],
            )
        } else if degree <= 4 {
            // Dunavant degree-4, 6 points
            (
                4,
                &[
                    (0.108103018168070, 0.445948490915965, 0.223381589678011),
                    (0.445948490915965, 0.108103018168070, 0.223381589678011),
                    (0.445948490915965, 0.445948490915965, 0.223381589678011),
                    (0.816847572980459, 0.091576213509771, 0.109951743655322),
                    (0.091576213509771, 0.816847572980459, 0.109951743655322),
                    (0.091576213509771, 0.091576213509771, 0.109951743655322),
                ],
            )
        } else {
            // Dunavant degree-6, 12 points
            (
                6,
                &[
                    (0.873821971016996, 0.063089014491502, 0.050844906370207),
                    (0.063089014491502, 0.873821971016996, 0.050844906370207),
                    (0.063089014491502, 0.063089014491502, 0.050844906370207),
                    (0.501426509658179, 0.249286745170910, 0.116786275726379),
                    (0.249286745170910, 0.501426509658179, 0.116786275726379),
                    (0.249286745170910, 0.249286745170910, 0.116786275726379),
                    (0.636502499121399, 0.310352451033785, 0.082851075618374),
                    (0.636502499121399, 0.053145049844816, 0.082851075618374),
                    (0.310352451033785, 0.636502499121399, 0.082851075618374),
                    (0.310352451033785, 0.053145049844816, 0.082851075618374),
                    (0.053145049844816, 0.636502499121399, 0.082851075618374),
                    (0.053145049844816, 0.310352451033785, 0.082851075618374),
                ],
            )
        };
        let points = raw.iter().map(|&(a, b, _)| [1.0 - a - b, a, b]).collect();
        // published weights sum to 1; rescale to the reference area 1/2
        let weights = raw.iter().map(|&(_, _, w)| 0.5 * w).collect();
        QuadratureRule {
            degree,
            points,
            weights,
        }
    }
}

/// 3-point Gauss-Legendre rule on [0, 1]; exact to degree 5.
pub const EDGE_QUADRATURE: [(f64, f64); 3] = [
    (0.5 - 0.387298334620741688, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.5 + 0.387298334620741688, 5.0 / 18.0),
];

const MAX_LOCAL: usize = 6;

/// Evaluates the local Lagrange basis at barycentric coordinates.
pub fn local_basis(degree: u8, bary: [f64; 3]) -> ([f64; MAX_LOCAL], usize) {
    let [l0, l1, l2] = bary;
    match degree {
        1 => ([l0, l1, l2, 0.0, 0.0, 0.0], 3),
        2 => (
            [
                l0 * (2.0 * l0 - 1.0),
                l1 * (2.0 * l1 - 1.0),
                l2 * (2.0 * l2 - 1.0),
                4.0 * l0 * l1,
                4.0 * l1 * l2,
                4.0 * l0 * l2,
            ],
            6,
        ),
        d => panic!("unsupported degree {d}"),
    }
}

/// Gradients of the local basis with respect to barycentric coordinates,
/// returned as coefficients of (grad l0, grad l1, grad l2).
fn local_basis_grad_bary(degree: u8, bary: [f64; 3]) -> ([[f64; 3]; MAX_LOCAL], usize) {
    let [l0, l1, l2] = bary;
    match degree {
        1 => (
            [
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0; 3],
                [0.0; 3],
                [0.0; 3],
            ],
            3,
        ),
        2 => (
            [
                [4.0 * l0 - 1.0, 0.0, 0.0],
                [0.0, 4.0 * l1 - 1.0, 0.0],
                [0.0, 0.0, 4.0 * l2 - 1.0],
                [4.0 * l1, 4.0 * l0, 0.0],
                [0.0, 4.0 * l2, 4.0 * l1],
                [4.0 * l2, 0.0, 4.0 * l0],
            ],
            6,
        ),
        d => panic!("unsupported degree {d}"),
    }
}

/// Per-cell affine geometry: barycentric gradients and area.
#[derive(Clone, Copy, Debug)]
pub struct CellGeom {
    /// gradients of the three barycentric coordinates
    pub grad_bary: [[f64; 2]; 3],
    pub area: f64,
}

impl CellGeom {
    pub fn new(verts: &[[f64; 2]; 3]) -> CellGeom {
        let [a, b, c] = *verts;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        // grad l1 and grad l2 from the inverse Jacobian; grad l0 = -(g1+g2)
        let g1 = [(c[1] - a[1]) / det, (a[0] - c[0]) / det];
        let g2 = [(a[1] - b[1]) / det, (b[0] - a[0]) / det];
        CellGeom {
            grad_bary: [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2],
            area: 0.5 * det,
        }
    }

    pub fn basis_gradients(&self, degree: u8, bary: [f64; 3]) -> ([[f64; 2]; MAX_LOCAL], usize) {
        let (coeff, n) = local_basis_grad_bary(degree, bary);
        let mut out = [[0.0; 2]; MAX_LOCAL];
        for k in 0..n {
            for i in 0..3 {
                out[k][0] += coeff[k][i] * self.grad_bary[i][0];
                out[k][1] += coeff[k][i] * self.grad_bary[i][1];
            }
        }
        (out, n)
    }

    /// Element-wise Laplacian of each local basis function. Constant per cell
    /// (zero for P1, second derivatives of quadratics for P2).
    pub fn basis_laplacians(&self, degree: u8) -> ([f64; MAX_LOCAL], usize) {
        match degree {
            1 => ([0.0; MAX_LOCAL], 3),
            2 => {
                let g = &self.grad_bary;
                let dot = |i: usize, j: usize| g[i][0] * g[j][0] + g[i][1] * g[j][1];
                (
                    [
                        4.0 * dot(0, 0),
                        4.0 * dot(1, 1),
                        4.0 * dot(2, 2),
                        8.0 * dot(0, 1),
                        8.0 * dot(1, 2),
                        8.0 * dot(0, 2),
                    ],
                    6,
                )
            }
            d => panic!("unsupported degree {d}"),
        }
    }
}

/// Restricts norm and error integrals to tagged subsets of cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionFilter {
    All,
    Omega,
    BRegion,
}

impl RegionFilter {
    pub fn admits(self, tag: CellTag) -> bool {
        match self {
            RegionFilter::All => true,
            RegionFilter::Omega => tag.in_omega(),
            RegionFilter::BRegion => tag.in_b(),
        }
    }
}

/// Continuous Lagrange space `V_h^k` (or its zero-trace variant `W_h`).
pub struct FeSpace {
    pub mesh: Arc<Mesh>,
    pub degree: u8,
    /// true for the variant constrained to vanish on the outer boundary
    pub constrained: bool,
    /// all nodal points (vertices, then edge midpoints for P2)
    nodes: Vec<[f64; 2]>,
    /// node indices per cell in local basis order
    cell_nodes: Vec<[usize; MAX_LOCAL]>,
    node_on_boundary: Vec<bool>,
    /// active DOF index per node; None for constrained boundary nodes
    node_to_dof: Vec<Option<usize>>,
    /// node index per active DOF
    dof_to_node: Vec<usize>,
    /// active DOFs whose basis function has support intersecting omega
    /// (equivalently, whose nodal point lies in the closed window)
    pub omega_dofs: Vec<usize>,
    pub quadrature: QuadratureRule,
}

impl FeSpace {
    pub fn new(mesh: Arc<Mesh>, degree: u8, constrained: bool) -> Result<Arc<FeSpace>> {
        if degree != 1 && degree != 2 {
            return Err(Error::Space(format!(
                "unsupported polynomial degree {degree}; only 1 and 2 are built"
            )));
        }
        let mut nodes: Vec<[f64; 2]> = mesh.vertices.clone();
        let mut edge_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut cell_nodes = Vec::with_capacity(mesh.cells.len());
        for cell in &mesh.cells {
            let mut local = [usize::MAX; MAX_LOCAL];
            local[..3].copy_from_slice(cell);
            if degree == 2 {
                for (slot, (a, b)) in [
                    (3, (cell[0], cell[1])),
                    (4, (cell[1], cell[2])),
                    (5, (cell[0], cell[2])),
                ] {
                    let key = (a.min(b), a.max(b));
                    let idx = *edge_index.entry(key).or_insert_with(|| {
                        let va = mesh.vertices[a];
                        let vb = mesh.vertices[b];
                        nodes.push([0.5 * (va[0] + vb[0]), 0.5 * (va[1] + vb[1])]);
                        nodes.len() - 1
                    });
                    local[slot] = idx;
                }
            }
            cell_nodes.push(local);
        }

        let mut node_on_boundary = vec![false; nodes.len()];
        for f in &mesh.boundary_facets {
            node_on_boundary[f.verts[0]] = true;
            node_on_boundary[f.verts[1]] = true;
            if degree == 2 {
                let key = (f.verts[0].min(f.verts[1]), f.verts[0].max(f.verts[1]));
                node_on_boundary[edge_index[&key]] = true;
            }
        }

        let mut node_to_dof = vec![None; nodes.len()];
        let mut dof_to_node = Vec::new();
        for (i, on_bd) in node_on_boundary.iter().enumerate() {
            if constrained && *on_bd {
                continue;
            }
            node_to_dof[i] = Some(dof_to_node.len());
            dof_to_node.push(i);
        }

        let omega_dofs = dof_to_node
            .iter()
            .enumerate()
            .filter(|&(_, &node)| mesh.omega.contains(nodes[node]))
            .map(|(dof, _)| dof)
            .collect();

        let quadrature = QuadratureRule::triangle(2 * degree as usize + 2);
        Ok(Arc::new(FeSpace {
            mesh,
            degree,
            constrained,
            nodes,
            cell_nodes,
            node_on_boundary,
            node_to_dof,
            dof_to_node,
            omega_dofs,
            quadrature,
        }))
    }

    pub fn dof_count(&self) -> usize {
        self.dof_to_node.len()
    }

    pub fn dof_coords(&self, dof: usize) -> [f64; 2] {
        self.nodes[self.dof_to_node[dof]]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// True when the DOF's nodal point lies on the outer boundary (only
    /// meaningful for the unconstrained space; the constrained variant drops
    /// those DOFs entirely).
    pub fn dof_on_boundary(&self, dof: usize) -> bool {
        self.node_on_boundary[self.dof_to_node[dof]]
    }

    pub fn local_dofs_len(&self) -> usize {
        if self.degree == 1 {
            3
        } else {
            6
        }
    }

    /// Active DOF per local node of a cell; None for constrained nodes.
    pub fn cell_dofs(&self, cell: usize) -> [Option<usize>; MAX_LOCAL] {
        let mut out = [None; MAX_LOCAL];
        for k in 0..self.local_dofs_len() {
            out[k] = self.node_to_dof[self.cell_nodes[cell][k]];
        }
        out
    }

    pub fn cell_geometry(&self, cell: usize) -> CellGeom {
        CellGeom::new(&self.mesh.cell_vertices(cell))
    }
}

/// Nodal interpolant: matches `f` at every DOF coordinate.
pub fn nodal_interpolate(space: &Arc<FeSpace>, f: &dyn Fn([f64; 2]) -> f64) -> Result<FeFunction> {
    let mut coeffs = vec![0.0; space.dof_count()];
    for (dof, c) in coeffs.iter_mut().enumerate() {
        let v = f(space.dof_coords(dof));
        if !v.is_finite() {
            let p = space.dof_coords(dof);
            return Err(Error::Space(format!(
                "non-finite value {v} at interpolation node ({}, {})",
                p[0], p[1]
            )));
        }
        *c = v;
    }
    Ok(FeFunction {
        space: space.clone(),
        coeffs,
    })
}

/// Coefficient vector over the active DOFs of a space.
#[derive(Clone)]
pub struct FeFunction {
    pub space: Arc<FeSpace>,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn zero(space: &Arc<FeSpace>) -> FeFunction {
        FeFunction {
            space: space.clone(),
            coeffs: vec![0.0; space.dof_count()],
        }
    }

    pub fn from_coeffs(space: &Arc<FeSpace>, coeffs: Vec<f64>) -> FeFunction {
        assert_eq!(coeffs.len(), space.dof_count());
        FeFunction {
            space: space.clone(),
            coeffs,
        }
    }

    pub fn value_in_cell(&self, cell: usize, bary: [f64; 3]) -> f64 {
        let (phi, n) = local_basis(self.space.degree, bary);
        let dofs = self.space.cell_dofs(cell);
        let mut acc = 0.0;
        for k in 0..n {
            if let Some(d) = dofs[k] {
                acc += self.coeffs[d] * phi[k];
            }
        }
        acc
    }

    pub fn grad_in_cell(&self, cell: usize, geom: &CellGeom, bary: [f64; 3]) -> [f64; 2] {
        let (grads, n) = geom.basis_gradients(self.space.degree, bary);
        let dofs = self.space.cell_dofs(cell);
        let mut acc = [0.0; 2];
        for k in 0..n {
            if let Some(d) = dofs[k] {
                acc[0] += self.coeffs[d] * grads[k][0];
                acc[1] += self.coeffs[d] * grads[k][1];
            }
        }
        acc
    }

    /// Exact piecewise-polynomial evaluation at a point inside the closed
    /// domain.
    pub fn evaluate(&self, p: [f64; 2]) -> Result<f64> {
        let (cell, bary) = self.space.mesh.locate(p)?;
        Ok(self.value_in_cell(cell, bary))
    }

    pub fn evaluate_many(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        points.iter().map(|&p| self.evaluate(p)).collect()
    }

    /// Quadrature-exact L2 norm and H1 seminorm over cells matching the
    /// filter (whole domain if `All`).
    pub fn l2_h1_seminorms(&self, filter: RegionFilter) -> (f64, f64) {
        let space = &self.space;
        let mesh = &space.mesh;
        let quad = &space.quadrature;
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for cell in 0..mesh.n_cells() {
            if !filter.admits(mesh.cell_tags[cell]) {
                continue;
            }
            let geom = space.cell_geometry(cell);
            let scale = 2.0 * geom.area;
            for (q, &bary) in quad.points.iter().enumerate() {
                let w = quad.weights[q] * scale;
                let v = self.value_in_cell(cell, bary);
                let g = self.grad_in_cell(cell, &geom, bary);
                l2 += w * v * v;
                h1 += w * (g[0] * g[0] + g[1] * g[1]);
            }
        }
        (l2.sqrt(), h1.sqrt())
    }

    /// Max absolute nodal/quadrature value; an exact L-infinity norm for P1
    /// and a tight lower estimate for P2.
    pub fn max_abs_estimate(&self) -> f64 {
        let mut m = self.coeffs.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
        if self.space.degree == 2 {
            let quad = &self.space.quadrature;
            for cell in 0..self.space.mesh.n_cells() {
                for &bary in &quad.points {
                    m = m.max(self.value_in_cell(cell, bary).abs());
                }
            }
        }
        m
    }
}

/// L2 and H1-seminorm errors of `fn` against an analytic field, integrated
/// with a degree-6 rule over the filtered cells.
pub fn error_norms(
    f: &FeFunction,
    exact: &dyn Fn([f64; 2]) -> f64,
    exact_grad: &dyn Fn([f64; 2]) -> [f64; 2],
    filter: RegionFilter,
) -> (f64, f64) {
    let space = &f.space;
    let mesh = &space.mesh;
    let quad = QuadratureRule::triangle(6);
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for cell in 0..mesh.n_cells() {
        if !filter.admits(mesh.cell_tags[cell]) {
            continue;
        }
        let verts = mesh.cell_vertices(cell);
        let geom = CellGeom::new(&verts);
        let scale = 2.0 * geom.area;
        for (q, &bary) in quad.points.iter().enumerate() {
            let w = quad.weights[q] * scale;
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            let dv = f.value_in_cell(cell, bary) - exact(x);
            let gf = f.grad_in_cell(cell, &geom, bary);
            let ge = exact_grad(x);
            l2 += w * dv * dv;
            h1 += w * ((gf[0] - ge[0]).powi(2) + (gf[1] - ge[1]).powi(2));
        }
    }
    (l2.sqrt(), h1.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, Rect};
    use approx::assert_relative_eq;

    fn space(nx: usize, degree: u8, constrained: bool) -> Arc<FeSpace> {
        let mesh = build_structured_mesh(
            nx,
            Rect::UNIT,
            Rect::new(0.25, 0.25, 0.75, 0.75),
            Rect::new(0.25, 0.25, 0.75, 0.75),
        )
        .unwrap();
        FeSpace::new(Arc::new(mesh), degree, constrained).unwrap()
    }

    #[test]
    fn quadrature_rules_integrate_monomials_exactly() {
        // reference integrals: int xi^a eta^b = a! b! / (a+b+2)!
        fn exact(a: u32, b: u32) -> f64 {
            let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>().max(1.0);
            fact(a) * fact(b) / fact(a + b + 2)
        }
        for degree in [2usize, 4, 6] {
            let rule = QuadratureRule::triangle(degree);
            assert_relative_eq!(rule.weights.iter().sum::<f64>(), 0.5, max_relative = 1e-12);
            for a in 0..=degree as u32 {
                for b in 0..=(degree as u32 - a) {
                    let num: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[1].powi(a as i32) * p[2].powi(b as i32))
                        .sum();
                    assert_relative_eq!(num, exact(a, b), max_relative = 1e-10, epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        for degree in [1u8, 2] {
            let sp = space(4, degree, false);
            let one = nodal_interpolate(&sp, &|_| 1.0).unwrap();
            for p in [[0.11, 0.23], [0.5, 0.5], [0.99, 0.37]] {
                assert_relative_eq!(one.evaluate(p).unwrap(), 1.0, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn hat_function_has_lagrange_property() {
        let sp = space(4, 1, false);
        let mut hat = FeFunction::zero(&sp);
        hat.coeffs[7] = 1.0;
        for dof in 0..sp.dof_count() {
            let v = hat.evaluate(sp.dof_coords(dof)).unwrap();
            if dof == 7 {
                assert_relative_eq!(v, 1.0, epsilon = 1e-13);
            } else {
                assert_relative_eq!(v, 0.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn p1_reproduces_affine_functions() {
        let sp = space(4, 1, false);
        let f = nodal_interpolate(&sp, &|p| p[0] + p[1]).unwrap();
        assert_relative_eq!(f.evaluate([0.3, 0.4]).unwrap(), 0.7, epsilon = 1e-13);
        let c = nodal_interpolate(&sp, &|_| 2.5).unwrap();
        assert_relative_eq!(c.evaluate([0.77, 0.13]).unwrap(), 2.5, epsilon = 1e-13);
    }

    #[test]
    fn p2_reproduces_quadratics_at_quadrature_points() {
        let sp = space(4, 2, false);
        let exact = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1] + 0.5 * p[0] * p[1];
        let f = nodal_interpolate(&sp, &exact).unwrap();
        let quad = QuadratureRule::triangle(4);
        for cell in 0..sp.mesh.n_cells() {
            let verts = sp.mesh.cell_vertices(cell);
            for &bary in &quad.points {
                let x = [
                    bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                    bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
                ];
                assert_relative_eq!(f.value_in_cell(cell, bary), exact(x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_field_interpolates_to_zero_vector() {
        let sp = space(4, 2, false);
        let z = nodal_interpolate(&sp, &|_| 0.0).unwrap();
        assert!(z.coeffs.iter().all(|&c| c == 0.0));
        let (l2, h1) = z.l2_h1_seminorms(RegionFilter::All);
        assert_eq!((l2, h1), (0.0, 0.0));
    }

    #[test]
    fn norms_of_reference_fields() {
        let sp = space(8, 1, false);
        // f = 1: L2 = 1 (unit area), H1-seminorm = 0
        let one = nodal_interpolate(&sp, &|_| 1.0).unwrap();
        let (l2, h1) = one.l2_h1_seminorms(RegionFilter::All);
        assert_relative_eq!(l2, 1.0, max_relative = 1e-12);
        assert!(h1 < 1e-12);
        // f = x: closed forms int x^2 = 1/3 and int |grad x|^2 = 1
        let fx = nodal_interpolate(&sp, &|p| p[0]).unwrap();
        let (l2, h1) = fx.l2_h1_seminorms(RegionFilter::All);
        assert_relative_eq!(l2, (1.0f64 / 3.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(h1, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn constrained_space_drops_boundary_dofs() {
        let sp = space(4, 1, true);
        // interior vertices of a 4x4 grid: 3 x 3
        assert_eq!(sp.dof_count(), 9);
        let f = nodal_interpolate(&sp, &|p| p[0] * p[1] + 1.0).unwrap();
        // the represented function vanishes on the boundary regardless of f
        assert_relative_eq!(f.evaluate([0.0, 0.5]).unwrap(), 0.0, epsilon = 1e-13);
        assert_relative_eq!(f.evaluate([0.5, 1.0]).unwrap(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn interpolation_error_halves_at_rate_two() {
        // L2 interpolation error of x^2 - y^2 on P1 drops by ~4x per
        // refinement (slope 2 in log-log)
        let exact = |p: [f64; 2]| p[0] * p[0] - p[1] * p[1];
        let grad = |p: [f64; 2]| [2.0 * p[0], -2.0 * p[1]];
        let mut errors = Vec::new();
        for nx in [4usize, 8, 16] {
            let sp = space(nx, 1, false);
            let f = nodal_interpolate(&sp, &exact).unwrap();
            let (l2, _) = error_norms(&f, &exact, &grad, RegionFilter::All);
            errors.push(l2);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio} not close to 4");
        }
    }

    #[test]
    fn interpolate_rejects_non_finite_fields() {
        let sp = space(4, 1, false);
        let res = nodal_interpolate(&sp, &|p| 1.0 / (p[0] - 0.25));
        assert!(res.is_err());
    }

    #[test]
    fn omega_dof_nodes_lie_in_window() {
        let sp = space(8, 1, false);
        // nodes at multiples of 1/8 within [0.25, 0.75]^2: 5 x 5
        assert_eq!(sp.omega_dofs.len(), 25);
        for &d in &sp.omega_dofs {
            assert!(sp.mesh.omega.contains(sp.dof_coords(d)));
        }
    }
}
