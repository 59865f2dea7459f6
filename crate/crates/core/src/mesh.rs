//! Structured triangulations of axis-aligned rectangles with tagged
//! observation and evaluation subdomains.
//!
//! Each grid square is split into two triangles. The split diagonal is chosen
//! per quadrant so that the triangulation is invariant under the mirror maps
//! `x -> xmin+xmax-x` and `y -> ymin+ymax-y`; mirror-symmetric problems then
//! admit an exact DOF permutation between the original and reflected solves.
//! The observation window `omega` and the evaluation region `b_region` must
//! be unions of grid squares, so their cell tags are exact.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle `[xmin, xmax] x [ymin, ymax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Rect {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    pub const UNIT: Rect = Rect {
        xmin: 0.0,
        ymin: 0.0,
        xmax: 1.0,
        ymax: 1.0,
    };

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-set membership with a small geometric tolerance.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let tol = 1e-12 * self.width().max(self.height()).max(1.0);
        p[0] >= self.xmin - tol
            && p[0] <= self.xmax + tol
            && p[1] >= self.ymin - tol
            && p[1] <= self.ymax + tol
    }

    pub fn strictly_inside(&self, outer: &Rect) -> bool {
        self.xmin > outer.xmin
            && self.ymin > outer.ymin
            && self.xmax < outer.xmax
            && self.ymax < outer.ymax
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)]
    }

    fn aligned_coord(x: f64, origin: f64, step: f64) -> bool {
        let k = (x - origin) / step;
        (k - k.round()).abs() <= 1e-9
    }

    /// True when all four edges lie on the `nx`-per-side grid of `domain`.
    pub fn grid_aligned(&self, domain: &Rect, nx: usize) -> bool {
        let dx = domain.width() / nx as f64;
        let dy = domain.height() / nx as f64;
        Rect::aligned_coord(self.xmin, domain.xmin, dx)
            && Rect::aligned_coord(self.xmax, domain.xmin, dx)
            && Rect::aligned_coord(self.ymin, domain.ymin, dy)
            && Rect::aligned_coord(self.ymax, domain.ymin, dy)
    }
}

/// Subdomain membership of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CellTag {
    Omega,
    B,
    OmegaAndB,
    Other,
}

impl CellTag {
    pub fn in_omega(self) -> bool {
        matches!(self, CellTag::Omega | CellTag::OmegaAndB)
    }

    pub fn in_b(self) -> bool {
        matches!(self, CellTag::B | CellTag::OmegaAndB)
    }
}

/// Interior facet shared by exactly two cells; `left < right` by cell index.
#[derive(Clone, Copy, Debug)]
pub struct InteriorFacet {
    pub verts: [usize; 2],
    pub left: usize,
    pub right: usize,
}

/// Boundary facet owned by exactly one cell.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFacet {
    pub verts: [usize; 2],
    pub cell: usize,
}

/// Identifier for a facet of either kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FacetRef {
    Interior(usize),
    Boundary(usize),
}

struct GridIndex {
    nx: usize,
    /// the two cell ids of square (i, j), row-major
    square_cells: Vec<[usize; 2]>,
}

/// Conforming triangulation of a rectangle. Immutable after construction and
/// safe to share read-only across threads.
pub struct Mesh {
    pub vertices: Vec<[f64; 2]>,
    /// counter-clockwise vertex triples
    pub cells: Vec<[usize; 3]>,
    pub interior_facets: Vec<InteriorFacet>,
    pub boundary_facets: Vec<BoundaryFacet>,
    pub cell_tags: Vec<CellTag>,
    pub h_max: f64,
    pub h_min: f64,
    pub domain: Rect,
    pub omega: Rect,
    pub b_region: Rect,
    grid: Option<GridIndex>,
}

/// Maximum allowed quasi-uniformity ratio `h_max / h_min`.
pub const QUASI_UNIFORMITY_RHO: f64 = 2.0;

/// Builds the structured crossed-triangle mesh with `nx` squares per side.
///
/// Preconditions: `nx >= 4`; `omega` and `b_region` are grid-aligned and
/// strictly inside the domain (so that the evaluation region minus the
/// observation window cannot touch the outer boundary).
pub fn build_structured_mesh(nx: usize, domain: Rect, omega: Rect, b_region: Rect) -> Result<Mesh> {
    if nx < 4 {
        return Err(Error::Mesh(format!("nx = {nx} is below the minimum of 4")));
    }
    if domain.width() <= 0.0 || domain.height() <= 0.0 {
        return Err(Error::Mesh("domain rectangle is degenerate".into()));
    }
    for (name, r) in [("omega", &omega), ("b_region", &b_region)] {
        if r.width() <= 0.0 || r.height() <= 0.0 {
            return Err(Error::Mesh(format!("{name} rectangle is degenerate")));
        }
        if !r.grid_aligned(&domain, nx) {
            return Err(Error::Mesh(format!(
                "{name} is not aligned to the {nx}x{nx} grid; tags would not be exact"
            )));
        }
        if !r.strictly_inside(&domain) {
            return Err(Error::Mesh(format!(
                "{name} must lie strictly inside the domain"
            )));
        }
    }
    build_structured_unchecked(nx, domain, omega, b_region)
}

/// Same triangulation as [`build_structured_mesh`] without the `nx >= 4` and
/// region preconditions. For tests and debugging of tiny meshes only.
pub fn build_structured_unchecked(
    nx: usize,
    domain: Rect,
    omega: Rect,
    b_region: Rect,
) -> Result<Mesh> {
    let dx = domain.width() / nx as f64;
    let dy = domain.height() / nx as f64;
    let nv = nx + 1;
    let mut vertices = Vec::with_capacity(nv * nv);
    for j in 0..nv {
        for i in 0..nv {
            vertices.push([domain.xmin + i as f64 * dx, domain.ymin + j as f64 * dy]);
        }
    }
    let vid = |i: usize, j: usize| j * nv + i;

    let mut cells = Vec::with_capacity(2 * nx * nx);
    let mut square_cells = Vec::with_capacity(nx * nx);
    let half = nx / 2;
    for j in 0..nx {
        for i in 0..nx {
            let ll = vid(i, j);
            let lr = vid(i + 1, j);
            let ur = vid(i + 1, j + 1);
            let ul = vid(i, j + 1);
            let c0 = cells.len();
            // diagonal direction per quadrant keeps the mesh mirror-symmetric
            if (i < half) == (j < half) {
                cells.push([ll, lr, ur]);
                cells.push([ll, ur, ul]);
            } else {
                cells.push([ll, lr, ul]);
                cells.push([lr, ur, ul]);
            }
            square_cells.push([c0, c0 + 1]);
        }
    }

    let cell_tags = cells
        .iter()
        .map(|c| {
            let centroid = centroid(&vertices, c);
            match (omega.contains(centroid), b_region.contains(centroid)) {
                (true, true) => CellTag::OmegaAndB,
                (true, false) => CellTag::Omega,
                (false, true) => CellTag::B,
                (false, false) => CellTag::Other,
            }
        })
        .collect();

    finish_mesh(
        vertices,
        cells,
        cell_tags,
        domain,
        omega,
        b_region,
        Some(GridIndex { nx, square_cells }),
    )
}

/// The unit square split by the diagonal from (0,0) to (1,1): two cells, one
/// interior facet. Intended for hand-checked tests and debugging.
pub fn two_triangle_unit_square() -> Mesh {
    let vertices = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let cells = vec![[0, 1, 2], [0, 2, 3]];
    let tags = vec![CellTag::Other, CellTag::Other];
    finish_mesh(
        vertices,
        cells,
        tags,
        Rect::UNIT,
        Rect::new(0.25, 0.25, 0.75, 0.75),
        Rect::new(0.25, 0.25, 0.75, 0.75),
        None,
    )
    .expect("two-triangle mesh is valid")
}

fn centroid(vertices: &[[f64; 2]], cell: &[usize; 3]) -> [f64; 2] {
    let a = vertices[cell[0]];
    let b = vertices[cell[1]];
    let c = vertices[cell[2]];
    [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
}

fn finish_mesh(
    vertices: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
    cell_tags: Vec<CellTag>,
    domain: Rect,
    omega: Rect,
    b_region: Rect,
    grid: Option<GridIndex>,
) -> Result<Mesh> {
    // orientation and diameter scan
    let mut h_max = 0.0f64;
    let mut h_min = f64::INFINITY;
    for cell in &cells {
        let a = vertices[cell[0]];
        let b = vertices[cell[1]];
        let c = vertices[cell[2]];
        let signed = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if signed <= 0.0 {
            return Err(Error::Mesh("cell with non-positive orientation".into()));
        }
        let d = dist(a, b).max(dist(b, c)).max(dist(a, c));
        h_max = h_max.max(d);
        h_min = h_min.min(d);
    }
    if h_max / h_min > QUASI_UNIFORMITY_RHO {
        return Err(Error::Mesh(format!(
            "quasi-uniformity violated: h_max/h_min = {:.3}",
            h_max / h_min
        )));
    }

    // facet extraction: every edge belongs to one or two cells
    let mut edge_cells: std::collections::HashMap<(usize, usize), Vec<usize>> =
        std::collections::HashMap::new();
    for (ci, cell) in cells.iter().enumerate() {
        for (a, b) in [(cell[0], cell[1]), (cell[1], cell[2]), (cell[0], cell[2])] {
            let key = (a.min(b), a.max(b));
            edge_cells.entry(key).or_default().push(ci);
        }
    }
    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    let mut keys: Vec<_> = edge_cells.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        let owners = &edge_cells[&key];
        match owners.len() {
            1 => boundary.push(BoundaryFacet {
                verts: [key.0, key.1],
                cell: owners[0],
            }),
            2 => interior.push(InteriorFacet {
                verts: [key.0, key.1],
                left: owners[0].min(owners[1]),
                right: owners[0].max(owners[1]),
            }),
            n => {
                return Err(Error::Mesh(format!("facet shared by {n} cells")));
            }
        }
    }

    Ok(Mesh {
        vertices,
        cells,
        interior_facets: interior,
        boundary_facets: boundary,
        cell_tags,
        h_max,
        h_min,
        domain,
        omega,
        b_region,
        grid,
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Mesh {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_vertices(&self, cell: usize) -> [[f64; 2]; 3] {
        let c = self.cells[cell];
        [
            self.vertices[c[0]],
            self.vertices[c[1]],
            self.vertices[c[2]],
        ]
    }

    pub fn cell_area(&self, cell: usize) -> f64 {
        let [a, b, c] = self.cell_vertices(cell);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    }

    pub fn facet_length(&self, verts: [usize; 2]) -> f64 {
        dist(self.vertices[verts[0]], self.vertices[verts[1]])
    }

    /// Unit normal of a facet. For interior facets the normal points from the
    /// lower-index cell into the higher-index cell; for boundary facets it
    /// points out of the domain. The direction is arbitrary but fixed; jump
    /// quantities are invariant under the choice because both factors flip.
    pub fn facet_normal(&self, facet: FacetRef) -> Result<[f64; 2]> {
        let (verts, from_point, flip_towards) = match facet {
            FacetRef::Interior(i) => {
                let f = self
                    .interior_facets
                    .get(i)
                    .ok_or_else(|| Error::Mesh(format!("invalid interior facet id {i}")))?;
                let from = centroid(&self.vertices, &self.cells[f.left]);
                let to = centroid(&self.vertices, &self.cells[f.right]);
                (f.verts, from, to)
            }
            FacetRef::Boundary(i) => {
                let f = self
                    .boundary_facets
                    .get(i)
                    .ok_or_else(|| Error::Mesh(format!("invalid boundary facet id {i}")))?;
                let from = centroid(&self.vertices, &self.cells[f.cell]);
                let mid = [
                    0.5 * (self.vertices[f.verts[0]][0] + self.vertices[f.verts[1]][0]),
                    0.5 * (self.vertices[f.verts[0]][1] + self.vertices[f.verts[1]][1]),
                ];
                (f.verts, from, mid)
            }
        };
        let a = self.vertices[verts[0]];
        let b = self.vertices[verts[1]];
        let len = dist(a, b);
        let mut n = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
        let dir = [
            flip_towards[0] - from_point[0],
            flip_towards[1] - from_point[1],
        ];
        if n[0] * dir[0] + n[1] * dir[1] < 0.0 {
            n = [-n[0], -n[1]];
        }
        Ok(n)
    }

    /// Locates the cell containing `p`; returns the cell index and barycentric
    /// coordinates. Points on shared facets resolve to one of the adjacent
    /// cells (evaluation is continuous, so the choice is immaterial).
    pub fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        if !self.domain.contains(p) {
            return Err(Error::PointOutsideDomain(p[0], p[1]));
        }
        if let Some(grid) = &self.grid {
            let nx = grid.nx;
            let fx = ((p[0] - self.domain.xmin) / self.domain.width() * nx as f64)
                .floor()
                .clamp(0.0, (nx - 1) as f64) as usize;
            let fy = ((p[1] - self.domain.ymin) / self.domain.height() * nx as f64)
                .floor()
                .clamp(0.0, (nx - 1) as f64) as usize;
            // the floor computation can land one square off for points on grid
            // lines; scan the 3x3 neighborhood
            let mut best: Option<(usize, [f64; 3], f64)> = None;
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let i = fx as i64 + di;
                    let j = fy as i64 + dj;
                    if i < 0 || j < 0 || i >= nx as i64 || j >= nx as i64 {
                        continue;
                    }
                    for &cell in &grid.square_cells[(j as usize) * nx + i as usize] {
                        let bary = self.barycentric(cell, p);
                        let worst = bary[0].min(bary[1]).min(bary[2]);
                        if worst >= -1e-12 {
                            return Ok((cell, bary));
                        }
                        match best {
                            Some((_, _, w)) if w >= worst => {}
                            _ => best = Some((cell, bary, worst)),
                        }
                    }
                }
            }
            if let Some((cell, bary, worst)) = best {
                if worst >= -1e-9 {
                    return Ok((cell, bary));
                }
            }
            Err(Error::PointOutsideDomain(p[0], p[1]))
        } else {
            for cell in 0..self.cells.len() {
                let bary = self.barycentric(cell, p);
                if bary[0] >= -1e-12 && bary[1] >= -1e-12 && bary[2] >= -1e-12 {
                    return Ok((cell, bary));
                }
            }
            Err(Error::PointOutsideDomain(p[0], p[1]))
        }
    }

    pub fn barycentric(&self, cell: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.cell_vertices(cell);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Serializes vertices, cells and tags as JSON for debugging.
    pub fn dump_json(&self, w: &mut dyn std::io::Write) -> Result<()> {
        #[derive(Serialize)]
        struct Dump<'a> {
            vertices: &'a [[f64; 2]],
            cells: &'a [[usize; 3]],
            tags: &'a [CellTag],
        }
        let dump = Dump {
            vertices: &self.vertices,
            cells: &self.cells,
            tags: &self.cell_tags,
        };
        serde_json::to_writer(&mut *w, &dump).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_mesh(nx: usize) -> Mesh {
        build_structured_mesh(
            nx,
            Rect::UNIT,
            Rect::new(0.25, 0.25, 0.75, 0.75),
            Rect::new(0.25, 0.25, 0.75, 0.75),
        )
        .unwrap()
    }

    #[test]
    fn nx2_counts_match_hand_enumeration() {
        // enumerated by hand on the 2x2 grid: 8 cells, 8 interior facets,
        // 8 boundary facets
        let omega = Rect::new(0.25, 0.25, 0.75, 0.75);
        let m = build_structured_unchecked(2, Rect::UNIT, omega, omega).unwrap();
        assert_eq!(m.cells.len(), 8);
        assert_eq!(m.interior_facets.len(), 8);
        assert_eq!(m.boundary_facets.len(), 8);
    }

    #[test]
    fn euler_formula_on_structured_meshes() {
        // V - E + F = 1 for a planar triangulation of a disk-like region
        for nx in [4, 8] {
            let m = unit_mesh(nx);
            let v = m.vertices.len() as i64;
            let e = (m.interior_facets.len() + m.boundary_facets.len()) as i64;
            let f = m.cells.len() as i64;
            assert_eq!(v - e + f, 1);
            assert_eq!(m.boundary_facets.len(), 4 * nx);
        }
    }

    #[test]
    fn rejects_small_nx_and_misaligned_regions() {
        let err = build_structured_mesh(
            2,
            Rect::UNIT,
            Rect::new(0.25, 0.25, 0.75, 0.75),
            Rect::new(0.25, 0.25, 0.75, 0.75),
        );
        assert!(err.is_err());
        let err = build_structured_mesh(
            4,
            Rect::UNIT,
            Rect::new(0.3, 0.3, 0.7, 0.7),
            Rect::new(0.25, 0.25, 0.75, 0.75),
        );
        assert!(err.is_err());
    }

    #[test]
    fn omega_tags_are_exact() {
        let m = unit_mesh(4);
        let omega = m.omega;
        for (cell, tag) in m.cell_tags.iter().enumerate() {
            let c = centroid(&m.vertices, &m.cells[cell]);
            assert_eq!(tag.in_omega(), omega.contains(c));
        }
        // union of omega cells equals |omega| exactly
        let area: f64 = (0..m.n_cells())
            .filter(|&c| m.cell_tags[c].in_omega())
            .map(|c| m.cell_area(c))
            .sum();
        assert_relative_eq!(area, omega.area(), max_relative = 1e-12);
    }

    #[test]
    fn areas_sum_to_domain_area() {
        for nx in [4, 8, 16] {
            let m = unit_mesh(nx);
            let total: f64 = (0..m.n_cells()).map(|c| m.cell_area(c)).sum();
            assert_relative_eq!(total, 1.0, max_relative = 1e-12);
            assert_relative_eq!(
                m.h_max,
                std::f64::consts::SQRT_2 / nx as f64,
                max_relative = 1e-12
            );
            assert!(m.h_max / m.h_min <= QUASI_UNIFORMITY_RHO);
        }
    }

    #[test]
    fn facet_adjacency_counts() {
        let m = unit_mesh(4);
        for f in &m.interior_facets {
            assert!(f.left < f.right);
        }
        // every facet is either interior (two cells) or boundary (one cell):
        // total facet-cell incidences = 3 * cells
        assert_eq!(
            2 * m.interior_facets.len() + m.boundary_facets.len(),
            3 * m.cells.len()
        );
    }

    #[test]
    fn normals_are_unit_and_oriented() {
        let m = unit_mesh(4);
        for i in 0..m.interior_facets.len() {
            let n = m.facet_normal(FacetRef::Interior(i)).unwrap();
            assert_relative_eq!(n[0].hypot(n[1]), 1.0, max_relative = 1e-12);
        }
        for i in 0..m.boundary_facets.len() {
            let n = m.facet_normal(FacetRef::Boundary(i)).unwrap();
            assert_relative_eq!(n[0].hypot(n[1]), 1.0, max_relative = 1e-12);
            // outward on the unit square: component along the boundary's
            // outward axis must be +-1
            let f = m.boundary_facets[i];
            let mid = [
                0.5 * (m.vertices[f.verts[0]][0] + m.vertices[f.verts[1]][0]),
                0.5 * (m.vertices[f.verts[0]][1] + m.vertices[f.verts[1]][1]),
            ];
            if mid[0] < 1e-12 {
                assert_relative_eq!(n[0], -1.0, epsilon = 1e-12);
            } else if (mid[0] - 1.0).abs() < 1e-12 {
                assert_relative_eq!(n[0], 1.0, epsilon = 1e-12);
            } else if mid[1] < 1e-12 {
                assert_relative_eq!(n[1], -1.0, epsilon = 1e-12);
            } else {
                assert_relative_eq!(n[1], 1.0, epsilon = 1e-12);
            }
        }
        assert!(m.facet_normal(FacetRef::Interior(10_000)).is_err());
    }

    #[test]
    fn diagonal_normal_from_vertex_coordinates() {
        // computed from vertex coordinates of the split square: the diagonal
        // from (0,0) to (1,1) has unit normal (+-1/sqrt2, -+1/sqrt2)
        let m = two_triangle_unit_square();
        assert_eq!(m.interior_facets.len(), 1);
        let n = m.facet_normal(FacetRef::Interior(0)).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (n[0] + s).abs() < 1e-12 && (n[1] - s).abs() < 1e-12
                || (n[0] - s).abs() < 1e-12 && (n[1] + s).abs() < 1e-12
        );
    }

    #[test]
    fn horizontal_facet_normal_is_vertical() {
        let m = unit_mesh(4);
        for (i, f) in m.interior_facets.iter().enumerate() {
            let a = m.vertices[f.verts[0]];
            let b = m.vertices[f.verts[1]];
            if (a[1] - b[1]).abs() < 1e-14 {
                let n = m.facet_normal(FacetRef::Interior(i)).unwrap();
                assert!(n[0].abs() < 1e-12 && (n[1].abs() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_symmetry_of_cells() {
        // the cell set is invariant under x -> 1-x
        let m = unit_mesh(8);
        let key = |cell: &[usize; 3], mirror: bool| {
            let mut pts: Vec<[i64; 2]> = cell
                .iter()
                .map(|&v| {
                    let p = m.vertices[v];
                    let x = if mirror { 1.0 - p[0] } else { p[0] };
                    [(x * 1e9).round() as i64, (p[1] * 1e9).round() as i64]
                })
                .collect();
            pts.sort_unstable();
            pts
        };
        let mut originals: Vec<_> = m.cells.iter().map(|c| key(c, false)).collect();
        let mut mirrored: Vec<_> = m.cells.iter().map(|c| key(c, true)).collect();
        originals.sort_unstable();
        mirrored.sort_unstable();
        assert_eq!(originals, mirrored);
    }

    #[test]
    fn json_dump_carries_vertices_cells_tags() {
        let m = unit_mesh(4);
        let mut buf = Vec::new();
        m.dump_json(&mut buf).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(parsed["vertices"].as_array().unwrap().len(), 25);
        assert_eq!(parsed["cells"].as_array().unwrap().len(), 32);
        assert_eq!(parsed["tags"].as_array().unwrap().len(), 32);
    }

    #[test]
    fn locate_handles_facet_and_vertex_points() {
        let m = unit_mesh(4);
        for p in [
            [0.5, 0.5],
            [0.25, 0.25],
            [0.0, 0.0],
            [1.0, 1.0],
            [0.5, 0.13],
        ] {
            let (cell, bary) = m.locate(p).unwrap();
            let [a, b, c] = m.cell_vertices(cell);
            let x = bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0];
            let y = bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1];
            assert_relative_eq!(x, p[0], epsilon = 1e-12);
            assert_relative_eq!(y, p[1], epsilon = 1e-12);
        }
        assert!(m.locate([1.5, 0.5]).is_err());
    }
}
