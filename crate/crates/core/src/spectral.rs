//! Conforming spectral method on a harmonic polynomial basis.
//!
//! The trial space is spanned by `[1, Re z, Im z, ..., Re z^m, Im z^m]`
//! with `z = (x - c)/r` centered at the domain centroid and scaled by the
//! half-diameter (conditioning of the Vandermonde-like system). Every member
//! is pointwise harmonic, so the space is conforming for the PDE constraint
//! and the prior acts through a diagonal precision in this basis. The MAP
//! estimate solves the regularized normal equations
//!
//! ```text
//! (B^T B + lambda_N diag(w)) c = B^T y,   lambda_N = N^{d/(2 alpha + d)},
//! ```
//!
//! where `B_ij = basis_j(X_i)` and the empirical pairing is the unnormalized
//! sum over samples.

use crate::mesh::Mesh;
use crate::observe::ObservationSet;
use crate::space::QuadratureRule;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Spatial dimension of the artifact.
const DIM: f64 = 2.0;

/// Harmonic polynomial basis of maximum degree `m`, dimension `2m + 1`.
#[derive(Clone, Debug)]
pub struct HarmonicBasis {
    pub max_degree: usize,
    pub center: [f64; 2],
    pub radius: f64,
}

impl HarmonicBasis {
    pub fn new(max_degree: usize, center: [f64; 2], radius: f64) -> HarmonicBasis {
        assert!(radius > 0.0);
        HarmonicBasis {
            max_degree,
            center,
            radius,
        }
    }

    /// Basis centered at the rectangle centroid, scaled by its half-diagonal.
    pub fn for_domain(domain: &crate::mesh::Rect, max_degree: usize) -> HarmonicBasis {
        let c = domain.center();
        let r = 0.5 * domain.width().hypot(domain.height());
        HarmonicBasis::new(max_degree, c, r)
    }

    /// Smallest basis with dimension at least `n`.
    pub fn with_dimension(domain: &crate::mesh::Rect, n: usize) -> HarmonicBasis {
        let m = n.saturating_sub(1).div_ceil(2);
        HarmonicBasis::for_domain(domain, m)
    }

    pub fn dimension(&self) -> usize {
        2 * self.max_degree + 1
    }

    /// Degree of each basis function: `[0, 1, 1, 2, 2, ...]`.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0];
        for k in 1..=self.max_degree {
            d.push(k);
            d.push(k);
        }
        d
    }

    /// Evaluates all basis functions at a point by iterated complex powers.
    pub fn eval(&self, p: [f64; 2]) -> Vec<f64> {
        let zx = (p[0] - self.center[0]) / self.radius;
        let zy = (p[1] - self.center[1]) / self.radius;
        let mut out = Vec::with_capacity(self.dimension());
        out.push(1.0);
        let mut re = 1.0f64;
        let mut im = 0.0f64;
        for _ in 1..=self.max_degree {
            let nre = re * zx - im * zy;
            let nim = re * zy + im * zx;
            re = nre;
            im = nim;
            out.push(re);
            out.push(im);
        }
        out
    }

    /// Gradients of all basis functions at a point, from the complex
    /// derivative `d/dz z^k = k z^{k-1}` with the centering scale.
    pub fn eval_grad(&self, p: [f64; 2]) -> Vec<[f64; 2]> {
        let zx = (p[0] - self.center[0]) / self.radius;
        let zy = (p[1] - self.center[1]) / self.radius;
        let mut out = Vec::with_capacity(self.dimension());
        out.push([0.0, 0.0]);
        // w = k z^{k-1}: grad Re z^k = (Re w, -Im w)/r, grad Im z^k = (Im w, Re w)/r
        let mut re = 1.0f64;
        let mut im = 0.0f64;
        for k in 1..=self.max_degree {
            let wre = k as f64 * re / self.radius;
            let wim = k as f64 * im / self.radius;
            out.push([wre, -wim]);
            out.push([wim, wre]);
            let nre = re * zx - im * zy;
            let nim = re * zy + im * zx;
            re = nre;
            im = nim;
        }
        out
    }

    /// Sample matrix `B_ij = basis_j(X_i)`.
    pub fn sample_matrix(&self, locations: &[[f64; 2]]) -> DMatrix<f64> {
        let n = self.dimension();
        let mut b = DMatrix::zeros(locations.len(), n);
        for (i, &p) in locations.iter().enumerate() {
            for (j, v) in self.eval(p).into_iter().enumerate() {
                b[(i, j)] = v;
            }
        }
        b
    }

    /// L2 Gram matrix on the meshed domain by quadrature.
    pub fn l2_gram(&self, mesh: &Mesh) -> DMatrix<f64> {
        let n = self.dimension();
        let quad = QuadratureRule::triangle(6);
        let mut g = DMatrix::zeros(n, n);
        for cell in 0..mesh.n_cells() {
            let verts = mesh.cell_vertices(cell);
            let area = mesh.cell_area(cell);
            for (q, &bary) in quad.points.iter().enumerate() {
                let w = quad.weights[q] * 2.0 * area;
                let x = [
                    bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                    bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
                ];
                let vals = self.eval(x);
                for i in 0..n {
                    for j in 0..n {
                        g[(i, j)] += w * vals[i] * vals[j];
                    }
                }
            }
        }
        g
    }
}

/// Diagonal Gaussian prior in the harmonic basis: precision weights
/// `w_j = (1 + deg_j)^{2 alpha}` by default, with the sample-size rescaling
/// `N^{d/(2 alpha + d)}` multiplying the precision in the normal equations.
#[derive(Clone, Debug)]
pub struct SpectralPrior {
    pub alpha: f64,
    pub weights: Vec<f64>,
    pub rescale: bool,
}

impl SpectralPrior {
    pub fn new(alpha: f64, basis: &HarmonicBasis) -> Result<SpectralPrior> {
        if alpha <= 1.0 {
            return Err(Error::Spectral(format!(
                "prior smoothness must satisfy alpha > 1, got {alpha}"
            )));
        }
        let weights = basis
            .degrees()
            .iter()
            .map(|&d| ((1 + d) as f64).powf(2.0 * alpha))
            .collect();
        Ok(SpectralPrior {
            alpha,
            weights,
            rescale: true,
        })
    }

    pub fn with_weights(alpha: f64, weights: Vec<f64>, rescale: bool) -> Result<SpectralPrior> {
        let mut prev = 0.0;
        for &w in &weights {
            if w <= 0.0 || w < prev {
                return Err(Error::Spectral(
                    "prior weights must be positive and nondecreasing in degree".into(),
                ));
            }
            prev = w;
        }
        Ok(SpectralPrior {
            alpha,
            weights,
            rescale,
        })
    }

    /// The precision rescaling factor `N^{d/(2 alpha + d)}`.
    pub fn lambda(&self, n_samples: usize) -> f64 {
        if self.rescale {
            (n_samples as f64).powf(DIM / (2.0 * self.alpha + DIM))
        } else {
            1.0
        }
    }
}

/// Solves the spectral normal equations for the MAP coefficients.
pub fn solve_spectral_map(
    basis: &HarmonicBasis,
    prior: &SpectralPrior,
    observations: &ObservationSet,
) -> Result<Vec<f64>> {
    let n = basis.dimension();
    if prior.weights.len() != n {
        return Err(Error::Spectral(format!(
            "prior has {} weights for a basis of dimension {n}",
            prior.weights.len()
        )));
    }
    if observations.is_empty() {
        return Err(Error::Spectral("observations must be nonempty".into()));
    }
    if n > observations.len() {
        eprintln!(
            "warning: spectral dimension {n} exceeds sample count {}; the prior alone \
             controls the excess directions",
            observations.len()
        );
    }
    let b = basis.sample_matrix(&observations.locations);
    let lambda = prior.lambda(observations.len());
    let mut g = b.transpose() * &b;
    for (j, &w) in prior.weights.iter().enumerate() {
        g[(j, j)] += lambda * w;
    }
    let rhs = b.transpose() * DVector::from_column_slice(&observations.values);
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::Spectral("regularized normal equations not PD".into()))?;
    Ok(chol.solve(&rhs).iter().cloned().collect())
}

/// Maximum relative violation of Galerkin orthogonality between the fine
/// solution and a coarse solution on a prefix (nested) basis:
/// `<u_f - u_c, v>_{I_N} + lambda_N <u_f - u_c, v>_{C0^{-1}}` over coarse
/// basis functions `v`, relative to the scale of `B^T y`.
pub fn check_galerkin_orthogonality(
    basis: &HarmonicBasis,
    prior: &SpectralPrior,
    observations: &ObservationSet,
    fine: &[f64],
    coarse: &[f64],
) -> Result<f64> {
    let n = basis.dimension();
    if fine.len() != n {
        return Err(Error::Spectral(
            "fine coefficient vector does not match the basis".into(),
        ));
    }
    if coarse.len() > fine.len() {
        return Err(Error::Spectral(
            "coarse basis must be a prefix of the fine basis (nested spaces)".into(),
        ));
    }
    let mut diff = fine.to_vec();
    for (d, c) in diff.iter_mut().zip(coarse) {
        *d -= c;
    }
    let b = basis.sample_matrix(&observations.locations);
    let lambda = prior.lambda(observations.len());
    let bd = &b * DVector::from_column_slice(&diff);
    let btbd = b.transpose() * bd;
    let scale = (b.transpose() * DVector::from_column_slice(&observations.values))
        .abs()
        .max()
        .max(1e-300);
    let mut worst: f64 = 0.0;
    for j in 0..coarse.len() {
        let r = btbd[j] + lambda * prior.weights[j] * diff[j];
        worst = worst.max(r.abs());
    }
    Ok(worst / scale)
}

/// Slack sequence `l_N` for the dimension coupling: `1 / log N` or `N^{-eps}`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackSchedule {
    Log,
    Power(f64),
}

impl SlackSchedule {
    pub fn value(self, n_samples: usize) -> f64 {
        match self {
            SlackSchedule::Log => 1.0 / (n_samples as f64).ln(),
            SlackSchedule::Power(eps) => (n_samples as f64).powf(-eps),
        }
    }
}

/// Dimension coupling `n = ceil((N l_N)^{d/(2 alpha + d)})` with `d = 2`.
pub fn couple_dimension(n_samples: usize, alpha: f64, schedule: SlackSchedule) -> Result<usize> {
    if n_samples < 2 {
        return Err(Error::Spectral("dimension coupling needs N >= 2".into()));
    }
    if alpha <= 1.0 {
        return Err(Error::Spectral(format!(
            "dimension coupling needs alpha > 1, got {alpha}"
        )));
    }
    let l = schedule.value(n_samples);
    let n = (n_samples as f64 * l)
        .powf(DIM / (2.0 * alpha + DIM))
        .ceil();
    Ok((n as usize).max(1))
}

/// Pointwise reconstruction from basis coefficients.
pub fn spectral_eval(basis: &HarmonicBasis, coeffs: &[f64], p: [f64; 2]) -> f64 {
    basis.eval(p).iter().zip(coeffs).map(|(b, c)| b * c).sum()
}

/// L2 error of the reconstruction against an analytic field over the tagged
/// cells of a mesh.
pub fn spectral_l2_error(
    basis: &HarmonicBasis,
    coeffs: &[f64],
    exact: &dyn Fn([f64; 2]) -> f64,
    mesh: &Mesh,
    filter: crate::space::RegionFilter,
) -> f64 {
    let quad = QuadratureRule::triangle(6);
    let mut acc = 0.0;
    for cell in 0..mesh.n_cells() {
        if !filter.admits(mesh.cell_tags[cell]) {
            continue;
        }
        let verts = mesh.cell_vertices(cell);
        let area = mesh.cell_area(cell);
        for (q, &bary) in quad.points.iter().enumerate() {
            let w = quad.weights[q] * 2.0 * area;
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            let d = spectral_eval(basis, coeffs, x) - exact(x);
            acc += w * d * d;
        }
    }
    acc.sqrt()
}

/// L2 and H1-seminorm errors of the reconstruction against an analytic field
/// and gradient over the tagged cells of a mesh.
pub fn spectral_error_norms(
    basis: &HarmonicBasis,
    coeffs: &[f64],
    exact: &dyn Fn([f64; 2]) -> f64,
    exact_grad: &dyn Fn([f64; 2]) -> [f64; 2],
    mesh: &Mesh,
    filter: crate::space::RegionFilter,
) -> (f64, f64) {
    let quad = QuadratureRule::triangle(6);
    let mut l2 = 0.0;
    let mut h1 = 0.0;
    for cell in 0..mesh.n_cells() {
        if !filter.admits(mesh.cell_tags[cell]) {
            continue;
        }
        let verts = mesh.cell_vertices(cell);
        let area = mesh.cell_area(cell);
        for (q, &bary) in quad.points.iter().enumerate() {
            let w = quad.weights[q] * 2.0 * area;
            let x = [
                bary[0] * verts[0][0] + bary[1] * verts[1][0] + bary[2] * verts[2][0],
                bary[0] * verts[0][1] + bary[1] * verts[1][1] + bary[2] * verts[2][1],
            ];
            let d = spectral_eval(basis, coeffs, x) - exact(x);
            l2 += w * d * d;
            let gb = basis.eval_grad(x);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (g, c) in gb.iter().zip(coeffs) {
                gx += g[0] * c;
                gy += g[1] * c;
            }
            let ge = exact_grad(x);
            h1 += w * ((gx - ge[0]).powi(2) + (gy - ge[1]).powi(2));
        }
    }
    (l2.sqrt(), h1.sqrt())
}

/// Writes coefficients as `degree,part,value` CSV.
pub fn write_coefficients_csv(
    basis: &HarmonicBasis,
    coeffs: &[f64],
    w: &mut dyn std::io::Write,
) -> Result<()> {
    writeln!(w, "degree,part,value")?;
    let degrees = basis.degrees();
    for (j, c) in coeffs.iter().enumerate() {
        // the constant counts as the real part of degree 0; thereafter real
        // parts sit at odd indices
        let part = if j == 0 || j % 2 == 1 { "re" } else { "im" };
        writeln!(w, "{},{},{}", degrees[j], part, c)?;
    }
    Ok(())
}
