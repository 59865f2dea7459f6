//! Random observation model: i.i.d. uniform sample locations on the
//! observation window and additive Gaussian noise.
//!
//! Everything is a pure function of explicit 64-bit seeds. Replicate `r` of
//! an experiment derives its seed as `derive_seed(base, r)` (a SplitMix64
//! hash), so runs are bit-reproducible and replicates are independent.
//! Locations and noise use separate sub-streams of the replicate seed;
//! drawing `n` locations therefore yields a prefix of drawing `2n` with the
//! same seed, which gives nested sample sets for free.

use crate::mesh::Rect;
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Observation noise covariance: either `sigma^2 I` or a dense SPD matrix
/// with eigenvalues confined to a configured interval.
///
/// A diagonal scale of zero means exact (noise-free) observations; data
/// misfits then carry unit weight.
#[derive(Clone)]
pub enum NoiseModel {
    Diagonal {
        sigma: f64,
    },
    Dense {
        matrix: DMatrix<f64>,
        /// Cholesky factor of the covariance, for drawing correlated noise
        chol: DMatrix<f64>,
    },
}

impl NoiseModel {
    pub fn diagonal(sigma: f64) -> Result<NoiseModel> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::Observation(format!(
                "noise scale must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(NoiseModel::Diagonal { sigma })
    }

    /// Validates that `matrix` is SPD with eigenvalues in
    /// `[sigma_min_sq, sigma_max_sq]`.
    pub fn dense(matrix: DMatrix<f64>, sigma_min_sq: f64, sigma_max_sq: f64) -> Result<NoiseModel> {
        if !matrix.is_square() {
            return Err(Error::Observation("noise covariance must be square".into()));
        }
        let sym_defect = (&matrix - matrix.transpose()).abs().max();
        if sym_defect > 1e-10 * matrix.abs().max().max(1.0) {
            return Err(Error::Observation(
                "noise covariance must be symmetric".into(),
            ));
        }
        let eig = matrix.clone().symmetric_eigen();
        let min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        if min < sigma_min_sq - 1e-12 || max > sigma_max_sq + 1e-12 {
            return Err(Error::Observation(format!(
                "noise covariance eigenvalues [{min:.3e}, {max:.3e}] leave the configured \
                 interval [{sigma_min_sq:.3e}, {sigma_max_sq:.3e}]"
            )));
        }
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Observation("noise covariance is not SPD".into()))?
            .l();
        Ok(NoiseModel::Dense { matrix, chol })
    }

    /// The scalar scale knob: sigma for the diagonal model; dense models
    /// do not expose one.
    pub fn sigma(&self) -> Option<f64> {
        match self {
            NoiseModel::Diagonal { sigma } => Some(*sigma),
            NoiseModel::Dense { .. } => None,
        }
    }
}

/// One draw of the observation model: locations, noisy values, and the
/// generating noise model and seed.
#[derive(Clone)]
pub struct ObservationSet {
    pub locations: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub noise: NoiseModel,
    pub seed: u64,
    pub truth_id: String,
}

/// SplitMix64 hash step.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives the seed of replicate (or sub-stream) `index` from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

const LOCATION_STREAM: u64 = 0x4C4F43;
const NOISE_STREAM: u64 = 0x4E4F49;

/// Draws `n_samples` i.i.d. uniform locations on the closed window.
/// Deterministic given the seed.
pub fn sample_locations(n_samples: usize, omega: Rect, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, LOCATION_STREAM));
    (0..n_samples)
        .map(|_| {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            [
                omega.xmin + x * omega.width(),
                omega.ymin + y * omega.height(),
            ]
        })
        .collect()
}

/// Draws `y_i = truth(X_i) + eps_i` with `eps ~ N(0, Sigma)`.
///
/// With the identity as dense covariance, the draw coincides bit-for-bit
/// with the diagonal model at unit scale: both consume one standard normal
/// per sample from the same noise sub-stream.
pub fn draw_observations(
    truth: &dyn Fn([f64; 2]) -> f64,
    locations: Vec<[f64; 2]>,
    noise: NoiseModel,
    seed: u64,
    truth_id: &str,
) -> Result<ObservationSet> {
    let n = locations.len();
    let mut values = Vec::with_capacity(n);
    for &p in &locations {
        let v = truth(p);
        if !v.is_finite() {
            return Err(Error::Observation(format!(
                "ground truth not finite at sample ({}, {})",
                p[0], p[1]
            )));
        }
        values.push(v);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, NOISE_STREAM));
    match &noise {
        NoiseModel::Diagonal { sigma } => {
            for v in values.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        NoiseModel::Dense { chol, .. } => {
            if chol.nrows() != n {
                return Err(Error::Observation(format!(
                    "noise covariance dimension {} does not match sample count {n}",
                    chol.nrows()
                )));
            }
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let corr = chol * nalgebra::DVector::from_column_slice(&z);
            for (v, e) in values.iter_mut().zip(corr.iter()) {
                *v += e;
            }
        }
    }
    Ok(ObservationSet {
        locations,
        values,
        noise,
        seed,
        truth_id: truth_id.to_string(),
    })
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Writes `x,y_coord,value` rows with the fixed header.
    pub fn write_csv(&self, w: &mut dyn std::io::Write) -> Result<()> {
        writeln!(w, "x,y_coord,value")?;
        for (p, v) in self.locations.iter().zip(&self.values) {
            writeln!(w, "{},{},{}", p[0], p[1], v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OMEGA: Rect = Rect {
        xmin: 0.25,
        ymin: 0.25,
        xmax: 0.75,
        ymax: 0.75,
    };

    #[test]
    fn empty_and_deterministic() {
        assert!(sample_locations(0, OMEGA, 1).is_empty());
        let a = sample_locations(100, OMEGA, 11);
        let b = sample_locations(100, OMEGA, 11);
        assert_eq!(a, b);
        let c = sample_locations(100, OMEGA, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn locations_prefix_stable_in_n() {
        let a = sample_locations(50, OMEGA, 3);
        let b = sample_locations(100, OMEGA, 3);
        assert_eq!(a[..], b[..50]);
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        // per-axis: mean of uniform on [0.25, 0.75] is 0.5 with sd
        // width/sqrt(12); allow 3 standard errors
        let n = 100_000;
        let locs = sample_locations(n, OMEGA, 2024);
        let bound = 3.0 * (0.5 / (12.0f64).sqrt()) / (n as f64).sqrt();
        for axis in 0..2 {
            let mean = locs.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            assert!(
                (mean - 0.5).abs() <= bound,
                "axis {axis} mean {mean} outside CLT bound {bound}"
            );
        }
        for p in &locs {
            assert!(OMEGA.contains(*p));
        }
    }

    #[test]
    fn noise_free_draws_are_exact() {
        let locs = sample_locations(32, OMEGA, 5);
        let obs = draw_observations(
            &|p| p[0] * p[1],
            locs.clone(),
            NoiseModel::diagonal(0.0).unwrap(),
            5,
            "t",
        )
        .unwrap();
        for (p, v) in locs.iter().zip(&obs.values) {
            assert_eq!(*v, p[0] * p[1]);
        }
    }

    #[test]
    fn unit_noise_sample_variance_concentrates() {
        // chi-square concentration: sample variance of 1e5 standard normals
        // lies in [0.97, 1.03]
        let n = 100_000;
        let locs = sample_locations(n, OMEGA, 7);
        let obs =
            draw_observations(&|_| 0.0, locs, NoiseModel::diagonal(1.0).unwrap(), 7, "t").unwrap();
        let mean = obs.values.iter().sum::<f64>() / n as f64;
        let var = obs
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        assert!((0.97..=1.03).contains(&var), "sample variance {var}");
    }

    #[test]
    fn dense_identity_matches_diagonal_unit_stream() {
        let locs = sample_locations(16, OMEGA, 99);
        let diag = draw_observations(
            &|p| p[0],
            locs.clone(),
            NoiseModel::diagonal(1.0).unwrap(),
            99,
            "t",
        )
        .unwrap();
        let dense = draw_observations(
            &|p| p[0],
            locs,
            NoiseModel::dense(DMatrix::identity(16, 16), 0.5, 2.0).unwrap(),
            99,
            "t",
        )
        .unwrap();
        for (a, b) in diag.values.iter().zip(&dense.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_noise_validation() {
        // non-SPD rejected
        let mut m = DMatrix::identity(4, 4);
        m[(0, 0)] = -1.0;
        assert!(NoiseModel::dense(m, 0.0, 2.0).is_err());
        // eigenvalues outside the configured interval rejected
        let m = DMatrix::identity(4, 4) * 5.0;
        assert!(NoiseModel::dense(m, 0.5, 2.0).is_err());
    }

    #[test]
    fn csv_has_fixed_header() {
        let obs = draw_observations(
            &|_| 1.0,
            sample_locations(2, OMEGA, 1),
            NoiseModel::diagonal(0.0).unwrap(),
            1,
            "t",
        )
        .unwrap();
        let mut buf = Vec::new();
        obs.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y_coord,value\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
