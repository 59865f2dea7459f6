//! Analytic ground-truth fields with known smoothness and known source
//! `f = -Lap u`, for manufactured-solution experiments.

use crate::forms::SourceTerm;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

type Field = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
type GradField = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Analytic ground truth: the field, its gradient (for H1 errors), the
/// source `f = -Lap u`, a nominal Sobolev smoothness index, and whether the
/// field is harmonic.
#[derive(Clone)]
pub struct GroundTruth {
    pub id: String,
    pub u: Field,
    pub grad: GradField,
    pub f: SourceTerm,
    /// nominal Sobolev index; infinity for entire functions
    pub smoothness_alpha: f64,
    pub is_harmonic: bool,
}

impl GroundTruth {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        (self.u)(p)
    }

    pub fn eval_grad(&self, p: [f64; 2]) -> [f64; 2] {
        (self.grad)(p)
    }
}

/// Catalog ids accepted by [`builtin_truth`].
pub const BUILTIN_IDS: [&str; 4] = [
    "harmonic_poly_2",
    "harmonic_exp",
    "fractional_corner",
    "poisson_bump",
];

/// Returns a catalog ground truth by id.
pub fn builtin_truth(id: &str) -> Result<GroundTruth> {
    match id {
        "harmonic_poly_2" => Ok(GroundTruth {
            id: id.into(),
            u: Arc::new(|p| p[0] * p[0] - p[1] * p[1]),
            grad: Arc::new(|p| [2.0 * p[0], -2.0 * p[1]]),
            f: SourceTerm::Zero,
            smoothness_alpha: f64::INFINITY,
            is_harmonic: true,
        }),
        "harmonic_exp" => Ok(GroundTruth {
            id: id.into(),
            u: Arc::new(|p| p[0].exp() * p[1].cos()),
            grad: Arc::new(|p| [p[0].exp() * p[1].cos(), -p[0].exp() * p[1].sin()]),
            f: SourceTerm::Zero,
            smoothness_alpha: f64::INFINITY,
            is_harmonic: true,
        }),
        "fractional_corner" => Ok(fractional_corner(1.5, [-0.25, -0.25])),
        "poisson_bump" => {
            let pi = std::f64::consts::PI;
            Ok(GroundTruth {
                id: id.into(),
                u: Arc::new(move |p| (pi * p[0]).sin() * (pi * p[1]).sin()),
                grad: Arc::new(move |p| {
                    [
                        pi * (pi * p[0]).cos() * (pi * p[1]).sin(),
                        pi * (pi * p[0]).sin() * (pi * p[1]).cos(),
                    ]
                }),
                f: SourceTerm::field(move |p| {
                    2.0 * pi * pi * (pi * p[0]).sin() * (pi * p[1]).sin()
                }),
                smoothness_alpha: f64::INFINITY,
                is_harmonic: false,
            })
        }
        other => Err(Error::UnknownTruth(other.to_string())),
    }
}

/// `u = Re((z - z0)^gamma)` with the branch point `z0` outside the closed
/// domain. Harmonic on the domain; the distance of `z0` to the domain sets
/// the scale of high-order derivatives, so `gamma` acts as an effective
/// smoothness knob at fixed evaluability.
pub fn fractional_corner(gamma: f64, z0: [f64; 2]) -> GroundTruth {
    let u = move |p: [f64; 2]| {
        let dx = p[0] - z0[0];
        let dy = p[1] - z0[1];
        let r = dx.hypot(dy);
        let theta = dy.atan2(dx);
        r.powf(gamma) * (gamma * theta).cos()
    };
    // d/dz z^gamma = gamma z^{gamma-1}: u_x = Re(w), u_y = -Im(w)
    let grad = move |p: [f64; 2]| {
        let dx = p[0] - z0[0];
        let dy = p[1] - z0[1];
        let r = dx.hypot(dy);
        let theta = dy.atan2(dx);
        let mag = gamma * r.powf(gamma - 1.0);
        [
            mag * ((gamma - 1.0) * theta).cos(),
            -mag * ((gamma - 1.0) * theta).sin(),
        ]
    };
    GroundTruth {
        id: format!("fractional_corner(gamma={gamma})"),
        u: Arc::new(u),
        grad: Arc::new(grad),
        f: SourceTerm::Zero,
        smoothness_alpha: gamma + 1.0,
        is_harmonic: true,
    }
}

/// Central finite-difference Laplacian with step 1e-4.
pub fn fd_laplacian(u: &dyn Fn([f64; 2]) -> f64, p: [f64; 2]) -> f64 {
    let h = 1e-4;
    (u([p[0] + h, p[1]]) + u([p[0] - h, p[1]]) + u([p[0], p[1] + h]) + u([p[0], p[1] - h])
        - 4.0 * u(p))
        / (h * h)
}

/// Verifies `-Lap u = f` (or harmonicity when `f = 0`) at `count` random
/// interior points of the unit square, to 1e-5 relative against a local
/// scale.
pub fn verify_pde_consistency(truth: &GroundTruth, count: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..count {
        let p = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let lap = fd_laplacian(&|q| truth.eval(q), p);
        let f = truth.f.eval(p);
        let scale = truth.eval(p).abs().max(f.abs()).max(1.0);
        let residual = (lap + f).abs();
        if residual > 1e-5 * scale.max(lap.abs()) {
            return Err(Error::Assembly(format!(
                "PDE consistency violated for {} at ({}, {}): -Lap u = {:.6e}, f = {:.6e}",
                truth.id, p[0], p[1], -lap, f
            )));
        }
    }
    Ok(())
}
