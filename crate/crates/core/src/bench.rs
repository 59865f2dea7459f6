//! Experiment driver and command-line interface.
//!
//! An experiment couples the sample count `N` to the mesh size `h(N)` (or
//! the spectral dimension `n(N)`), runs seeded Monte-Carlo replicates of the
//! observation model, solves for the MAP estimate, measures errors against
//! the analytic ground truth on the evaluation region, and fits log-log
//! rates. The whole report is a pure function of the configuration,
//! including the seed: replicate seeds derive from the base seed, replicates
//! run in parallel but collect in a fixed order, and wall times are written
//! as zero unless `emit_timings` is set, so report files are byte-identical
//! across runs.

use crate::forms::assemble_data_term;
use crate::mesh::{build_structured_mesh, Rect};
use crate::observe::{derive_seed, draw_observations, sample_locations, NoiseModel};
use crate::solve::{
    assemble_prior, build_system_with_prior, empirical_gram_check, expected_triple_norm_error,
    quadrature_gram_ratio, riesz_residual, solve_map, write_solution_csv, AssembledSystem,
    PriorAssembly,
};
use crate::space::{error_norms, nodal_interpolate, FeSpace, RegionFilter};
use crate::spectral::{
    check_galerkin_orthogonality, couple_dimension, solve_spectral_map, spectral_error_norms,
    HarmonicBasis, SlackSchedule, SpectralPrior,
};
use crate::truth::{builtin_truth, GroundTruth};
use crate::{Error, Result};
use serde::Serialize;
use std::io::Write as _;
use std::sync::Arc;

/// Rule coupling the mesh size to the sample count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `h = c0 (sigma^2 / N)^{1 / (2(alpha - 1 + beta) + d)}`, the rate
    /// balancing prior bias against sampling variance
    Balanced,
    /// fixed mesh size regardless of N (bias-plateau regime)
    FixedH(f64),
    /// balanced rule with `N l_N` in place of `N`
    FixedSlack(SlackSchedule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fem,
    Spectral,
    Both,
}

/// Full experiment description; the report is a pure function of this.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub truth_id: String,
    pub alpha: f64,
    pub beta: u8,
    pub sigma: f64,
    pub domain: Rect,
    pub omega: Rect,
    pub b_region: Rect,
    pub n_schedule: Vec<usize>,
    pub coupling: Coupling,
    pub coupling_c0: f64,
    pub replicates: usize,
    pub seed: u64,
    pub degree: u8,
    pub method: Method,
    pub output: Option<String>,
    pub emit_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            truth_id: "harmonic_exp".into(),
            alpha: 2.0,
            beta: 1,
            sigma: 0.1,
            domain: Rect::UNIT,
            omega: Rect::new(0.25, 0.25, 0.5, 0.5),
            b_region: Rect::new(0.25, 0.25, 0.75, 0.75),
            n_schedule: vec![256, 512, 1024, 2048, 4096],
            coupling: Coupling::Balanced,
            coupling_c0: 1.0,
            replicates: 4,
            seed: 1,
            degree: 1,
            method: Method::Fem,
            output: None,
            emit_timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 1.0 {
            return Err(Error::Config(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if self.beta > 1 {
            return Err(Error::Config(format!(
                "beta must be 0 or 1, got {}",
                self.beta
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be nonnegative".into()));
        }
        if !(self.degree == 1 || self.degree == 2) {
            return Err(Error::Config(format!(
                "degree must be 1 or 2, got {}",
                self.degree
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.n_schedule.is_empty() {
            return Err(Error::Config("n_schedule must be nonempty".into()));
        }
        if self.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "n_schedule must be strictly increasing".into(),
            ));
        }
        builtin_truth(&self.truth_id)?;
        Ok(())
    }

    /// Target mesh size for a sample count: the balancing exponent is
    /// `1 / (2(alpha - 1 + beta) + d)` with `d = 2`.
    pub fn target_h(&self, n_samples: usize) -> f64 {
        let gamma = 2.0 * (self.alpha - 1.0 + self.beta as f64) + 2.0;
        match self.coupling {
            Coupling::Balanced => {
                let ratio = self.sigma * self.sigma / n_samples as f64;
                self.coupling_c0 * ratio.powf(1.0 / gamma)
            }
            Coupling::FixedH(h) => h,
            Coupling::FixedSlack(s) => {
                let ratio = self.sigma * self.sigma / (n_samples as f64 * s.value(n_samples));
                self.coupling_c0 * ratio.powf(1.0 / gamma)
            }
        }
    }

    fn slack(&self) -> SlackSchedule {
        match self.coupling {
            Coupling::FixedSlack(s) => s,
            _ => SlackSchedule::Log,
        }
    }
}

/// Smallest power-of-two multiple of 4 whose cell diameter is at most the
/// target (capped so that accidental configurations cannot demand absurd
/// meshes).
pub fn snap_nx(domain: &Rect, target_h: f64) -> Result<usize> {
    let diag = (domain.width() / 1.0).hypot(domain.height() / 1.0);
    let mut nx = 4usize;
    while diag / nx as f64 > target_h {
        nx *= 2;
        if nx > 1024 {
            return Err(Error::Config(format!(
                "coupling requests nx > 1024 (target h = {target_h:.3e}); \
                 adjust c0, sigma, or the schedule"
            )));
        }
    }
    Ok(nx)
}

/// One solve record; spectral records carry `nx = 0` and `h = 0`.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub n_samples: usize,
    pub h: f64,
    pub nx: usize,
    pub dofs: usize,
    pub replicate: usize,
    pub seed: u64,
    pub l2_b: f64,
    pub h1_b: f64,
    pub l2_omega: f64,
    pub expected_triple_norm: f64,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub spectral: bool,
}

/// Least-squares slope of log error against log N with its standard error.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
}

/// Fits `log e = a + s log N`; replicates at equal `N` are averaged in log
/// space first. Requires three or more distinct sample counts and positive
/// errors.
pub fn fit_rate(records: &[(usize, f64)]) -> Result<SlopeFit> {
    let mut grouped: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for &(n, e) in records {
        if e <= 0.0 || !e.is_finite() {
            return Err(Error::Config(format!(
                "rate fit requires positive finite errors, got {e} at N = {n}"
            )));
        }
        grouped.entry(n).or_default().push(e.ln());
    }
    if grouped.len() < 3 {
        return Err(Error::Config(format!(
            "rate fit requires at least 3 distinct sample counts, got {}",
            grouped.len()
        )));
    }
    let pts: Vec<(f64, f64)> = grouped
        .iter()
        .map(|(&n, logs)| {
            (
                (n as f64).ln(),
                logs.iter().sum::<f64>() / logs.len() as f64,
            )
        })
        .collect();
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let mx = sx / m;
    let my = sy / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let dof = (m - 2.0).max(1.0);
    let stderr = (rss / dof / sxx).sqrt();
    Ok(SlopeFit { slope, stderr })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
}

/// Experiment output: per-run records, fitted slopes, in-run consistency
/// checks, and the configuration echo.
#[derive(Serialize)]
pub struct RateReport {
    pub config: ExperimentConfig,
    pub slopes: std::collections::BTreeMap<String, SlopeFit>,
    pub checks: Vec<CheckOutcome>,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

pub const CSV_HEADER: &str =
    "N,h,nx,dofs,replicate,seed,l2_B,h1_B,l2_omega,expected_triple_norm,wall_time_s";

impl RateReport {
    pub fn write_csv(&self, w: &mut dyn std::io::Write) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            let wall = if self.config.emit_timings {
                r.wall_time_s
            } else {
                0.0
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n_samples,
                r.h,
                r.nx,
                r.dofs,
                r.replicate,
                r.seed,
                r.l2_b,
                r.h1_b,
                r.l2_omega,
                r.expected_triple_norm,
                wall
            )?;
        }
        Ok(())
    }

    pub fn write_json(&self, w: &mut dyn std::io::Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(w)?;
        Ok(())
    }
}

struct FemLevel {
    space_v: Arc<FeSpace>,
    space_w: Arc<FeSpace>,
    prior: Arc<PriorAssembly>,
    nx: usize,
}

fn build_fem_level(config: &ExperimentConfig, truth: &GroundTruth, n: usize) -> Result<FemLevel> {
    let nx = snap_nx(&config.domain, config.target_h(n))?;
    let mesh = Arc::new(build_structured_mesh(
        nx,
        config.domain,
        config.omega,
        config.b_region,
    )?);
    let space_v = FeSpace::new(mesh.clone(), config.degree, false)?;
    let space_w = FeSpace::new(mesh, 1, true)?;
    let prior = Arc::new(assemble_prior(
        &space_v,
        &space_w,
        &truth.f,
        config.alpha,
        config.beta,
    )?);
    Ok(FemLevel {
        space_v,
        space_w,
        prior,
        nx,
    })
}

fn fem_replicate(
    config: &ExperimentConfig,
    truth: &GroundTruth,
    level: &FemLevel,
    n: usize,
    replicate: usize,
) -> Result<RunRecord> {
    let start = std::time::Instant::now();
    let seed = derive_seed(derive_seed(config.seed, n as u64), replicate as u64);
    let locations = sample_locations(n, config.omega, seed);
    let noise = NoiseModel::diagonal(config.sigma)?;
    let obs = draw_observations(&|p| truth.eval(p), locations, noise, seed, &truth.id)?;
    let data = assemble_data_term(&level.space_v, &obs)?;
    let system = build_system_with_prior(
        &level.space_v,
        &level.space_w,
        &level.prior,
        data,
        &obs.values,
    )?;
    let sol = solve_map(&system)?;
    let exact = |p: [f64; 2]| truth.eval(p);
    let exact_grad = |p: [f64; 2]| truth.eval_grad(p);
    let (l2_b, h1_b_semi) = error_norms(&sol.u, &exact, &exact_grad, RegionFilter::BRegion);
    let (l2_omega, _) = error_norms(&sol.u, &exact, &exact_grad, RegionFilter::Omega);
    let etn = expected_triple_norm_error(&system)?;
    Ok(RunRecord {
        n_samples: n,
        h: level.space_v.mesh.h_max,
        nx: level.nx,
        dofs: level.space_v.dof_count() + level.space_w.dof_count(),
        replicate,
        seed,
        l2_b,
        h1_b: (l2_b * l2_b + h1_b_semi * h1_b_semi).sqrt(),
        l2_omega,
        expected_triple_norm: etn,
        wall_time_s: start.elapsed().as_secs_f64(),
        spectral: false,
    })
}

fn spectral_replicate(
    config: &ExperimentConfig,
    truth: &GroundTruth,
    error_mesh: &crate::mesh::Mesh,
    n: usize,
    replicate: usize,
) -> Result<RunRecord> {
    let start = std::time::Instant::now();
    // spectral replicates share the FEM seed stream so method = both reuses
    // one observation set per (N, replicate)
    let seed = derive_seed(derive_seed(config.seed, n as u64), replicate as u64);
    let locations = sample_locations(n, config.omega, seed);
    let noise = NoiseModel::diagonal(config.sigma)?;
    let obs = draw_observations(&|p| truth.eval(p), locations, noise, seed, &truth.id)?;
    let dim = couple_dimension(n, config.alpha, config.slack())?;
    let basis = HarmonicBasis::with_dimension(&config.domain, dim);
    let prior = SpectralPrior::new(config.alpha, &basis)?;
    let coeffs = solve_spectral_map(&basis, &prior, &obs)?;
    let exact = |p: [f64; 2]| truth.eval(p);
    let exact_grad = |p: [f64; 2]| truth.eval_grad(p);
    let (l2_b, h1_semi_b) = spectral_error_norms(
        &basis,
        &coeffs,
        &exact,
        &exact_grad,
        error_mesh,
        RegionFilter::BRegion,
    );
    let (l2_omega, _) = spectral_error_norms(
        &basis,
        &coeffs,
        &exact,
        &exact_grad,
        error_mesh,
        RegionFilter::Omega,
    );
    Ok(RunRecord {
        n_samples: n,
        h: 0.0,
        nx: 0,
        dofs: basis.dimension(),
        replicate,
        seed,
        l2_b,
        h1_b: (l2_b * l2_b + h1_semi_b * h1_semi_b).sqrt(),
        l2_omega,
        // the variance trace identity is a property of the mixed FEM system
        expected_triple_norm: 0.0,
        wall_time_s: start.elapsed().as_secs_f64(),
        spectral: true,
    })
}

/// Runs the configured sweep: for every `N` in the schedule, builds the
/// coupled discretization, draws `replicates` fresh observation sets, solves,
/// records errors over the evaluation and observation regions, and fits
/// log-log slopes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    use rayon::prelude::*;
    config.validate()?;
    let truth = builtin_truth(&config.truth_id)?;
    let mut records: Vec<RunRecord> = Vec::new();
    let mut checks: Vec<CheckOutcome> = Vec::new();

    let run_fem = matches!(config.method, Method::Fem | Method::Both);
    let run_spectral = matches!(config.method, Method::Spectral | Method::Both);

    // fixed quadrature mesh for spectral errors, independent of N
    let spectral_error_mesh = if run_spectral {
        Some(build_structured_mesh(
            32,
            config.domain,
            config.omega,
            config.b_region,
        )?)
    } else {
        None
    };

    let mut coupling_ok = true;
    for &n in &config.n_schedule {
        if run_fem {
            let level = build_fem_level(config, &truth, n)?;
            if let Coupling::Balanced = config.coupling {
                coupling_ok &= balanced_ratio_within_snap_bound(config, &level, n);
            }
            let level_records: Vec<Result<RunRecord>> = (0..config.replicates)
                .into_par_iter()
                .map(|r| fem_replicate(config, &truth, &level, n, r))
                .collect();
            for rec in level_records {
                records.push(rec?);
            }
        }
        if run_spectral {
            let mesh = spectral_error_mesh.as_ref().unwrap();
            let level_records: Vec<Result<RunRecord>> = (0..config.replicates)
                .into_par_iter()
                .map(|r| spectral_replicate(config, &truth, mesh, n, r))
                .collect();
            for rec in level_records {
                records.push(rec?);
            }
        }
    }

    if let Coupling::Balanced = config.coupling {
        checks.push(CheckOutcome {
            name: "balanced_coupling_ratio".into(),
            pass: coupling_ok,
        });
    }

    let mut slopes = std::collections::BTreeMap::new();
    if config.n_schedule.len() >= 3 {
        let fit_field = |name: &str, spectral: bool, field: fn(&RunRecord) -> f64| {
            let pts: Vec<(usize, f64)> = records
                .iter()
                .filter(|r| r.spectral == spectral)
                .map(|r| (r.n_samples, field(r)))
                .collect();
            (!pts.is_empty())
                .then(|| fit_rate(&pts).ok().map(|s| (name.to_string(), s)))
                .flatten()
        };
        let fields: [(&str, fn(&RunRecord) -> f64); 3] = [
            ("l2_B", |r| r.l2_b),
            ("h1_B", |r| r.h1_b),
            ("l2_omega", |r| r.l2_omega),
        ];
        for (name, field) in fields {
            if run_fem {
                if let Some((k, s)) = fit_field(name, false, field) {
                    slopes.insert(k, s);
                }
            }
            if run_spectral {
                if let Some((k, s)) = fit_field(&format!("spectral_{name}"), true, field) {
                    slopes.insert(k, s);
                }
            }
        }
    }

    Ok(RateReport {
        config: config.clone(),
        slopes,
        checks,
        records,
    })
}

/// The two balanced quantities `sigma^2 / (N h^d)` and `h^{2(alpha-1+beta)}`
/// agree up to the nx-snapping and `c0` factors; asserts the exact log-ratio
/// bound `(d + 2 gamma)(ln 2 + |ln c0|)`.
fn balanced_ratio_within_snap_bound(config: &ExperimentConfig, level: &FemLevel, n: usize) -> bool {
    if config.sigma == 0.0 {
        return true;
    }
    let h = level.space_v.mesh.h_max;
    let gamma = config.alpha - 1.0 + config.beta as f64;
    let variance = config.sigma * config.sigma / (n as f64 * h * h);
    let bias = h.powf(2.0 * gamma);
    let log_ratio = (variance / bias).ln().abs();
    let bound =
        (2.0 * gamma + 2.0) * (std::f64::consts::LN_2 + config.coupling_c0.ln().abs()) + 1e-9;
    log_ratio <= bound
}

/// Outcome of the built-in invariant suite run by `ellda check`.
pub struct SuiteOutcome {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteOutcome {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Built-in invariant suite: the variance trace identity against a
/// Monte-Carlo mean, spectral Galerkin orthogonality on nested levels, and
/// the empirical Gram lower-tail experiment.
pub fn run_check_suite(seed: u64, verbose: bool) -> Result<SuiteOutcome> {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| {
        if verbose {
            println!(
                "CHECK {name}: {} ({detail})",
                if pass { "PASS" } else { "FAIL" }
            );
        }
        checks.push(CheckOutcome {
            name: name.into(),
            pass,
        });
    };

    // trace identity on a small system, 200 noise replicates
    let (mean, se, expected) = trace_identity_mc(4, 1, 200, 0.1, 200, seed)?;
    push(
        "trace_identity",
        (mean - expected).abs() <= 3.0 * se,
        format!("mc = {mean:.5e} +- {se:.1e}, trace = {expected:.5e}"),
    );

    // spectral Galerkin orthogonality on 5 random observation sets
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        worst = worst.max(galerkin_violation(derive_seed(seed, 100 + k))?);
    }
    push(
        "galerkin_orthogonality",
        worst <= 1e-9,
        format!("max relative violation = {worst:.2e}"),
    );

    // empirical Gram tail on an 8x8 mesh
    let mesh = Arc::new(build_structured_mesh(
        8,
        Rect::UNIT,
        Rect::new(0.25, 0.25, 0.75, 0.75),
        Rect::new(0.25, 0.25, 0.75, 0.75),
    )?);
    let space = FeSpace::new(mesh, 1, false)?;
    let h = space.mesh.h_max;
    let n_rich = (50.0 / (h * h)).round() as usize;
    let report = empirical_gram_check(&space, n_rich, 60, 0.5, derive_seed(seed, 7))?;
    let quad_ratio = quadrature_gram_ratio(&space)?;
    push(
        "empirical_gram_tail",
        report.failure_rate <= 0.05 && (quad_ratio - 1.0).abs() <= 1e-9,
        format!(
            "failure rate = {:.3} at N = {n_rich}, quadrature ratio = {quad_ratio:.6}",
            report.failure_rate
        ),
    );

    Ok(SuiteOutcome { checks })
}

/// Monte-Carlo estimate of the expected squared triple-norm error against
/// the exact trace value; returns `(mc_mean, mc_stderr, trace_value)`.
pub fn trace_identity_mc(
    nx: usize,
    degree: u8,
    n_samples: usize,
    sigma: f64,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    use rayon::prelude::*;
    let truth = builtin_truth("harmonic_exp")?;
    let mesh = Arc::new(build_structured_mesh(
        nx,
        Rect::UNIT,
        Rect::new(0.25, 0.25, 0.75, 0.75),
        Rect::new(0.25, 0.25, 0.75, 0.75),
    )?);
    let space_v = FeSpace::new(mesh.clone(), degree, false)?;
    let space_w = FeSpace::new(mesh, 1, true)?;
    let prior = Arc::new(assemble_prior(&space_v, &space_w, &truth.f, 2.0, 1)?);
    let locations = sample_locations(n_samples, space_v.mesh.omega, seed);
    let noise = NoiseModel::diagonal(sigma)?;

    // conditional mean: solve against noise-free data at fixed locations
    let exact_values: Vec<f64> = locations.iter().map(|&p| truth.eval(p)).collect();
    let clean = assemble_data_term(
        &space_v,
        &crate::observe::ObservationSet {
            locations: locations.clone(),
            values: exact_values.clone(),
            noise: noise.clone(),
            seed,
            truth_id: truth.id.clone(),
        },
    )?;
    let base_system = build_system_with_prior(&space_v, &space_w, &prior, clean, &exact_values)?;
    let u_mean = solve_map(&base_system)?.u;
    let expected = expected_triple_norm_error(&base_system)?;

    let vals: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let obs = draw_observations(
                &|p| truth.eval(p),
                locations.clone(),
                noise.clone(),
                derive_seed(seed, 1000 + r as u64),
                &truth.id,
            )?;
            let data = assemble_data_term(&space_v, &obs)?;
            let sys = build_system_with_prior(&space_v, &space_w, &prior, data, &obs.values)?;
            let sol = solve_map(&sys)?;
            let diff: Vec<f64> = sol
                .u
                .coeffs
                .iter()
                .zip(&u_mean.coeffs)
                .map(|(a, b)| a - b)
                .collect();
            sys.triple_norm_sq(&diff)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok((mean, (var / m).sqrt(), expected))
}

fn galerkin_violation(seed: u64) -> Result<f64> {
    let truth = builtin_truth("harmonic_exp")?;
    let omega = Rect::new(0.25, 0.25, 0.75, 0.75);
    let locations = sample_locations(300, omega, seed);
    let obs = draw_observations(
        &|p| truth.eval(p),
        locations,
        NoiseModel::diagonal(0.2)?,
        seed,
        &truth.id,
    )?;
    let fine = HarmonicBasis::for_domain(&Rect::UNIT, 6);
    let prior = SpectralPrior::new(2.0, &fine)?;
    let cf = solve_spectral_map(&fine, &prior, &obs)?;
    let coarse = HarmonicBasis::for_domain(&Rect::UNIT, 3);
    let coarse_prior = SpectralPrior {
        alpha: prior.alpha,
        weights: prior.weights[..coarse.dimension()].to_vec(),
        rescale: true,
    };
    let cc = solve_spectral_map(&coarse, &coarse_prior, &obs)?;
    check_galerkin_orthogonality(&fine, &prior, &obs, &cf, &cc)
}

// ---------------------------------------------------------------------------
// flat key = value configuration files
// ---------------------------------------------------------------------------

fn parse_rect(value: &str, line: usize) -> Result<Rect> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!(
            "line {line}: rectangle needs 'xmin,ymin,xmax,ymax', got '{value}'"
        )));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("line {line}: '{p}' is not a number")))
        })
        .collect::<Result<_>>()?;
    Ok(Rect::new(nums[0], nums[1], nums[2], nums[3]))
}

/// Parses the flat `key = value` configuration format. Lines starting with
/// `#` are comments; unknown keys are errors with their line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line_no}: expected 'key = value', got '{line}'"
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad_num =
            |what: &str| Error::Config(format!("line {line_no}: {what} is not valid: '{value}'"));
        match key {
            "truth_id" => config.truth_id = value.to_string(),
            "alpha" => config.alpha = value.parse().map_err(|_| bad_num("alpha"))?,
            "beta" => config.beta = value.parse().map_err(|_| bad_num("beta"))?,
            "sigma" => config.sigma = value.parse().map_err(|_| bad_num("sigma"))?,
            "noise" => {
                if value != "diagonal" {
                    return Err(Error::Config(format!(
                        "line {line_no}: only the 'diagonal' noise model is configurable \
                         from files"
                    )));
                }
            }
            "domain" => config.domain = parse_rect(value, line_no)?,
            "omega" => config.omega = parse_rect(value, line_no)?,
            "b_region" => config.b_region = parse_rect(value, line_no)?,
            "n_schedule" => {
                config.n_schedule = value
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|_| bad_num("n_schedule entry"))
                    })
                    .collect::<Result<_>>()?;
            }
            "coupling" => {
                config.coupling = match value {
                    "balanced" => Coupling::Balanced,
                    v if v.starts_with("fixed_h:") => {
                        let h = v["fixed_h:".len()..]
                            .trim()
                            .parse()
                            .map_err(|_| bad_num("fixed_h value"))?;
                        Coupling::FixedH(h)
                    }
                    "fixed_slack:log" => Coupling::FixedSlack(SlackSchedule::Log),
                    v if v.starts_with("fixed_slack:power:") => {
                        let eps = v["fixed_slack:power:".len()..]
                            .trim()
                            .parse()
                            .map_err(|_| bad_num("power slack exponent"))?;
                        Coupling::FixedSlack(SlackSchedule::Power(eps))
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "line {line_no}: unknown coupling '{other}' (balanced, fixed_h:<h>, \
                             fixed_slack:log, fixed_slack:power:<eps>)"
                        )))
                    }
                };
            }
            "coupling_c0" => {
                config.coupling_c0 = value.parse().map_err(|_| bad_num("coupling_c0"))?
            }
            "replicates" => config.replicates = value.parse().map_err(|_| bad_num("replicates"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad_num("seed"))?,
            "degree" => config.degree = value.parse().map_err(|_| bad_num("degree"))?,
            "method" => {
                config.method = match value {
                    "fem" => Method::Fem,
                    "spectral" => Method::Spectral,
                    "both" => Method::Both,
                    other => {
                        return Err(Error::Config(format!(
                            "line {line_no}: unknown method '{other}' (fem, spectral, both)"
                        )))
                    }
                };
            }
            "output" => config.output = Some(value.to_string()),
            "emit_timings" => {
                config.emit_timings = value
                    .parse()
                    .map_err(|_| bad_num("emit_timings (true/false)"))?
            }
            other => {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown key '{other}'"
                )))
            }
        }
    }
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// command-line interface
// ---------------------------------------------------------------------------

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ellda",
    about = "Stabilized FEM and spectral MAP estimation for elliptic data assimilation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment described by a config file and write its report
    Run {
        /// path to a flat key = value config file
        #[arg(long)]
        config: std::path::PathBuf,
    },
    /// Run the built-in invariant suite (trace identity, Galerkin
    /// orthogonality, empirical Gram tail)
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Nodal interpolation rate study over four refinements
    InterpRates {
        /// output CSV path (stdout when omitted)
        #[arg(long)]
        output: Option<std::path::PathBuf>,
    },
    /// Solve once at a given sample count and dump the field as CSV
    ExportSolution {
        #[arg(long)]
        config: std::path::PathBuf,
        /// sample count for the single solve
        #[arg(long = "N", short = 'N')]
        n: usize,
        /// which field to dump: the estimate `u` or the residual
        /// representative `z`
        #[arg(long, default_value = "u")]
        field: String,
        /// output CSV path (stdout when omitted)
        #[arg(long)]
        output: Option<std::path::PathBuf>,
    },
}

/// CLI entry point; returns the process exit code (0 success, 1 runtime
/// failure, 2 usage or configuration error).
pub fn cli_main(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownTruth(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", config.display()))
            })?;
            let cfg = parse_config(&text)?;
            let report = run_experiment(&cfg)?;
            let prefix = cfg
                .output
                .clone()
                .unwrap_or_else(|| "ellda_report".to_string());
            let csv_path = format!("{prefix}.csv");
            let json_path = format!("{prefix}.json");
            let mut csv = std::fs::File::create(&csv_path)?;
            report.write_csv(&mut csv)?;
            let mut json = std::fs::File::create(&json_path)?;
            report.write_json(&mut json)?;
            println!(
                "wrote {csv_path} and {json_path} ({} records)",
                report.records.len()
            );
            for (name, fit) in &report.slopes {
                println!("slope {name}: {:+.4} (stderr {:.4})", fit.slope, fit.stderr);
            }
            Ok(0)
        }
        Command::Check { seed } => {
            let outcome = run_check_suite(seed, true)?;
            Ok(if outcome.all_pass() { 0 } else { 1 })
        }
        Command::InterpRates { output } => {
            let table = interpolation_rate_study()?;
            match output {
                Some(path) => {
                    let mut f = std::fs::File::create(path)?;
                    f.write_all(table.as_bytes())?;
                }
                None => print!("{table}"),
            }
            Ok(0)
        }
        Command::ExportSolution {
            config,
            n,
            field,
            output,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", config.display()))
            })?;
            let cfg = parse_config(&text)?;
            let truth = builtin_truth(&cfg.truth_id)?;
            let level = build_fem_level(&cfg, &truth, n)?;
            let seed = derive_seed(derive_seed(cfg.seed, n as u64), 0);
            let locations = sample_locations(n, cfg.omega, seed);
            let noise = NoiseModel::diagonal(cfg.sigma)?;
            let obs = draw_observations(&|p| truth.eval(p), locations, noise, seed, &truth.id)?;
            let data = assemble_data_term(&level.space_v, &obs)?;
            let system = build_system_with_prior(
                &level.space_v,
                &level.space_w,
                &level.prior,
                data,
                &obs.values,
            )?;
            let sol = solve_map(&system)?;
            let target = match field.as_str() {
                "u" => &sol.u,
                "z" => &sol.z,
                other => {
                    return Err(Error::Config(format!(
                        "unknown field '{other}' (expected u or z)"
                    )))
                }
            };
            match output {
                Some(path) => {
                    let mut f = std::fs::File::create(path)?;
                    write_solution_csv(target, &mut f)?;
                }
                None => {
                    let mut stdout = std::io::stdout();
                    write_solution_csv(target, &mut stdout)?;
                }
            }
            Ok(0)
        }
    }
}

/// Nodal interpolation errors of `e^x cos y` over four refinements for P1
/// and P2, with fitted slopes; returns the CSV text.
pub fn interpolation_rate_study() -> Result<String> {
    let truth = builtin_truth("harmonic_exp")?;
    let mut out = String::from("degree,nx,h,l2_error,h1_error,l2_slope,h1_slope\n");
    for degree in [1u8, 2] {
        let mut rows = Vec::new();
        for nx in [8usize, 16, 32, 64] {
            let mesh = Arc::new(build_structured_mesh(
                nx,
                Rect::UNIT,
                Rect::new(0.25, 0.25, 0.75, 0.75),
                Rect::new(0.25, 0.25, 0.75, 0.75),
            )?);
            let space = FeSpace::new(mesh, degree, false)?;
            let interp = nodal_interpolate(&space, &|p| truth.eval(p))?;
            let (l2, h1) = error_norms(
                &interp,
                &|p| truth.eval(p),
                &|p| truth.eval_grad(p),
                RegionFilter::All,
            );
            rows.push((nx, space.mesh.h_max, l2, h1));
        }
        // slopes against h (equivalently against nx with flipped sign)
        let l2_fit = fit_rate(&rows.iter().map(|r| (r.0, r.2)).collect::<Vec<_>>())?;
        let h1_fit = fit_rate(&rows.iter().map(|r| (r.0, r.3)).collect::<Vec<_>>())?;
        for (nx, h, l2, h1) in rows {
            out.push_str(&format!(
                "{degree},{nx},{h},{l2},{h1},{},{}\n",
                -l2_fit.slope, -h1_fit.slope
            ));
        }
    }
    Ok(out)
}

/// Interpolation-rate slopes (positive, against refinement) per degree,
/// as `(degree, l2_slope, h1_slope)`.
pub fn interpolation_rate_slopes() -> Result<Vec<(u8, f64, f64)>> {
    let table = interpolation_rate_study()?;
    let mut out = Vec::new();
    for degree in [1u8, 2] {
        for line in table.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[0] == degree.to_string() {
                out.push((
                    degree,
                    cols[5].parse::<f64>().unwrap(),
                    cols[6].parse::<f64>().unwrap(),
                ));
                break;
            }
        }
    }
    Ok(out)
}

/// Relative data misfit drop over the last three schedule points; used by
/// the bias-plateau experiments.
pub fn tail_slope(records: &[RunRecord], field: fn(&RunRecord) -> f64) -> Result<f64> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n_samples).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 3 {
        return Err(Error::Config(
            "tail slope needs at least 3 sample counts".into(),
        ));
    }
    let tail = &ns[ns.len() - 3..];
    let pts: Vec<(usize, f64)> = records
        .iter()
        .filter(|r| tail.contains(&r.n_samples))
        .map(|r| (r.n_samples, field(r)))
        .collect();
    Ok(fit_rate(&pts)?.slope)
}

/// Convenience wrapper used by tests: run a config and verify the saddle
/// residual and Riesz identity on one fresh solve.
pub fn verify_residuals_once(config: &ExperimentConfig, n: usize) -> Result<(f64, f64)> {
    let truth = builtin_truth(&config.truth_id)?;
    let level = build_fem_level(config, &truth, n)?;
    let seed = derive_seed(config.seed, 0xABCD);
    let locations = sample_locations(n, config.omega, seed);
    let obs = draw_observations(
        &|p| truth.eval(p),
        locations,
        NoiseModel::diagonal(config.sigma)?,
        seed,
        &truth.id,
    )?;
    let data = assemble_data_term(&level.space_v, &obs)?;
    let system = build_system_with_prior(
        &level.space_v,
        &level.space_w,
        &level.prior,
        data,
        &obs.values,
    )?;
    let sol = solve_map(&system)?;
    let riesz = riesz_residual(&system, &sol, 20, derive_seed(seed, 1));
    Ok((sol.residual_norm, riesz))
}

/// Builds an [`AssembledSystem`] for one replicate of a config; exposed for
/// the acceptance suite.
pub fn build_replicate_system(
    config: &ExperimentConfig,
    n: usize,
    replicate: usize,
) -> Result<(AssembledSystem, Vec<f64>)> {
    let truth = builtin_truth(&config.truth_id)?;
    let level = build_fem_level(config, &truth, n)?;
    let seed = derive_seed(derive_seed(config.seed, n as u64), replicate as u64);
    let locations = sample_locations(n, config.omega, seed);
    let obs = draw_observations(
        &|p| truth.eval(p),
        locations,
        NoiseModel::diagonal(config.sigma)?,
        seed,
        &truth.id,
    )?;
    let data = assemble_data_term(&level.space_v, &obs)?;
    let values = obs.values.clone();
    let system = build_system_with_prior(
        &level.space_v,
        &level.space_w,
        &level.prior,
        data,
        &obs.values,
    )?;
    Ok((system, values))
}
