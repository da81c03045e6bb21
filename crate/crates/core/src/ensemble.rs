//! Monte Carlo sweeps over `F` and noise realizations, power-law fits and the
//! prior-width scan.
//!
//! Realization `i` at the `j`-th `F` value always uses noise stream
//! `j * realizations + i`, so results do not depend on scheduling. Results are
//! collected in `(F, realization)` order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{
    coupling_schedule, crb_sample, heisenberg_bound, run_particle_filter, shotnoise_bound, CrbConfig, CrbNoiseMode,
    EstimationError, ParticleInnovation, ParticleRunConfig, DEFAULT_DELTA,
};
use crate::filters::{run_filter, simulate_truth_record, CouplingParams, FilterKind, TruthModel};
use crate::sde::{NoiseStream, DEFAULT_DT};
use crate::spin::Spin;

/// Largest tolerated fraction of failed realizations.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid scan configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("{failed} of {total} realizations failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("power-law fit needs {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("power-law fit needs positive finite values, got {0}")]
    NonPositive(f64),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanTask {
    Crb,
    Particle,
    CompareFilters,
}

/// Coupling strengths used at each `F`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Coupling {
    /// `M = K = c / (t_final F^alpha)`
    Schedule { c: f64, alpha: f64 },
    Fixed { m: f64, k: f64 },
}

impl Coupling {
    pub fn at(&self, f: f64, t_final: f64) -> (f64, f64) {
        match *self {
            Coupling::Schedule { c, alpha } => coupling_schedule(f, c, alpha, t_final),
            Coupling::Fixed { m, k } => (m, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub task: ScanTask,
    pub f_values: Vec<f64>,
    pub realizations: usize,
    pub coupling: Coupling,
    pub gamma: f64,
    pub b_true: f64,
    pub t_final: f64,
    pub dt: f64,
    pub master_seed: u64,
    pub delta: f64,
    pub crb_mode: CrbNoiseMode,
    pub richardson: bool,
    pub d: f64,
    pub np: usize,
    pub innovation: ParticleInnovation,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
}

impl ScanConfig {
    pub fn new(task: ScanTask, f_values: Vec<f64>, realizations: usize) -> Self {
        Self {
            task,
            f_values,
            realizations,
            coupling: Coupling::Schedule { c: 0.5888, alpha: 0.77 },
            gamma: 1.0,
            b_true: 0.0,
            t_final: 1.0,
            dt: DEFAULT_DT,
            master_seed: 0,
            delta: DEFAULT_DELTA,
            crb_mode: CrbNoiseMode::SharedInnovation,
            richardson: true,
            d: 1e3,
            np: 10_000,
            innovation: ParticleInnovation::Shared,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidConfig(m));
        if self.f_values.is_empty() {
            return bad("F_values must not be empty".into());
        }
        for &f in &self.f_values {
            let spin = Spin::new(f).map_err(|e| EnsembleError::InvalidConfig(e.to_string()))?;
            if f <= 0.0 {
                return bad(format!("F = {f} must be positive"));
            }
            if matches!(self.task, ScanTask::Crb | ScanTask::CompareFilters) {
                spin.check_exact_cap().map_err(|e| EnsembleError::InvalidConfig(e.to_string()))?;
            }
            let (m, k) = self.coupling.at(f, self.t_final);
            CouplingParams::new(m, k).map_err(|e| EnsembleError::InvalidConfig(e.to_string()))?;
        }
        if self.realizations < 2 {
            return bad(format!("realizations = {} must be at least 2", self.realizations));
        }
        if !(self.dt > 0.0 && self.dt <= crate::sde::MAX_DT) {
            return bad(format!("dt = {} must lie in (0, {}]", self.dt, crate::sde::MAX_DT));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final = {} must be positive", self.t_final));
        }
        if !(self.gamma.is_finite() && self.b_true.is_finite()) {
            return bad("gamma and B_true must be finite".into());
        }
        if self.task == ScanTask::Particle && !(self.d > 0.0 && self.np >= 2) {
            return bad(format!("prior needs D > 0 and Np >= 2 (D = {}, Np = {})", self.d, self.np));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn stream_index(&self, f_index: usize, realization: usize) -> u64 {
        (f_index * self.realizations + realization) as u64
    }
}

/// Per-realization output. `value` is the quantity aggregated for the scan:
/// the bound (crb), the posterior standard deviation (particle) or the
/// largest relative filter discrepancy (compare_filters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationOutcome {
    pub f: f64,
    pub realization: usize,
    pub stream_index: u64,
    pub value: f64,
    /// Information (crb) or posterior mean (particle).
    pub secondary: Option<f64>,
    /// Posterior-weighted and truth squeezing parameter (particle).
    pub xi_posterior: Option<f64>,
    pub xi_truth: Option<f64>,
    pub clamp_events: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub f: f64,
    pub m: f64,
    pub k: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub failures: usize,
    /// Bound from the ensemble-averaged information (crb only).
    pub bound_from_mean_information: Option<f64>,
    pub mean_estimate: Option<f64>,
    pub mean_abs_estimate: Option<f64>,
    pub mean_xi_posterior: Option<f64>,
    pub mean_xi_truth: Option<f64>,
}

impl ScanPoint {
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub f: f64,
    pub shotnoise: f64,
    pub heisenberg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanManifest {
    pub config: ScanConfig,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub points: Vec<ScanPoint>,
    /// Absent when fewer than three finite points exist.
    pub fit: Option<PowerLawFit>,
    pub reference: Vec<ReferencePoint>,
    pub outcomes: Vec<RealizationOutcome>,
    pub failures: Vec<String>,
    pub manifest: ScanManifest,
}

/// Least-squares line through `(log10 F, log10 value)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, EnsembleError> {
    if points.len() < 3 {
        return Err(EnsembleError::TooFewPoints { needed: 3, got: points.len() });
    }
    for &(f, v) in points {
        for x in [f, v] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(EnsembleError::NonPositive(x));
            }
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(EnsembleError::TooFewPoints { needed: 3, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit { slope, intercept, r_squared })
}

fn run_one(cfg: &ScanConfig, f_index: usize, realization: usize) -> Result<RealizationOutcome, EstimationError> {
    let f = cfg.f_values[f_index];
    let spin = Spin::new(f)?;
    let (m, k) = cfg.coupling.at(f, cfg.t_final);
    let stream_index = cfg.stream_index(f_index, realization);
    let mut noise = NoiseStream::new(cfg.master_seed, stream_index, cfg.dt)?;
    let mut out = RealizationOutcome {
        f,
        realization,
        stream_index,
        value: f64::NAN,
        secondary: None,
        xi_posterior: None,
        xi_truth: None,
        clamp_events: None,
    };
    match cfg.task {
        ScanTask::Crb => {
            let crb = CrbConfig {
                gamma: cfg.gamma,
                b_center: cfg.b_true,
                t_final: cfg.t_final,
                dt: cfg.dt,
                delta: cfg.delta,
                mode: cfg.crb_mode,
                richardson: cfg.richardson,
                n_realizations: cfg.realizations,
                ..CrbConfig::new(spin, m, k)
            };
            let s = crb_sample(&crb, &mut noise)?;
            out.value = s.bound;
            out.secondary = Some(s.information);
        }
        ScanTask::Particle => {
            let run = ParticleRunConfig {
                gamma: cfg.gamma,
                b_true: cfg.b_true,
                d: cfg.d,
                np: cfg.np,
                dt: cfg.dt,
                t_final: cfg.t_final,
                innovation: cfg.innovation,
                ..ParticleRunConfig::new(spin, m, k)
            };
            let (summary, _) = run_particle_filter(&run, &mut noise)?;
            out.value = summary.estimate.std;
            out.secondary = Some(summary.estimate.mean);
            out.xi_posterior = Some(summary.xi_posterior);
            out.xi_truth = summary.xi_truth;
            out.clamp_events = Some(summary.clamp_events);
        }
        ScanTask::CompareFilters => {
            let p = CouplingParams::new(m, k)?.with_gamma(cfg.gamma);
            let n_steps = (cfg.t_final / cfg.dt).round() as usize;
            let truth = simulate_truth_record(&p, cfg.b_true, spin, &mut noise, n_steps, TruthModel::Full)?;
            let proj = run_filter(&truth, FilterKind::Projection, &p.with_field(cfg.b_true), spin)?;
            out.value = max_relative_error(&proj.pi_fz, &truth.pi_fz, 0.05 * f);
        }
    }
    if !out.value.is_finite() && !(cfg.task == ScanTask::Crb && out.value == f64::INFINITY) {
        return Err(EstimationError::InvalidConfig(format!("non-finite result {}", out.value)));
    }
    Ok(out)
}

/// Largest `|approx - exact| / |exact|` over points with `|exact| > floor`.
pub fn max_relative_error(approx: &[f64], exact: &[f64], floor: f64) -> f64 {
    approx
        .iter()
        .zip(exact)
        .filter(|(_, e)| e.abs() > floor)
        .map(|(a, e)| (a - e).abs() / e.abs())
        .fold(0.0, f64::max)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().any(|v| v.is_infinite()) {
        return (mean, f64::NAN);
    }
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T, EnsembleError> {
    match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EnsembleError::Pool(e.to_string()))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

pub fn run_scan(cfg: &ScanConfig) -> Result<ScanResult, EnsembleError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.f_values.len()).flat_map(|j| (0..cfg.realizations).map(move |i| (j, i))).collect();
    let results: Vec<Result<RealizationOutcome, EstimationError>> =
        with_pool(cfg.workers, || jobs.par_iter().map(|&(j, i)| run_one(cfg, j, i)).collect())?;

    let total = results.len();
    let mut outcomes = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (&(j, i), r) in jobs.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                let msg = format!("F = {}, realization {i}: {e}", cfg.f_values[j]);
                log::warn!("{msg}");
                failures.push(msg);
            }
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(EnsembleError::TooManyFailures {
            failed: failures.len(),
            total,
            first: failures[0].clone(),
        });
    }

    let points: Vec<ScanPoint> = cfg
        .f_values
        .iter()
        .map(|&f| {
            let here: Vec<&RealizationOutcome> = outcomes.iter().filter(|o| o.f == f).collect();
            let values: Vec<f64> = here.iter().map(|o| o.value).collect();
            let (mean, std) = mean_std(&values);
            let (m, k) = cfg.coupling.at(f, cfg.t_final);
            let mut point = ScanPoint {
                f,
                m,
                k,
                mean,
                std,
                n: values.len(),
                failures: cfg.realizations - values.len(),
                bound_from_mean_information: None,
                mean_estimate: None,
                mean_abs_estimate: None,
                mean_xi_posterior: mean_of(here.iter().map(|o| o.xi_posterior)),
                mean_xi_truth: mean_of(here.iter().map(|o| o.xi_truth)),
            };
            match cfg.task {
                ScanTask::Crb => {
                    point.bound_from_mean_information =
                        mean_of(here.iter().map(|o| o.secondary)).map(|info| info.powf(-0.5));
                }
                ScanTask::Particle => {
                    point.mean_estimate = mean_of(here.iter().map(|o| o.secondary));
                    point.mean_abs_estimate = mean_of(here.iter().map(|o| o.secondary.map(f64::abs)));
                }
                ScanTask::CompareFilters => {}
            }
            log::info!("F = {f}: mean {mean:.6e}, std {std:.3e}, n = {}", point.n);
            point
        })
        .collect();

    // The CRB curve is the bound of the ensemble-averaged information.
    let curve = |p: &ScanPoint| match cfg.task {
        ScanTask::Crb => p.bound_from_mean_information.unwrap_or(f64::NAN),
        _ => p.mean,
    };
    let finite: Vec<(f64, f64)> =
        points.iter().map(|p| (p.f, curve(p))).filter(|(_, y)| y.is_finite() && *y > 0.0).collect();
    let fit = if finite.len() >= 3 { Some(fit_power_law(&finite)?) } else { None };
    let reference = cfg
        .f_values
        .iter()
        .map(|&f| ReferencePoint {
            f,
            shotnoise: shotnoise_bound(f, cfg.gamma, cfg.t_final),
            heisenberg: heisenberg_bound(f, cfg.gamma, cfg.t_final),
        })
        .collect();
    Ok(ScanResult {
        points,
        fit,
        reference,
        outcomes,
        failures,
        manifest: ScanManifest { config: cfg.clone(), version: env!("CARGO_PKG_VERSION").to_string() },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub d: f64,
    pub mean_abs_estimate: f64,
    pub mean_estimate: f64,
    pub std_estimate: f64,
    pub mean_posterior_std: f64,
    pub n: usize,
    pub failures: usize,
    /// Goodness of fit of a moment-matched normal density to the stored
    /// posterior.
    pub gaussian_r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasScanResult {
    pub f: f64,
    pub rows: Vec<BiasRow>,
    /// Final posterior `(B_i, p_i)` of realization 0 at every `D`.
    pub posteriors: Vec<Vec<(f64, f64)>>,
    /// Whether mean `|B_est|` at the largest `D` is below that at the smallest.
    pub bias_decreases: bool,
    pub manifest: ScanManifest,
}

/// `r^2` of the normal density with the posterior's mean and variance
/// against the posterior density on its grid, within four standard
/// deviations of the mean.
pub fn gaussian_fit_r_squared(posterior: &[(f64, f64)]) -> f64 {
    if posterior.len() < 2 {
        return f64::NAN;
    }
    let db = posterior[1].0 - posterior[0].0;
    let mean: f64 = posterior.iter().map(|(b, p)| b * p).sum();
    let var: f64 = posterior.iter().map(|(b, p)| p * (b - mean).powi(2)).sum();
    let sigma = var.max(0.0).sqrt();
    if sigma == 0.0 {
        return f64::NAN;
    }
    let window: Vec<(f64, f64)> = posterior
        .iter()
        .filter(|(b, _)| (b - mean).abs() <= 4.0 * sigma)
        .map(|&(b, p)| (b, p / db))
        .collect();
    let norm = 1.0 / (sigma * std::f64::consts::TAU.sqrt());
    let dens_mean = window.iter().map(|w| w.1).sum::<f64>() / window.len() as f64;
    let ss_tot: f64 = window.iter().map(|w| (w.1 - dens_mean).powi(2)).sum();
    let ss_res: f64 = window
        .iter()
        .map(|&(b, d)| (d - norm * (-0.5 * ((b - mean) / sigma).powi(2)).exp()).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return f64::NAN;
    }
    1.0 - ss_res / ss_tot
}

/// Repeats the particle-filter estimate at one `F` for a sequence of prior
/// widths `D`. `base` supplies every other setting; its task, `F` values and
/// `D` are ignored.
pub fn bias_convergence_scan(d_values: &[f64], f: f64, base: &ScanConfig) -> Result<BiasScanResult, EnsembleError> {
    if d_values.is_empty() || d_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EnsembleError::InvalidConfig("D values must be non-empty and increasing".into()));
    }
    let mut cfg = base.clone();
    cfg.task = ScanTask::Particle;
    cfg.f_values = vec![f];
    cfg.validate()?;
    let spin = Spin::new(f).map_err(|e| EnsembleError::InvalidConfig(e.to_string()))?;
    let (m, k) = cfg.coupling.at(f, cfg.t_final);

    let mut rows = Vec::new();
    let mut posteriors = Vec::new();
    for (d_index, &d) in d_values.iter().enumerate() {
        let run = ParticleRunConfig {
            gamma: cfg.gamma,
            b_true: cfg.b_true,
            d,
            np: cfg.np,
            dt: cfg.dt,
            t_final: cfg.t_final,
            innovation: cfg.innovation,
            ..ParticleRunConfig::new(spin, m, k)
        };
        let results: Vec<Result<_, EstimationError>> = with_pool(cfg.workers, || {
            (0..cfg.realizations)
                .into_par_iter()
                .map(|i| {
                    let stream = (d_index * cfg.realizations + i) as u64;
                    let mut noise = NoiseStream::new(cfg.master_seed, stream, cfg.dt)?;
                    let (summary, pe) = run_particle_filter(&run, &mut noise)?;
                    Ok((summary, (i == 0).then(|| pe.posterior())))
                })
                .collect()
        })?;
        let mut estimates = Vec::new();
        let mut stds = Vec::new();
        let mut failures = Vec::new();
        let mut posterior = None;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((s, post)) => {
                    estimates.push(s.estimate.mean);
                    stds.push(s.estimate.std);
                    if post.is_some() {
                        posterior = post;
                    }
                }
                Err(e) => failures.push(format!("D = {d}, realization {i}: {e}")),
            }
        }
        if failures.len() as f64 > MAX_FAILURE_FRACTION * cfg.realizations as f64 {
            return Err(EnsembleError::TooManyFailures {
                failed: failures.len(),
                total: cfg.realizations,
                first: failures[0].clone(),
            });
        }
        let abs: Vec<f64> = estimates.iter().map(|b| b.abs()).collect();
        let (mean_estimate, std_estimate) = mean_std(&estimates);
        let posterior = posterior.unwrap_or_default();
        let row = BiasRow {
            d,
            mean_abs_estimate: mean_std(&abs).0,
            mean_estimate,
            std_estimate,
            mean_posterior_std: mean_std(&stds).0,
            n: estimates.len(),
            failures: failures.len(),
            gaussian_r_squared: gaussian_fit_r_squared(&posterior),
        };
        log::info!("D = {d}: mean |B| {:.4e}, r^2 {:.4}", row.mean_abs_estimate, row.gaussian_r_squared);
        rows.push(row);
        posteriors.push(posterior);
    }
    let bias_decreases = rows.last().unwrap().mean_abs_estimate < rows[0].mean_abs_estimate;
    let mut manifest_cfg = cfg;
    manifest_cfg.d = d_values[0];
    Ok(BiasScanResult {
        f,
        rows,
        posteriors,
        bias_decreases,
        manifest: ScanManifest { config: manifest_cfg, version: env!("CARGO_PKG_VERSION").to_string() },
    })
}
