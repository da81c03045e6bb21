//! Field estimation: finite-difference Cramér-Rao bounds from co-evolved
//! exact filters, reference sensitivity curves, and a quantum particle filter
//! over a fixed grid of field hypotheses whose conditional states follow the
//! Gaussian projection filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{
    projection_step, run_filter, simulate_truth_record, sse_step_with_norm, CouplingParams, FilterError,
    FilterKind, ProjectionCoefficients, TruthModel,
};
use crate::sde::{NoiseStream, SdeError, MAX_DT};
use crate::spin::{build_collective_ops, coherent_state_x, GaussianState, Spin, SpinError, StateVector};

pub const DEFAULT_DELTA: f64 = 1e-4;
/// `tr[rho D^2]` below this, with `D` the undivided difference, means the
/// finite difference drowned in rounding noise.
pub const MIN_INFORMATION: f64 = 1e-20;
pub const RICHARDSON_TOLERANCE: f64 = 0.01;
/// Largest tolerated fraction of particle-steps that needed a weight clamp.
pub const MAX_CLAMP_RATE: f64 = 1e-3;
/// Particles above this fraction of the largest weight count as alive.
pub const DEGENERACY_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("finite-difference step too small: information {0:e} is below numerical noise")]
    DeltaTooSmall(f64),
    #[error("bound at delta ({full:e}) and delta/2 ({half:e}) differ by more than 1%")]
    RichardsonMismatch { full: f64, half: f64 },
    #[error("every particle weight was clamped to zero at step {step}")]
    DegenerateWeights { step: usize },
    #[error("non-finite value in particle filter at step {step}")]
    NonFinite { step: usize },
    #[error("weight clamp rate {rate:e} exceeds {MAX_CLAMP_RATE:e}; reduce dt")]
    ClampRateExceeded { rate: f64 },
    #[error("estimator slope {0:e} is too small to correct units")]
    UninformativeEstimator(f64),
    #[error("need at least {needed} distinct field values, got {got}")]
    InsufficientData { needed: usize, got: usize },
}

/// `1 / (gamma t sqrt(2F))`
pub fn shotnoise_bound(f: f64, gamma: f64, t: f64) -> f64 {
    1.0 / (gamma * t * (2.0 * f).sqrt())
}

/// `1 / (2 gamma t F)`
pub fn heisenberg_bound(f: f64, gamma: f64, t: f64) -> f64 {
    1.0 / (2.0 * gamma * t * f)
}

/// `M = K = c / (t_final F^alpha)`
pub fn coupling_schedule(f: f64, c: f64, alpha: f64, t_final: f64) -> (f64, f64) {
    let m = c / (t_final * f.powf(alpha));
    (m, m)
}

/// How the shifted-field filters obtain their innovations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrbNoiseMode {
    /// All filters read the record produced by the centre trajectory and
    /// compute innovations from their own `<F_z>`.
    SharedRecord,
    /// All filters are driven by the same innovations.
    #[default]
    SharedInnovation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrbConfig {
    pub spin: Spin,
    pub m: f64,
    pub k: f64,
    pub gamma: f64,
    pub b_center: f64,
    pub t_final: f64,
    pub dt: f64,
    pub delta: f64,
    pub mode: CrbNoiseMode,
    /// Also evolve `B +- delta/2` and require agreement within 1%.
    pub richardson: bool,
    pub n_realizations: usize,
}

impl CrbConfig {
    pub fn new(spin: Spin, m: f64, k: f64) -> Self {
        Self {
            spin,
            m,
            k,
            gamma: 1.0,
            b_center: 0.0,
            t_final: 1.0,
            dt: crate::sde::DEFAULT_DT,
            delta: DEFAULT_DELTA,
            mode: CrbNoiseMode::SharedInnovation,
            richardson: true,
            n_realizations: 100,
        }
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(EstimationError::InvalidConfig(format!("delta = {} must be positive", self.delta)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(EstimationError::InvalidConfig(format!("t_final = {} must be positive", self.t_final)));
        }
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(SdeError::InvalidStep(self.dt).into());
        }
        if !self.gamma.is_finite() || !self.b_center.is_finite() {
            return Err(EstimationError::InvalidConfig("gamma and B must be finite".into()));
        }
        self.spin.check_exact_cap()?;
        CouplingParams::new(self.m, self.k)?;
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// `tr[4 rho (d rho / dB)^2]` for pure states, with the derivative replaced
/// by the central difference of `|psi_+><psi_+|` and `|psi_-><psi_-|`.
pub fn crb_information_pure(center: &StateVector, plus: &StateVector, minus: &StateVector, delta: f64) -> f64 {
    let a = plus.amps.dotc(&center.amps);
    let b = minus.amps.dotc(&center.amps);
    let d = &plus.amps * a - &minus.amps * b;
    d.norm_squared() / (delta * delta)
}

/// Dense form of [`crb_information_pure`] for arbitrary density matrices.
pub fn crb_information_dense(
    center: &nalgebra::DMatrix<crate::spin::C64>,
    plus: &nalgebra::DMatrix<crate::spin::C64>,
    minus: &nalgebra::DMatrix<crate::spin::C64>,
    delta: f64,
) -> f64 {
    let deriv = (plus - minus) / crate::spin::C64::from(2.0 * delta);
    4.0 * (center * &deriv * &deriv).trace().re
}

/// Converts information to a bound. `raw` is the trace before division by
/// `delta^2`; it vanishes identically only when the shifted filters coincide.
fn bound_from_information(info: f64, delta: f64, field_shift: f64) -> Result<f64, EstimationError> {
    let raw = info * delta * delta;
    if field_shift == 0.0 && raw == 0.0 {
        return Ok(f64::INFINITY);
    }
    if !raw.is_finite() || raw < MIN_INFORMATION {
        return Err(EstimationError::DeltaTooSmall(raw));
    }
    Ok(info.powf(-0.5))
}

/// One realization of the finite-difference bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrbSample {
    pub bound: f64,
    pub information: f64,
    /// Bound from the `delta/2` pair, when evaluated.
    pub bound_half: Option<f64>,
}

/// Co-evolves the centre filter at `B` and shifted filters at `B +- delta`
/// over one realization and returns the bound at `t_final`.
pub fn crb_bound(cfg: &CrbConfig, noise: &mut NoiseStream) -> Result<f64, EstimationError> {
    crb_sample(cfg, noise).map(|s| s.bound)
}

pub fn crb_sample(cfg: &CrbConfig, noise: &mut NoiseStream) -> Result<CrbSample, EstimationError> {
    cfg.validate()?;
    if (noise.dt() - cfg.dt).abs() > 1e-15 * cfg.dt {
        return Err(EstimationError::InvalidConfig(format!(
            "noise stream dt {} differs from config dt {}",
            noise.dt(),
            cfg.dt
        )));
    }
    let ops = build_collective_ops(cfg.spin)?;
    let base = CouplingParams::new(cfg.m, cfg.k)?.with_gamma(cfg.gamma);
    let mut offsets = vec![0.0, cfg.delta, -cfg.delta];
    if cfg.richardson {
        offsets.extend([0.5 * cfg.delta, -0.5 * cfg.delta]);
    }
    let params: Vec<CouplingParams> = offsets.iter().map(|o| base.clone().with_field(cfg.b_center + o)).collect();
    let mut states: Vec<StateVector> = offsets.iter().map(|_| coherent_state_x(cfg.spin)).collect();
    let mut expect: Vec<f64> = states.iter().map(|s| s.expect_fz(&ops)).collect();
    let c = 2.0 * cfg.m.sqrt() * cfg.dt;
    let n_steps = cfg.n_steps();
    for j in 0..n_steps {
        let t = j as f64 * cfg.dt;
        let dv = noise.next_increment();
        let dz = c * expect[0] + dv;
        for (idx, (state, p)) in states.iter_mut().zip(&params).enumerate() {
            let dw = match cfg.mode {
                CrbNoiseMode::SharedRecord => dz - c * expect[idx],
                CrbNoiseMode::SharedInnovation => dv,
            };
            let (next, _) = sse_step_with_norm(state, &ops, p, t, dw, cfg.dt)?;
            *state = next;
            expect[idx] = state.expect_fz(&ops);
        }
    }
    let info = crb_information_pure(&states[0], &states[1], &states[2], cfg.delta);
    let shift = cfg.gamma * cfg.delta;
    let bound = bound_from_information(info, cfg.delta, shift)?;
    let bound_half = if cfg.richardson {
        let half = bound_from_information(
            crb_information_pure(&states[0], &states[3], &states[4], 0.5 * cfg.delta),
            0.5 * cfg.delta,
            shift,
        )?;
        if bound.is_finite() || half.is_finite() {
            let rel = (bound - half).abs() / bound.min(half);
            if !(rel <= RICHARDSON_TOLERANCE) {
                return Err(EstimationError::RichardsonMismatch { full: bound, half });
            }
        }
        Some(half)
    } else {
        None
    };
    Ok(CrbSample { bound, information: info, bound_half })
}

/// One field hypothesis with its weight and conditional Gaussian state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantumParticle {
    pub weight: f64,
    pub b: f64,
    pub state: GaussianState,
}

/// How particle states obtain their innovations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticleInnovation {
    /// One innovation from the posterior-mean `sin(theta)` drives every
    /// particle.
    #[default]
    Shared,
    /// Each particle uses the innovation predicted by its own state.
    PerParticle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorGrid {
    pub d: f64,
    pub np: usize,
}

#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub particles: Vec<QuantumParticle>,
    pub spin: Spin,
    pub m: f64,
    pub k: f64,
    pub gamma: f64,
    pub prior: PriorGrid,
    pub innovation: ParticleInnovation,
    pub clamp_events: u64,
    pub particle_steps: u64,
    pub steps: usize,
    coeffs: ProjectionCoefficients,
}

/// Uniform prior on `Np` points `B_i = -sqrt(D) + i dB`, `dB = 2 sqrt(D)/Np`,
/// every particle in the x-polarized coherent state. The grid stops at
/// `sqrt(D) - dB`, so it is not symmetric about zero.
pub fn init_prior_grid(
    d: f64,
    np: usize,
    spin: Spin,
    params: &CouplingParams,
) -> Result<ParticleEnsemble, EstimationError> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(EstimationError::InvalidConfig(format!("D = {d} must be positive")));
    }
    if np < 2 {
        return Err(EstimationError::InvalidConfig(format!("Np = {np} must be at least 2")));
    }
    let half = d.sqrt();
    let db = 2.0 * half / np as f64;
    let resolution = shotnoise_bound(spin.value(), params.gamma.abs().max(f64::MIN_POSITIVE), 1.0);
    if db > resolution {
        log::warn!("grid spacing {db:.3e} is coarser than the shotnoise resolution {resolution:.3e}; increase Np");
    }
    let w = 1.0 / np as f64;
    let particles = (0..np)
        .map(|i| QuantumParticle { weight: w, b: -half + i as f64 * db, state: GaussianState::coherent(spin) })
        .collect();
    Ok(ParticleEnsemble {
        particles,
        spin,
        m: params.m,
        k: params.k,
        gamma: params.gamma,
        prior: PriorGrid { d, np },
        innovation: ParticleInnovation::Shared,
        clamp_events: 0,
        particle_steps: 0,
        steps: 0,
        coeffs: ProjectionCoefficients::new(spin, params.m, params.k),
    })
}

impl ParticleEnsemble {
    pub fn with_innovation(mut self, innovation: ParticleInnovation) -> Self {
        self.innovation = innovation;
        self
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    pub fn posterior(&self) -> Vec<(f64, f64)> {
        self.particles.iter().map(|p| (p.b, p.weight)).collect()
    }

    /// Posterior-weighted mean of the squeezing parameter.
    pub fn mean_xi(&self) -> f64 {
        self.particles.iter().map(|p| p.weight * p.state.xi).sum()
    }

    /// Fraction of particles with weight above `1e-3` of the largest weight.
    pub fn degeneracy_fraction(&self) -> f64 {
        let max = self.particles.iter().map(|p| p.weight).fold(0.0, f64::max);
        let alive = self.particles.iter().filter(|p| p.weight > DEGENERACY_THRESHOLD * max).count();
        alive as f64 / self.particles.len() as f64
    }

    pub fn clamp_rate(&self) -> f64 {
        if self.particle_steps == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.particle_steps as f64
        }
    }
}

/// Advances every particle by one step of the measurement record `dZ`.
///
/// Weights follow `dp_i = 2 sqrt(M) (<F_z>_i - sum_j p_j <F_z>_j) p_i dW`
/// with `<F_z>_i = -F sin(theta_i)`. Negative weights are clamped to zero and
/// counted; zero-weight particles are no longer evolved.
pub fn particle_filter_step(pe: &mut ParticleEnsemble, dz: f64, dt: f64) -> Result<(), EstimationError> {
    let step = pe.steps;
    let c = pe.coeffs;
    let two_f_sqrt_m = 2.0 * c.f * c.sqrt_m;
    let s_bar: f64 = pe.particles.iter().filter(|p| p.weight > 0.0).map(|p| p.weight * p.state.theta.sin()).sum();
    let dw = dz + two_f_sqrt_m * s_bar * dt;
    if !dw.is_finite() {
        return Err(EstimationError::NonFinite { step });
    }
    let gamma = pe.gamma;
    let mut clamps = 0u64;
    let mut total = 0.0;
    for p in pe.particles.iter_mut() {
        if p.weight <= 0.0 {
            continue;
        }
        let s = p.state.theta.sin();
        let w = p.weight * (1.0 - two_f_sqrt_m * (s - s_bar) * dw);
        let dw_state = match pe.innovation {
            ParticleInnovation::Shared => dw,
            ParticleInnovation::PerParticle => dz + two_f_sqrt_m * s * dt,
        };
        let (d_theta, d_xi) = c.increment(p.state.theta, p.state.xi, gamma * p.b, dw_state, dt);
        p.state.theta += d_theta;
        p.state.xi += d_xi;
        if !(w.is_finite() && p.state.theta.is_finite() && p.state.xi.is_finite()) {
            return Err(EstimationError::NonFinite { step });
        }
        if w < 0.0 {
            p.weight = 0.0;
            clamps += 1;
        } else {
            p.weight = w;
            total += w;
        }
    }
    if total <= 0.0 {
        return Err(EstimationError::DegenerateWeights { step });
    }
    let inv = 1.0 / total;
    for p in pe.particles.iter_mut() {
        p.weight *= inv;
    }
    pe.clamp_events += clamps;
    pe.particle_steps += pe.particles.len() as u64;
    pe.steps += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    /// Posterior mean.
    pub mean: f64,
    /// Posterior standard deviation.
    pub std: f64,
    /// Field of the heaviest particle.
    pub map: f64,
}

pub fn estimate_field(pe: &ParticleEnsemble) -> FieldEstimate {
    let mut mean = 0.0;
    let mut second = 0.0;
    let mut map = (f64::NEG_INFINITY, 0.0);
    for p in &pe.particles {
        mean += p.weight * p.b;
        second += p.weight * p.b * p.b;
        if p.weight > map.0 {
            map = (p.weight, p.b);
        }
    }
    let mut var = second - mean * mean;
    if var < 0.0 {
        log::debug!("posterior variance {var:e} clamped to zero");
        var = 0.0;
    }
    FieldEstimate { mean, std: var.sqrt(), map: map.1 }
}

/// RMS of `B_est / |slope| - B_true`, where `slope` is the least-squares
/// gain of the estimator against the true field.
pub fn units_corrected_error(estimates: &[(f64, f64)]) -> Result<f64, EstimationError> {
    let mut distinct: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(EstimationError::InsufficientData { needed: 3, got: distinct.len() });
    }
    let n = estimates.len() as f64;
    let mx = estimates.iter().map(|e| e.0).sum::<f64>() / n;
    let my = estimates.iter().map(|e| e.1).sum::<f64>() / n;
    let sxy: f64 = estimates.iter().map(|e| (e.0 - mx) * (e.1 - my)).sum();
    let sxx: f64 = estimates.iter().map(|e| (e.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope.abs() >= 1e-9) {
        return Err(EstimationError::UninformativeEstimator(slope));
    }
    let ms = estimates.iter().map(|e| (e.1 / slope.abs() - e.0).powi(2)).sum::<f64>() / n;
    Ok(ms.sqrt())
}

/// Settings for one particle-filter estimation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleRunConfig {
    pub spin: Spin,
    pub m: f64,
    pub k: f64,
    pub gamma: f64,
    pub b_true: f64,
    pub d: f64,
    pub np: usize,
    pub dt: f64,
    pub t_final: f64,
    pub innovation: ParticleInnovation,
    pub truth: TruthModel,
    /// Record the estimate every this many steps (0 disables).
    pub history_stride: usize,
}

impl ParticleRunConfig {
    pub fn new(spin: Spin, m: f64, k: f64) -> Self {
        Self {
            spin,
            m,
            k,
            gamma: 1.0,
            b_true: 0.0,
            d: 1e3,
            np: 10_000,
            dt: crate::sde::DEFAULT_DT,
            t_final: 1.0,
            innovation: ParticleInnovation::Shared,
            truth: TruthModel::Projection,
            history_stride: 0,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        CouplingParams::new(self.m, self.k)?;
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(SdeError::InvalidStep(self.dt).into());
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(EstimationError::InvalidConfig(format!("t_final = {} must be non-negative", self.t_final)));
        }
        if !self.b_true.is_finite() || !self.gamma.is_finite() {
            return Err(EstimationError::InvalidConfig("gamma and B_true must be finite".into()));
        }
        if self.truth == TruthModel::Full {
            self.spin.check_exact_cap()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleRunSummary {
    pub estimate: FieldEstimate,
    /// Posterior-weighted mean squeezing parameter at `t_final`.
    pub xi_posterior: f64,
    /// Squeezing parameter of the truth state (projection truth only).
    pub xi_truth: Option<f64>,
    pub clamp_events: u64,
    pub clamp_rate: f64,
    pub degeneracy_fraction: f64,
    /// `(t, mean, std)` sampled every `history_stride` steps.
    pub history: Vec<(f64, f64, f64)>,
}

/// Generates a truth record at `b_true` and filters it with the particle
/// ensemble. Returns the summary and the final ensemble.
pub fn run_particle_filter(
    cfg: &ParticleRunConfig,
    noise: &mut NoiseStream,
) -> Result<(ParticleRunSummary, ParticleEnsemble), EstimationError> {
    cfg.validate()?;
    let params = CouplingParams::new(cfg.m, cfg.k)?.with_gamma(cfg.gamma);
    let mut pe = init_prior_grid(cfg.d, cfg.np, cfg.spin, &params)?.with_innovation(cfg.innovation);
    let n_steps = cfg.n_steps();
    let dt = cfg.dt;
    let c = 2.0 * cfg.m.sqrt() * dt;
    let mut history = Vec::new();
    let record_history = |pe: &ParticleEnsemble, j: usize, history: &mut Vec<(f64, f64, f64)>| {
        if cfg.history_stride > 0 && j % cfg.history_stride == 0 {
            let e = estimate_field(pe);
            history.push((j as f64 * dt, e.mean, e.std));
        }
    };
    record_history(&pe, 0, &mut history);
    let xi_truth = match cfg.truth {
        TruthModel::Projection => {
            let truth_params = params.clone().with_field(cfg.b_true);
            let omega = cfg.gamma * cfg.b_true;
            let mut g = GaussianState::coherent(cfg.spin);
            for j in 1..=n_steps {
                let pi = -cfg.spin.value() * g.theta.sin();
                let dz = c * pi + noise.next_increment();
                g = projection_step(&g, &truth_params, omega, dz - c * pi, dt)?;
                particle_filter_step(&mut pe, dz, dt)?;
                record_history(&pe, j, &mut history);
            }
            Some(g.xi)
        }
        TruthModel::Full => {
            if noise.dt() != dt {
                return Err(EstimationError::InvalidConfig("noise stream dt differs from config dt".into()));
            }
            let rec = simulate_truth_record(&params, cfg.b_true, cfg.spin, noise, n_steps, TruthModel::Full)?;
            for j in 1..=n_steps {
                particle_filter_step(&mut pe, rec.dz[j], dt)?;
                record_history(&pe, j, &mut history);
            }
            None
        }
    };
    let rate = pe.clamp_rate();
    if rate > MAX_CLAMP_RATE {
        return Err(EstimationError::ClampRateExceeded { rate });
    }
    let summary = ParticleRunSummary {
        estimate: estimate_field(&pe),
        xi_posterior: pe.mean_xi(),
        xi_truth,
        clamp_events: pe.clamp_events,
        clamp_rate: rate,
        degeneracy_fraction: pe.degeneracy_fraction(),
        history,
    };
    Ok((summary, pe))
}

/// Filters an existing record with the projection filter at a fixed field;
/// convenience for comparing a particle's state with a lone filter.
pub fn projection_filter_at(
    record: &crate::filters::TrajectoryRecord,
    params: &CouplingParams,
    b: f64,
    spin: Spin,
) -> Result<crate::filters::TrajectoryRecord, EstimationError> {
    Ok(run_filter(record, FilterKind::Projection, &params.clone().with_field(b), spin)?)
}
