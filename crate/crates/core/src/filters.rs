//! Conditional dynamics of the double-passed spin: the stochastic Schrödinger
//! equation, its density-matrix (adjoint) form, the two-parameter Gaussian
//! projection filter, and generation of synthetic measurement records.
//!
//! Sign conventions: the Larmor term rotates the spin about `+y` at rate
//! `omega`, so a coherent state starting along `+x` has
//! `<F_z>_t = -F sin(omega t)` in the absence of measurement. The same
//! convention is used by the projection filter, where `dtheta = omega dt + ...`.
//!
//! All stochastic equations are integrated with one Euler-Itô step per `dt`,
//! with coefficients evaluated on the pre-step state, followed by
//! renormalization.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sde::{euler_ito_step, heun_stratonovich_step, NoiseStream, SdeError, SdeScheme};
use crate::spin::{
    build_collective_ops, coherent_state_x, gaussian_state_ket, DensityMatrix, GaussianState, Spin, SpinError,
    SpinOps, StateVector, C64,
};

const I: C64 = C64::new(0.0, 1.0);

/// Squared norm (or trace) below which a step is considered to have collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1e-6;

/// Most negative eigenvalue tolerated in the density-matrix filter.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Spin(#[from] SpinError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("invalid coupling parameters: {0}")]
    InvalidParams(String),
    #[error("state norm collapsed to {0:e} before renormalization; reduce dt")]
    NormCollapse(f64),
    #[error("density matrix trace collapsed to {0:e}; reduce dt")]
    TraceCollapse(f64),
    #[error("density matrix developed an eigenvalue below -{NEGATIVITY_TOLERANCE:e}")]
    NegativeState,
    #[error("projection filter produced a non-finite state (theta = {theta}, xi = {xi})")]
    NonFinite { theta: f64, xi: f64 },
    #[error("record and filter do not match: {0}")]
    RecordMismatch(String),
    #[error("i/o error writing trajectory: {0}")]
    Io(#[from] std::io::Error),
}

pub type OmegaFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Source of the rotation rate `omega_t` about `y`.
#[derive(Clone)]
pub enum Drive {
    /// Fixed rotation rate.
    Rate(f64),
    /// Magnetic field `B`; `omega = gamma * B`.
    Field(f64),
    /// Arbitrary time-dependent rate.
    Schedule(OmegaFn),
}

impl fmt::Debug for Drive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Drive::Rate(w) => f.debug_tuple("Rate").field(w).finish(),
            Drive::Field(b) => f.debug_tuple("Field").field(b).finish(),
            Drive::Schedule(_) => f.write_str("Schedule(..)"),
        }
    }
}

/// Measurement strength `M`, feedback strength `K`, gyromagnetic ratio and
/// drive, all in units of `1/t_final`.
#[derive(Clone, Debug)]
pub struct CouplingParams {
    pub m: f64,
    pub k: f64,
    pub gamma: f64,
    pub drive: Drive,
}

impl CouplingParams {
    pub fn new(m: f64, k: f64) -> Result<Self, FilterError> {
        if !(m >= 0.0 && m.is_finite()) {
            return Err(FilterError::InvalidParams(format!("M = {m} must be finite and non-negative")));
        }
        if !(k >= 0.0 && k.is_finite()) {
            return Err(FilterError::InvalidParams(format!("K = {k} must be finite and non-negative")));
        }
        Ok(Self { m, k, gamma: 1.0, drive: Drive::Rate(0.0) })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_rate(mut self, omega: f64) -> Self {
        self.drive = Drive::Rate(omega);
        self
    }

    pub fn with_field(mut self, b: f64) -> Self {
        self.drive = Drive::Field(b);
        self
    }

    pub fn with_schedule(mut self, omega: OmegaFn) -> Self {
        self.drive = Drive::Schedule(omega);
        self
    }

    /// Same couplings with the second pass switched off.
    pub fn single_pass(&self) -> Self {
        Self { k: 0.0, ..self.clone() }
    }

    pub fn omega_at(&self, t: f64) -> f64 {
        match &self.drive {
            Drive::Rate(w) => *w,
            Drive::Field(b) => self.gamma * b,
            Drive::Schedule(f) => f(t),
        }
    }

    pub fn sqrt_m(&self) -> f64 {
        self.m.sqrt()
    }

    fn check_finite_drive(&self) -> Result<(), FilterError> {
        if !self.gamma.is_finite() {
            return Err(FilterError::InvalidParams(format!("gamma = {} is not finite", self.gamma)));
        }
        Ok(())
    }
}

fn check_ops(ops: &SpinOps, spin: Spin) -> Result<(), FilterError> {
    if ops.spin() != spin {
        return Err(SpinError::SpinMismatch { ops: ops.spin(), state: spin }.into());
    }
    Ok(())
}

/// Itô drift and diffusion of the stochastic Schrödinger equation at `psi`.
fn sse_coefficients(
    psi: &DVector<C64>,
    ops: &SpinOps,
    p: &CouplingParams,
    omega: f64,
) -> (DVector<C64>, DVector<C64>) {
    let n2 = psi.norm_squared();
    let fz_psi = ops.apply_fz(psi);
    let ez = psi.dotc(&fz_psi).re / n2;
    let mut zc = fz_psi.clone();
    zc.axpy(C64::from(-ez), psi, C64::from(1.0));
    let fy_psi = ops.apply_fy(psi);
    let fy_fy = ops.apply_fy(&fy_psi);
    let fy_fz = ops.apply_fy(&fz_psi);
    let mut zc2 = ops.apply_fz(&zc);
    zc2.axpy(C64::from(-ez), &zc, C64::from(1.0));

    let skm = (p.k * p.m).sqrt();
    let mut drift = fy_fz * (I * skm);
    drift.axpy(I * (skm * ez - omega), &fy_psi, C64::from(1.0));
    drift.axpy(C64::from(-0.5 * p.m), &zc2, C64::from(1.0));
    drift.axpy(C64::from(-0.5 * p.k), &fy_fy, C64::from(1.0));

    let mut diffusion = zc * C64::from(p.m.sqrt());
    diffusion.axpy(I * p.k.sqrt(), &fy_psi, C64::from(1.0));
    (drift, diffusion)
}

/// Stratonovich drift of the same equation, including the global-phase term.
fn sse_stratonovich_drift(psi: &DVector<C64>, ops: &SpinOps, p: &CouplingParams, omega: f64) -> DVector<C64> {
    let n2 = psi.norm_squared();
    let fz_psi = ops.apply_fz(psi);
    let fy_psi = ops.apply_fy(psi);
    let ez = psi.dotc(&fz_psi).re / n2;
    let ez2 = fz_psi.norm_squared() / n2;
    let var = ez2 - ez * ez;
    let ezy = fz_psi.dotc(&fy_psi) / n2;
    let mut zc = fz_psi.clone();
    zc.axpy(C64::from(-ez), psi, C64::from(1.0));
    let mut zc2 = ops.apply_fz(&zc);
    zc2.axpy(C64::from(-ez), &zc, C64::from(1.0));
    let fx_psi = ops.apply_fx(psi);

    let skm = (p.k * p.m).sqrt();
    let mut drift = zc2 * C64::from(-p.m);
    drift.axpy(C64::from(p.m * var) + I * skm * ezy, psi, C64::from(1.0));
    drift.axpy(I * (2.0 * skm * ez - omega), &fy_psi, C64::from(1.0));
    drift.axpy(C64::from(-0.5 * skm), &fx_psi, C64::from(1.0));
    drift
}

fn sse_diffusion(psi: &DVector<C64>, ops: &SpinOps, p: &CouplingParams) -> DVector<C64> {
    let n2 = psi.norm_squared();
    let fz_psi = ops.apply_fz(psi);
    let ez = psi.dotc(&fz_psi).re / n2;
    let mut b = fz_psi;
    b.axpy(C64::from(-ez), psi, C64::from(1.0));
    b *= C64::from(p.m.sqrt());
    b.axpy(I * p.k.sqrt(), &ops.apply_fy(psi), C64::from(1.0));
    b
}

fn finish_ket(spin: Spin, amps: DVector<C64>) -> Result<(StateVector, f64), FilterError> {
    let mut next = StateVector { spin, amps };
    let n2 = next.norm_squared();
    if !n2.is_finite() || n2 < COLLAPSE_THRESHOLD {
        return Err(FilterError::NormCollapse(n2));
    }
    next.normalize();
    Ok((next, n2))
}

/// Taylor terms are summed until they fall below this fraction of the sum.
const TAYLOR_TOLERANCE: f64 = 1e-16;

/// Largest `|phi| F` handled in one Taylor sweep; bigger angles are split.
const TAYLOR_MAX_ANGLE: f64 = 4.0;

fn taylor_substeps(phi: f64, spin: Spin) -> (usize, f64) {
    let span = phi.abs() * spin.value();
    let n = ((span / TAYLOR_MAX_ANGLE).ceil() as usize).max(1);
    (n, phi / n as f64)
}

/// `exp(i phi F_y) v`, summed as a Taylor series of the banded `F_y`.
pub fn rotate_y(ops: &SpinOps, v: &DVector<C64>, phi: f64) -> DVector<C64> {
    let (n, h) = taylor_substeps(phi, ops.spin());
    let mut out = v.clone();
    for _ in 0..n {
        let mut term = out.clone();
        let mut sum = out.clone();
        for k in 1..200 {
            term = ops.apply_fy(&term) * (I * (h / k as f64));
            sum += &term;
            if term.norm() <= TAYLOR_TOLERANCE * sum.norm() {
                break;
            }
        }
        out = sum;
    }
    out
}

/// `exp(i phi F_y) X` for every column of `X`.
fn rotate_y_left(ops: &SpinOps, x: &DMatrix<C64>, phi: f64) -> DMatrix<C64> {
    let (n, h) = taylor_substeps(phi, ops.spin());
    let mut out = x.clone();
    for _ in 0..n {
        let mut term = out.clone();
        let mut sum = out.clone();
        for k in 1..200 {
            term = ops.fy_left(&term) * (I * (h / k as f64));
            sum += &term;
            if term.norm() <= TAYLOR_TOLERANCE * sum.norm() {
                break;
            }
        }
        out = sum;
    }
    out
}

/// Factors of the split step: the diagonal measurement weights
/// `exp(sqrt(M)(m - e) dW - M (m - e)^2 dt)` and the angle of the
/// `exp(i phi F_y)` rotation that carries drive, feedback and back-action.
/// Their product expands to `I + A dt + B dW` under the Itô rule.
fn split_factors(ops: &SpinOps, p: &CouplingParams, ez: f64, omega: f64, dw: f64, dt: f64) -> (Vec<f64>, f64) {
    let sm = p.m.sqrt();
    let weights = ops
        .fz_diagonal()
        .iter()
        .map(|&m| {
            let c = m - ez;
            (sm * c * dw - p.m * c * c * dt).exp()
        })
        .collect();
    let phi = p.k.sqrt() * dw + (2.0 * (p.k * p.m).sqrt() * ez - omega) * dt;
    (weights, phi)
}

/// `exp(i phi F_y) D v` without renormalization.
fn split_apply(
    ops: &SpinOps,
    p: &CouplingParams,
    ez: f64,
    omega: f64,
    v: &DVector<C64>,
    dw: f64,
    dt: f64,
) -> DVector<C64> {
    let (weights, phi) = split_factors(ops, p, ez, omega, dw, dt);
    let scaled = DVector::from_iterator(v.len(), v.iter().zip(&weights).map(|(a, w)| a * *w));
    rotate_y(ops, &scaled, phi)
}

/// One split step of the SSE, `psi -> exp(i phi F_y) D psi`, with the
/// squared norm before renormalization.
pub fn sse_step_with_norm(
    psi: &StateVector,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<(StateVector, f64), FilterError> {
    check_ops(ops, psi.spin)?;
    if !dw.is_finite() || !dt.is_finite() {
        return Err(SdeError::NonFinite("increment").into());
    }
    let ez = psi.expect_fz(ops);
    let amps = split_apply(ops, p, ez, p.omega_at(t), &psi.amps, dw, dt);
    if !amps.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(SdeError::NonFinite("state").into());
    }
    finish_ket(psi.spin, amps)
}

/// One explicit Euler-Itô step of the SSE. Unstable once
/// `M (2F)^2 dt` or `K F^2 dt` is of order one.
pub fn sse_euler_step(
    psi: &StateVector,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<StateVector, FilterError> {
    check_ops(ops, psi.spin)?;
    let (drift, diffusion) = sse_coefficients(&psi.amps, ops, p, p.omega_at(t));
    let amps = euler_ito_step(&psi.amps, &drift, &diffusion, dt, dw)?;
    finish_ket(psi.spin, amps).map(|(s, _)| s)
}

/// One step of the stochastic Schrödinger equation for the double-pass
/// system, followed by renormalization.
pub fn sse_step(
    psi: &StateVector,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<StateVector, FilterError> {
    sse_step_with_norm(psi, ops, p, t, dw, dt).map(|(s, _)| s)
}

/// One Heun step of the Stratonovich form of the same equation.
pub fn sse_stratonovich_step(
    psi: &StateVector,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<StateVector, FilterError> {
    check_ops(ops, psi.spin)?;
    let omega = p.omega_at(t + 0.5 * dt);
    let amps = heun_stratonovich_step(
        &psi.amps,
        |x| sse_stratonovich_drift(x, ops, p, omega),
        |x| sse_diffusion(x, ops, p),
        dt,
        dw,
    )?;
    finish_ket(psi.spin, amps).map(|(s, _)| s)
}

/// Itô drift and diffusion of the density-matrix filter at `r` (unit trace).
fn adjoint_coefficients(
    r: &DMatrix<C64>,
    ops: &SpinOps,
    p: &CouplingParams,
    omega: f64,
) -> (DMatrix<C64>, DMatrix<C64>) {
    let skm = (p.k * p.m).sqrt();
    let fy_r = ops.fy_left(r);
    let r_fy = ops.fy_right(r);
    let fz_r = ops.fz_left(r);
    let r_fz = ops.fz_right(r);
    let comm_y = &fy_r - &r_fy;
    let anti_z = &fz_r + &r_fz;

    let mut drift = &comm_y * (-I * omega);
    drift += (ops.fy_left(&anti_z) - ops.fy_right(&anti_z)) * (I * skm);
    let fz_r_fz = ops.fz_right(&fz_r);
    let fz2 = ops.fz_left(&fz_r) + ops.fz_right(&r_fz);
    drift += (fz_r_fz - fz2 * C64::from(0.5)) * C64::from(p.m);
    let fy_r_fy = ops.fy_right(&fy_r);
    let fy2 = ops.fy_left(&fy_r) + ops.fy_right(&r_fy);
    drift += (fy_r_fy - fy2 * C64::from(0.5)) * C64::from(p.k);

    let ez = fz_r.trace().re / r.trace().re;
    let mut diffusion = (anti_z - r * C64::from(2.0 * ez)) * C64::from(p.m.sqrt());
    diffusion += comm_y * (I * p.k.sqrt());
    (drift, diffusion)
}

fn finish_density(spin: Spin, stepped: DMatrix<C64>) -> Result<DensityMatrix, FilterError> {
    let mut next = DensityMatrix { spin, rho: stepped };
    next.hermitize();
    let tr = next.trace();
    if !tr.is_finite() || tr < COLLAPSE_THRESHOLD {
        return Err(FilterError::TraceCollapse(tr));
    }
    next.normalize();
    if !next.is_positive_within(NEGATIVITY_TOLERANCE) {
        return Err(FilterError::NegativeState);
    }
    Ok(next)
}

/// Drift operator `A` and diffusion operator `B` of the SSE with `<F_z>`
/// frozen at `ez`, applied to the columns of a matrix.
struct StepOperators<'a> {
    ops: &'a SpinOps,
    ez: f64,
    omega: f64,
    m: f64,
    k: f64,
}

impl StepOperators<'_> {
    /// `(F_z - ez) X`
    fn centred_fz(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        self.ops.fz_left(x) - x * C64::from(self.ez)
    }

    fn apply_a(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let fz_x = self.ops.fz_left(x);
        let fy_x = self.ops.fy_left(x);
        let zc = &fz_x - x * C64::from(self.ez);
        let skm = (self.k * self.m).sqrt();
        let mut out = &fy_x * (I * (skm * self.ez - self.omega));
        out += self.ops.fy_left(&fz_x) * (I * skm);
        out -= self.centred_fz(&zc) * C64::from(0.5 * self.m);
        out -= self.ops.fy_left(&fy_x) * C64::from(0.5 * self.k);
        out
    }

    fn apply_b(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        self.centred_fz(x) * C64::from(self.m.sqrt()) + self.ops.fy_left(x) * (I * self.k.sqrt())
    }
}

/// One step of the density-matrix filter, `rho -> K rho K^dagger / tr(...)`
/// with the same split operator `K` as [`sse_step`] and `<F_z>` taken from
/// `rho`. To first order `K = I + A dt + B dW` with `A`, `B` the SSE drift and
/// diffusion operators, and `A rho + rho A^dagger + B rho B^dagger` is the
/// density-matrix drift, so this is a positivity-preserving Itô scheme for the
/// filter that maps a pure state exactly as [`sse_step`] maps its ket.
pub fn adjoint_filter_step(
    rho: &DensityMatrix,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<DensityMatrix, FilterError> {
    check_ops(ops, rho.spin)?;
    if !dw.is_finite() || !dt.is_finite() {
        return Err(SdeError::NonFinite("increment").into());
    }
    let r = &rho.rho;
    let ez = ops.fz_left(r).trace().re / r.trace().re;
    let (weights, phi) = split_factors(ops, p, ez, p.omega_at(t), dw, dt);
    let scaled = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)] * (weights[i] * weights[j]));
    let half = rotate_y_left(ops, &scaled, phi);
    let stepped = rotate_y_left(ops, &half.adjoint(), phi);
    if !stepped.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(SdeError::NonFinite("state").into());
    }
    finish_density(rho.spin, stepped)
}

/// Plain Euler-Itô step of the density-matrix filter. It does not preserve
/// positivity, so no positivity check is applied.
pub fn adjoint_euler_step(
    rho: &DensityMatrix,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
    dw: f64,
    dt: f64,
) -> Result<DensityMatrix, FilterError> {
    check_ops(ops, rho.spin)?;
    let (drift, diffusion) = adjoint_coefficients(&rho.rho, ops, p, p.omega_at(t));
    let stepped = euler_ito_step(&rho.rho, &drift, &diffusion, dt, dw)?;
    let mut next = DensityMatrix { spin: rho.spin, rho: stepped };
    next.hermitize();
    let tr = next.trace();
    if !tr.is_finite() || tr < COLLAPSE_THRESHOLD {
        return Err(FilterError::TraceCollapse(tr));
    }
    next.normalize();
    Ok(next)
}

/// Drift and diffusion of the density-matrix filter evaluated from its
/// superoperator form.
pub fn adjoint_drift_diffusion(
    rho: &DensityMatrix,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
) -> Result<(DMatrix<C64>, DMatrix<C64>), FilterError> {
    check_ops(ops, rho.spin)?;
    Ok(adjoint_coefficients(&rho.rho, ops, p, p.omega_at(t)))
}

/// `A rho + rho A^dagger + B rho B^dagger` and `B rho + rho B^dagger` built
/// from the SSE operators, for checking against [`adjoint_drift_diffusion`].
pub fn sse_induced_drift_diffusion(
    rho: &DensityMatrix,
    ops: &SpinOps,
    p: &CouplingParams,
    t: f64,
) -> Result<(DMatrix<C64>, DMatrix<C64>), FilterError> {
    check_ops(ops, rho.spin)?;
    let r = &rho.rho;
    let ez = ops.fz_left(r).trace().re / r.trace().re;
    let step = StepOperators { ops, ez, omega: p.omega_at(t), m: p.m, k: p.k };
    let a_r = step.apply_a(r);
    let b_r = step.apply_b(r);
    let b_r_b = step.apply_b(&b_r.adjoint());
    Ok((&a_r + a_r.adjoint() + b_r_b, &b_r + b_r.adjoint()))
}

/// Precomputed coefficients of the projection filter for one `(F, M, K)`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionCoefficients {
    pub f: f64,
    pub m: f64,
    pub sqrt_m: f64,
    pub sqrt_k: f64,
    /// `2 F sqrt(K M)`
    pub feedback: f64,
}

impl ProjectionCoefficients {
    pub fn new(spin: Spin, m: f64, k: f64) -> Self {
        let f = spin.value();
        Self { f, m, sqrt_m: m.sqrt(), sqrt_k: k.sqrt(), feedback: 2.0 * f * (k * m).sqrt() }
    }

    /// Euler-Itô increment of `(theta, xi)`.
    #[inline]
    pub fn increment(&self, theta: f64, xi: f64, omega: f64, dw: f64, dt: f64) -> (f64, f64) {
        let e8 = (-8.0 * self.f * xi).exp();
        let (s, c) = theta.sin_cos();
        let d_theta = (omega - 0.5 * self.m * e8 * e8 * s * c + self.feedback * s) * dt
            - (self.sqrt_m * e8 * c + self.sqrt_k) * dw;
        let d_xi = 0.25 * self.m * e8 * c * c * dt;
        (d_theta, d_xi)
    }
}

/// One Euler-Itô step of the two-parameter Gaussian projection filter.
pub fn projection_step(
    g: &GaussianState,
    p: &CouplingParams,
    omega: f64,
    dw: f64,
    dt: f64,
) -> Result<GaussianState, FilterError> {
    let coeffs = ProjectionCoefficients::new(g.spin, p.m, p.k);
    let (d_theta, d_xi) = coeffs.increment(g.theta, g.xi, omega, dw, dt);
    let next = GaussianState { theta: g.theta + d_theta, xi: g.xi + d_xi, spin: g.spin };
    if !next.is_finite() {
        return Err(FilterError::NonFinite { theta: next.theta, xi: next.xi });
    }
    Ok(next)
}

/// `<F_z> = -F sin(theta)` on the Gaussian family.
pub fn projection_expect_fz(g: &GaussianState) -> f64 {
    -g.spin.value() * g.theta.sin()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    FullSse,
    Adjoint,
    Projection,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::FullSse => "full_sse",
            FilterKind::Adjoint => "adjoint",
            FilterKind::Projection => "projection",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthModel {
    Full,
    Projection,
}

/// Provenance carried alongside every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub master_seed: u64,
    pub stream_index: u64,
    pub dt: f64,
    pub spin: Spin,
    pub m: f64,
    pub k: f64,
    pub gamma: f64,
    pub omega: f64,
    pub b_true: Option<f64>,
    pub kind: String,
    pub scheme: SdeScheme,
    /// Sum over steps of `| |psi|^2 - 1 |` (or the trace analogue) before
    /// renormalization.
    pub norm_correction: f64,
}

/// Time series produced by a truth simulation or a filter run.
///
/// Row `j` holds the state at `t_j = j dt`; its increments `dZ`, `dW` cover
/// `(t_{j-1}, t_j]`, so row 0 carries zero increments and the initial
/// expectation. Innovations satisfy
/// `dW[j] = dZ[j] - 2 sqrt(M) pi_fz[j-1] dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub dz: Vec<f64>,
    pub dw: Vec<f64>,
    pub pi_fz: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub xi: Option<Vec<f64>>,
    pub meta: RecordMeta,
}

impl TrajectoryRecord {
    fn start(meta: RecordMeta, pi0: f64, gaussian: Option<&GaussianState>, capacity: usize) -> Self {
        let mut rec = Self {
            times: Vec::with_capacity(capacity + 1),
            dz: Vec::with_capacity(capacity + 1),
            dw: Vec::with_capacity(capacity + 1),
            pi_fz: Vec::with_capacity(capacity + 1),
            theta: gaussian.map(|_| Vec::with_capacity(capacity + 1)),
            xi: gaussian.map(|_| Vec::with_capacity(capacity + 1)),
            meta,
        };
        rec.push(0.0, 0.0, 0.0, pi0, gaussian);
        rec
    }

    fn push(&mut self, t: f64, dz: f64, dw: f64, pi: f64, g: Option<&GaussianState>) {
        self.times.push(t);
        self.dz.push(dz);
        self.dw.push(dw);
        self.pi_fz.push(pi);
        if let (Some(th), Some(xi), Some(g)) = (self.theta.as_mut(), self.xi.as_mut(), g) {
            th.push(g.theta);
            xi.push(g.xi);
        }
    }

    /// Number of integration steps (rows minus the initial row).
    pub fn n_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn dt(&self) -> f64 {
        self.meta.dt
    }

    /// Largest deviation of the stored innovations from
    /// `dZ - 2 sqrt(M) pi dt`.
    pub fn innovation_residual(&self) -> f64 {
        let c = 2.0 * self.meta.m.sqrt() * self.meta.dt;
        (1..self.dz.len())
            .map(|j| (self.dw[j] - (self.dz[j] - c * self.pi_fz[j - 1])).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FilterError> {
        let mut w = csv::Writer::from_writer(out);
        let gaussian = self.theta.is_some() && self.xi.is_some();
        let mut header = vec!["t", "dZ", "dW", "pi_fz"];
        if gaussian {
            header.extend(["theta", "xi"]);
        }
        w.write_record(&header).map_err(csv_io)?;
        for j in 0..self.times.len() {
            let mut row = vec![
                self.times[j].to_string(),
                self.dz[j].to_string(),
                self.dw[j].to_string(),
                self.pi_fz[j].to_string(),
            ];
            if let (Some(th), Some(xi)) = (&self.theta, &self.xi) {
                row.push(th[j].to_string());
                row.push(xi[j].to_string());
            }
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn meta_for(noise_seed: (u64, u64), dt: f64, spin: Spin, p: &CouplingParams, kind: String) -> RecordMeta {
    RecordMeta {
        master_seed: noise_seed.0,
        stream_index: noise_seed.1,
        dt,
        spin,
        m: p.m,
        k: p.k,
        gamma: p.gamma,
        omega: p.omega_at(0.0),
        b_true: match p.drive {
            Drive::Field(b) => Some(b),
            _ => None,
        },
        kind,
        scheme: SdeScheme::EulerIto,
        norm_correction: 0.0,
    }
}

/// Evolves a truth state at field `b_true` and emits the measurement record
/// `dZ = 2 sqrt(M) <F_z>_truth dt + dV`.
pub fn simulate_truth_record(
    p: &CouplingParams,
    b_true: f64,
    spin: Spin,
    noise: &mut NoiseStream,
    n_steps: usize,
    model: TruthModel,
) -> Result<TrajectoryRecord, FilterError> {
    p.check_finite_drive()?;
    let p = p.clone().with_field(b_true);
    let dt = noise.dt();
    let c = 2.0 * p.sqrt_m() * dt;
    let kind = match model {
        TruthModel::Full => "truth_full",
        TruthModel::Projection => "truth_projection",
    };
    let meta = meta_for((noise.master_seed(), noise.stream_index()), dt, spin, &p, kind.into());
    match model {
        TruthModel::Full => {
            let ops = build_collective_ops(spin)?;
            let mut psi = coherent_state_x(spin);
            let mut pi = psi.expect_fz(&ops);
            let mut rec = TrajectoryRecord::start(meta, pi, None, n_steps);
            for j in 1..=n_steps {
                let t = (j - 1) as f64 * dt;
                let dz = c * pi + noise.next_increment();
                let dw = dz - c * pi;
                let (next, n2) = sse_step_with_norm(&psi, &ops, &p, t, dw, dt)?;
                rec.meta.norm_correction += (n2 - 1.0).abs();
                psi = next;
                pi = psi.expect_fz(&ops);
                rec.push(j as f64 * dt, dz, dw, pi, None);
            }
            Ok(rec)
        }
        TruthModel::Projection => {
            let mut g = GaussianState::coherent(spin);
            let mut pi = projection_expect_fz(&g);
            let mut rec = TrajectoryRecord::start(meta, pi, Some(&g), n_steps);
            for j in 1..=n_steps {
                let t = (j - 1) as f64 * dt;
                let dz = c * pi + noise.next_increment();
                let dw = dz - c * pi;
                g = projection_step(&g, &p, p.omega_at(t), dw, dt)?;
                pi = projection_expect_fz(&g);
                rec.push(j as f64 * dt, dz, dw, pi, Some(&g));
            }
            Ok(rec)
        }
    }
}

/// Runs a filter over a stored record starting from the x-polarized
/// coherent state.
pub fn run_filter(
    record: &TrajectoryRecord,
    kind: FilterKind,
    p: &CouplingParams,
    spin: Spin,
) -> Result<TrajectoryRecord, FilterError> {
    run_filter_from(record, kind, p, spin, &GaussianState::coherent(spin))
}

/// Runs a filter over a stored record from an arbitrary Gaussian initial
/// state. Innovations are recomputed from `dZ` using the filter's own
/// `<F_z>`.
pub fn run_filter_from(
    record: &TrajectoryRecord,
    kind: FilterKind,
    p: &CouplingParams,
    spin: Spin,
    initial: &GaussianState,
) -> Result<TrajectoryRecord, FilterError> {
    if initial.spin != spin {
        return Err(FilterError::RecordMismatch(format!(
            "initial state has F = {} but the filter runs at F = {spin}",
            initial.spin
        )));
    }
    if record.dz.is_empty() || record.times.len() != record.dz.len() {
        return Err(FilterError::RecordMismatch("record has no initial row".into()));
    }
    p.check_finite_drive()?;
    let dt = record.dt();
    let n_steps = record.n_steps();
    let c = 2.0 * p.sqrt_m() * dt;
    let meta = RecordMeta {
        kind: kind.to_string(),
        norm_correction: 0.0,
        ..meta_for((record.meta.master_seed, record.meta.stream_index), dt, spin, p, String::new())
    };
    match kind {
        FilterKind::FullSse => {
            let ops = build_collective_ops(spin)?;
            let mut psi = initial_ket(initial, &ops)?;
            let mut pi = psi.expect_fz(&ops);
            let mut rec = TrajectoryRecord::start(meta, pi, None, n_steps);
            for j in 1..=n_steps {
                let dz = record.dz[j];
                let dw = dz - c * pi;
                let (next, n2) = sse_step_with_norm(&psi, &ops, p, record.times[j - 1], dw, dt)?;
                rec.meta.norm_correction += (n2 - 1.0).abs();
                psi = next;
                pi = psi.expect_fz(&ops);
                rec.push(record.times[j], dz, dw, pi, None);
            }
            log::debug!("full SSE cumulative norm correction {:e}", rec.meta.norm_correction);
            Ok(rec)
        }
        FilterKind::Adjoint => {
            let ops = build_collective_ops(spin)?;
            let mut rho = initial_ket(initial, &ops)?.density_matrix();
            let fz = ops.fz();
            let expect = |r: &DensityMatrix| (fz * &r.rho).trace().re;
            let mut pi = expect(&rho);
            let mut rec = TrajectoryRecord::start(meta, pi, None, n_steps);
            for j in 1..=n_steps {
                let dz = record.dz[j];
                let dw = dz - c * pi;
                rho = adjoint_filter_step(&rho, &ops, p, record.times[j - 1], dw, dt)?;
                pi = expect(&rho);
                rec.push(record.times[j], dz, dw, pi, None);
            }
            Ok(rec)
        }
        FilterKind::Projection => {
            let mut g = *initial;
            let mut pi = projection_expect_fz(&g);
            let mut rec = TrajectoryRecord::start(meta, pi, Some(&g), n_steps);
            for j in 1..=n_steps {
                let dz = record.dz[j];
                let dw = dz - c * pi;
                g = projection_step(&g, p, p.omega_at(record.times[j - 1]), dw, dt)?;
                pi = projection_expect_fz(&g);
                rec.push(record.times[j], dz, dw, pi, Some(&g));
            }
            Ok(rec)
        }
    }
}

fn initial_ket(initial: &GaussianState, ops: &SpinOps) -> Result<StateVector, FilterError> {
    if initial.theta == 0.0 && initial.xi == 0.0 {
        Ok(coherent_state_x(initial.spin))
    } else {
        Ok(gaussian_state_ket(initial, ops)?)
    }
}

/// Evolves the SSE directly from a sequence of innovations, as used for the
/// matched-noise single/double pass comparison. Returns `<F_z>` at every
/// grid point including `t = 0`.
pub fn sse_trajectory_from_innovations(
    spin: Spin,
    ops: &SpinOps,
    p: &CouplingParams,
    dws: &[f64],
    dt: f64,
    scheme: SdeScheme,
) -> Result<Vec<f64>, FilterError> {
    check_ops(ops, spin)?;
    let mut psi = coherent_state_x(spin);
    let mut out = Vec::with_capacity(dws.len() + 1);
    out.push(psi.expect_fz(ops));
    for (j, &dw) in dws.iter().enumerate() {
        let t = j as f64 * dt;
        psi = match scheme {
            SdeScheme::EulerIto => sse_step(&psi, ops, p, t, dw, dt)?,
            SdeScheme::HeunStratonovich => sse_stratonovich_step(&psi, ops, p, t, dw, dt)?,
        };
        out.push(psi.expect_fz(ops));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::NoiseStream;
    use approx::assert_relative_eq;

    fn spin(f: f64) -> Spin {
        Spin::new(f).unwrap()
    }

    #[test]
    fn rejects_negative_couplings() {
        assert!(CouplingParams::new(-1.0, 0.0).is_err());
        assert!(CouplingParams::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn sse_without_generator_is_identity() {
        let s = spin(5.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(0.0, 0.0).unwrap();
        let psi = gaussian_state_ket(&GaussianState { theta: 0.3, xi: 0.01, spin: s }, &ops).unwrap();
        let next = sse_step(&psi, &ops, &p, 0.0, 0.05, 1e-4).unwrap();
        assert!((next.amps - psi.amps).norm() < 1e-14);
    }

    #[test]
    fn sse_pure_rotation() {
        let s = spin(10.0);
        let ops = build_collective_ops(s).unwrap();
        let omega = 2.0;
        let p = CouplingParams::new(0.0, 0.0).unwrap().with_rate(omega);
        let dt = 1e-4;
        let mut psi = coherent_state_x(s);
        let n = 5000;
        for j in 0..n {
            psi = sse_step(&psi, &ops, &p, j as f64 * dt, 0.0, dt).unwrap();
        }
        let t = n as f64 * dt;
        let expected = -10.0 * (omega * t).sin();
        assert!((psi.expect_fz(&ops) - expected).abs() < 10.0 * 10.0 * dt);
    }

    #[test]
    fn adjoint_without_generator_is_identity() {
        let s = spin(3.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(0.0, 0.0).unwrap();
        let rho = coherent_state_x(s).density_matrix();
        let next = adjoint_filter_step(&rho, &ops, &p, 0.0, 0.1, 1e-4).unwrap();
        assert!((next.rho - rho.rho).norm() < 1e-14);
    }

    #[test]
    fn projection_without_generator_is_identity() {
        let g = GaussianState { theta: 0.7, xi: 1e-3, spin: spin(50.0) };
        let p = CouplingParams::new(0.0, 0.0).unwrap();
        assert_eq!(projection_step(&g, &p, 0.0, 0.3, 1e-4).unwrap(), g);
    }

    #[test]
    fn projection_squeezing_rate_at_origin() {
        let g = GaussianState::coherent(spin(100.0));
        let p = CouplingParams::new(1.7, 0.9).unwrap();
        let dt = 1e-4;
        let next = projection_step(&g, &p, 0.0, 0.0, dt).unwrap();
        assert_relative_eq!(next.xi, 1.7 / 4.0 * dt, max_relative = 1e-15);
    }

    #[test]
    fn projection_expectation() {
        assert_eq!(projection_expect_fz(&GaussianState::coherent(spin(3.0))), 0.0);
        let g = GaussianState { theta: std::f64::consts::FRAC_PI_2, xi: 0.0, spin: spin(100.0) };
        assert_relative_eq!(projection_expect_fz(&g), -100.0);
    }

    #[test]
    fn single_pass_drops_feedback_terms() {
        let p = CouplingParams::new(0.4, 0.9).unwrap().single_pass();
        let c = ProjectionCoefficients::new(spin(20.0), p.m, p.k);
        assert_eq!(c.feedback, 0.0);
        assert_eq!(c.sqrt_k, 0.0);
    }

    #[test]
    fn nonfinite_projection_is_error() {
        let g = GaussianState { theta: 0.0, xi: -10.0, spin: spin(100.0) };
        let p = CouplingParams::new(1.0, 1.0).unwrap();
        assert!(matches!(projection_step(&g, &p, 0.0, 0.01, 1e-4), Err(FilterError::NonFinite { .. })));
    }

    #[test]
    fn sse_norm_collapse_detected() {
        let s = spin(10.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(50.0, 0.0).unwrap();
        let psi = gaussian_state_ket(&GaussianState { theta: 0.5, xi: 0.0, spin: s }, &ops).unwrap();
        // A huge step drives the Euler update far from the unit sphere.
        let r = sse_step(&psi, &ops, &p, 0.0, 0.0, 1.0);
        assert!(r.is_ok() || matches!(r, Err(FilterError::NormCollapse(_))));
        let bad = StateVector { spin: s, amps: psi.amps.clone() * C64::from(1e-4) };
        let q = CouplingParams::new(0.0, 0.0).unwrap();
        assert!(matches!(sse_step(&bad, &ops, &q, 0.0, 0.0, 1e-4), Err(FilterError::NormCollapse(_))));
    }

    #[test]
    fn zero_measurement_record_is_pure_noise() {
        let p = CouplingParams::new(0.0, 0.0).unwrap();
        let mut noise = NoiseStream::new(11, 0, 1e-3).unwrap();
        let mut replay = noise.replay();
        let rec = simulate_truth_record(&p, 0.5, spin(10.0), &mut noise, 50, TruthModel::Projection).unwrap();
        for j in 1..=50 {
            assert_eq!(rec.dz[j], replay.next_increment());
        }
    }

    #[test]
    fn zero_length_record_yields_initial_row() {
        let p = CouplingParams::new(1.0, 1.0).unwrap();
        let mut noise = NoiseStream::new(1, 0, 1e-3).unwrap();
        let rec = simulate_truth_record(&p, 0.0, spin(4.0), &mut noise, 0, TruthModel::Full).unwrap();
        for kind in [FilterKind::FullSse, FilterKind::Adjoint, FilterKind::Projection] {
            let out = run_filter(&rec, kind, &p, spin(4.0)).unwrap();
            assert_eq!(out.times, vec![0.0]);
            assert!(out.pi_fz[0].abs() < 1e-12);
        }
    }

    #[test]
    fn full_filter_reproduces_full_truth() {
        let s = spin(8.0);
        let p = CouplingParams::new(0.8, 0.6).unwrap();
        let mut noise = NoiseStream::new(3, 2, 1e-3).unwrap();
        let truth = simulate_truth_record(&p, 1.5, s, &mut noise, 300, TruthModel::Full).unwrap();
        let filt = run_filter(&truth, FilterKind::FullSse, &p.clone().with_field(1.5), s).unwrap();
        assert_eq!(filt.pi_fz, truth.pi_fz);
        assert_eq!(filt.dw, truth.dw);
    }

    #[test]
    fn innovations_reconstruct_for_every_kind() {
        let s = spin(6.0);
        let p = CouplingParams::new(0.5, 0.5).unwrap().with_field(1.0);
        let mut noise = NoiseStream::new(9, 0, 1e-3).unwrap();
        let truth = simulate_truth_record(&p, 1.0, s, &mut noise, 200, TruthModel::Full).unwrap();
        assert!(truth.innovation_residual() < 1e-12);
        for kind in [FilterKind::FullSse, FilterKind::Adjoint, FilterKind::Projection] {
            let out = run_filter(&truth, kind, &p, s).unwrap();
            assert!(out.innovation_residual() < 1e-12, "{kind}");
            assert_eq!(out.dz, truth.dz);
        }
    }

    #[test]
    fn record_csv_columns() {
        let p = CouplingParams::new(0.5, 0.5).unwrap();
        let mut noise = NoiseStream::new(9, 0, 1e-3).unwrap();
        let rec = simulate_truth_record(&p, 0.0, spin(6.0), &mut noise, 3, TruthModel::Projection).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,dZ,dW,pi_fz,theta,xi");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn mismatched_ops_rejected() {
        let ops = build_collective_ops(spin(2.0)).unwrap();
        let psi = coherent_state_x(spin(3.0));
        let p = CouplingParams::new(0.1, 0.1).unwrap();
        assert!(sse_step(&psi, &ops, &p, 0.0, 0.0, 1e-3).is_err());
    }

    fn mixed_state(f: f64) -> (SpinOps, DensityMatrix) {
        let s = spin(f);
        let ops = build_collective_ops(s).unwrap();
        let a = gaussian_state_ket(&GaussianState { theta: 0.4, xi: 0.01, spin: s }, &ops).unwrap();
        let b = gaussian_state_ket(&GaussianState { theta: -1.1, xi: 0.0, spin: s }, &ops).unwrap();
        let rho = a.density_matrix().rho * C64::from(0.7) + b.density_matrix().rho * C64::from(0.3);
        (ops, DensityMatrix { spin: s, rho })
    }

    #[test]
    fn sme_drift_matches_sse_operators() {
        let (ops, rho) = mixed_state(3.0);
        let p = CouplingParams::new(0.8, 1.3).unwrap().with_rate(0.7);
        let (drift, diffusion) = adjoint_drift_diffusion(&rho, &ops, &p, 0.0).unwrap();
        let (drift_sse, diffusion_sse) = sse_induced_drift_diffusion(&rho, &ops, &p, 0.0).unwrap();
        assert!((&drift - &drift_sse).norm() < 1e-10 * drift.norm().max(1.0));
        assert!((&diffusion - &diffusion_sse).norm() < 1e-10 * diffusion.norm().max(1.0));
    }

    #[test]
    fn rotate_y_matches_eigen_exponential() {
        let s = spin(7.5);
        let ops = build_collective_ops(s).unwrap();
        let eig = ops.fy().clone().symmetric_eigen();
        let v = coherent_state_x(s).amps;
        for phi in [1e-3, 0.37, -2.9] {
            let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (I * phi * l).exp()));
            let exact = &eig.eigenvectors * phases * eig.eigenvectors.adjoint() * &v;
            assert!((rotate_y(&ops, &v, phi) - exact).norm() < 1e-12);
        }
    }

    #[test]
    fn split_step_expands_to_sse_coefficients() {
        // With dW = +-sqrt(dt) the pair average isolates the drift and the
        // antisymmetric part the diffusion.
        let s = spin(4.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(0.9, 0.6).unwrap();
        let psi = gaussian_state_ket(&GaussianState { theta: 0.3, xi: 0.02, spin: s }, &ops).unwrap();
        let omega = 1.3;
        let (drift, diffusion) = sse_coefficients(&psi.amps, &ops, &p, omega);
        let ez = psi.expect_fz(&ops);
        let mut errs = Vec::new();
        for dt in [1e-3f64, 1e-4] {
            let h = dt.sqrt();
            let plus = split_apply(&ops, &p, ez, omega, &psi.amps, h, dt);
            let minus = split_apply(&ops, &p, ez, omega, &psi.amps, -h, dt);
            let mean = (&plus + &minus) * C64::from(0.5);
            let drift_err = (mean - &psi.amps - &drift * C64::from(dt)).norm() / dt;
            let diff_err = ((plus - minus) * C64::from(0.5 / h) - &diffusion).norm();
            errs.push((drift_err, diff_err));
        }
        // Both residuals are O(dt).
        assert!(errs[1].0 < 0.2 * errs[0].0 && errs[1].0 < 1e-2);
        assert!(errs[1].1 < 0.2 * errs[0].1 && errs[1].1 < 1e-2);
    }

    #[test]
    fn split_step_tracks_euler_for_weak_coupling() {
        let s = spin(5.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(0.3, 0.3).unwrap().with_rate(1.0);
        let dt = 1e-5;
        let mut noise = NoiseStream::new(3, 0, dt).unwrap();
        let mut a = coherent_state_x(s);
        let mut b = a.clone();
        let mut worst: f64 = 0.0;
        for j in 0..20_000 {
            let t = j as f64 * dt;
            let dw = noise.next_increment();
            a = sse_step(&a, &ops, &p, t, dw, dt).unwrap();
            b = sse_euler_step(&b, &ops, &p, t, dw, dt).unwrap();
            worst = worst.max((a.expect_fz(&ops) - b.expect_fz(&ops)).abs());
        }
        assert!(worst < 0.05, "worst {worst}");
    }

    #[test]
    fn split_adjoint_preserves_purity_and_positivity() {
        let s = spin(5.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(1.7, 1.7).unwrap().with_rate(2.0);
        let dt = 1e-3;
        let mut noise = NoiseStream::new(11, 0, dt).unwrap();
        let mut psi = coherent_state_x(s);
        let mut rho = psi.density_matrix();
        for j in 0..1000 {
            let t = j as f64 * dt;
            let dw = noise.next_increment();
            psi = sse_step(&psi, &ops, &p, t, dw, dt).unwrap();
            rho = adjoint_filter_step(&rho, &ops, &p, t, dw, dt).unwrap();
        }
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-10);
        assert!(rho.min_eigenvalue() > -1e-10);
        let ez = ops.fz_left(&rho.rho).trace().re;
        assert!((ez - psi.expect_fz(&ops)).abs() < 1e-9);
    }

    #[test]
    fn mixed_adjoint_stays_positive() {
        let (ops, mut rho) = mixed_state(3.0);
        let p = CouplingParams::new(2.0, 2.0).unwrap().with_rate(1.0);
        let dt = 1e-3;
        let mut noise = NoiseStream::new(5, 0, dt).unwrap();
        for j in 0..500 {
            rho = adjoint_filter_step(&rho, &ops, &p, j as f64 * dt, noise.next_increment(), dt).unwrap();
        }
        assert!(rho.min_eigenvalue() > -1e-10);
        assert_relative_eq!(rho.trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn strong_pure_rotation_is_exact() {
        let s = spin(50.0);
        let ops = build_collective_ops(s).unwrap();
        let p = CouplingParams::new(0.0, 0.0).unwrap().with_rate(2.0);
        let dt = 1e-2;
        let mut psi = coherent_state_x(s);
        for j in 0..100 {
            psi = sse_step(&psi, &ops, &p, j as f64 * dt, 0.0, dt).unwrap();
        }
        assert_relative_eq!(psi.expect_fz(&ops), -50.0 * 2.0f64.sin(), epsilon = 1e-9);
    }

}
