//! Collective spin operators on the completely symmetric subspace.
//!
//! Basis index `k` labels the `F_z` eigenket with projection `m = F - k`, so
//! `F_z` is diagonal with entries `F, F-1, ..., -F`. The ladder operators are
//! stored as a single band of matrix elements, which is all the filters need:
//! `F_x` and `F_y` are tridiagonal and `F_z` is diagonal. Dense matrices are
//! materialized lazily for tests, expectation values and the density-matrix
//! filter.

use std::fmt;
use std::ops::AddAssign;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

const I: C64 = C64::new(0.0, 1.0);

/// Largest Hilbert-space dimension the exact filters accept.
pub const MAX_DIM: usize = 4001;

/// Imaginary residue above which an expectation value is treated as corrupt.
pub const IMAG_TOLERANCE: f64 = 1e-6;

/// Default parameter step for the finite-difference tangent vectors.
pub const DEFAULT_TANGENT_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("total spin {0} is not a positive half-integer")]
    InvalidSpin(f64),
    #[error("spin dimension {dim} exceeds the cap of {MAX_DIM}")]
    DimensionTooLarge { dim: usize },
    #[error("dimension mismatch: operator is {op}x{op}, state has dimension {state}")]
    DimensionMismatch { op: usize, state: usize },
    #[error("expectation value has imaginary part {0:e}; the state is corrupted")]
    ComplexExpectation(f64),
    #[error("squeezing exponent 8*F*xi = {0} overflows the analytic formula")]
    SqueezingOverflow(f64),
    #[error("matrix exponential did not produce a unitary result (norm {0})")]
    ExponentialOverflow(f64),
    #[error("finite-difference step {0:e} is too small")]
    StepTooSmall(f64),
    #[error("spin operators were built for F = {ops} but the state has F = {state}")]
    SpinMismatch { ops: Spin, state: Spin },
}

/// Total spin quantum number `F`, stored as the integer `2F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Spin {
    twice: u32,
}

impl Spin {
    pub fn new(f: f64) -> Result<Self, SpinError> {
        let twice = 2.0 * f;
        if !twice.is_finite() || twice < 1.0 || (twice - twice.round()).abs() > 1e-9 {
            return Err(SpinError::InvalidSpin(f));
        }
        if twice > u32::MAX as f64 {
            return Err(SpinError::InvalidSpin(f));
        }
        Ok(Self { twice: twice.round() as u32 })
    }

    pub fn from_twice(twice: u32) -> Result<Self, SpinError> {
        if twice == 0 {
            return Err(SpinError::InvalidSpin(0.0));
        }
        Ok(Self { twice })
    }

    pub fn value(self) -> f64 {
        self.twice as f64 / 2.0
    }

    pub fn twice(self) -> u32 {
        self.twice
    }

    pub fn dim(self) -> usize {
        self.twice as usize + 1
    }

    /// Fails when the dense representation would exceed [`MAX_DIM`].
    pub fn check_exact_cap(self) -> Result<(), SpinError> {
        if self.dim() > MAX_DIM {
            return Err(SpinError::DimensionTooLarge { dim: self.dim() });
        }
        Ok(())
    }
}

impl TryFrom<f64> for Spin {
    type Error = SpinError;

    fn try_from(f: f64) -> Result<Self, Self::Error> {
        Spin::new(f)
    }
}

impl From<Spin> for f64 {
    fn from(s: Spin) -> f64 {
        s.value()
    }
}

impl fmt::Display for Spin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.twice % 2 == 0 {
            write!(f, "{}", self.twice / 2)
        } else {
            write!(f, "{}/2", self.twice)
        }
    }
}

struct DenseOps {
    fx: DMatrix<C64>,
    fy: DMatrix<C64>,
    fz: DMatrix<C64>,
}

/// Collective spin operators `F_x`, `F_y`, `F_z` for one value of `F`.
///
/// Immutable after construction and safe to share between threads.
pub struct SpinOps {
    spin: Spin,
    m: Vec<f64>,
    /// `ladder[k] = <k| F_+ |k+1>`, the only nonzero elements of `F_+`.
    ladder: Vec<f64>,
    dense: OnceLock<DenseOps>,
}

impl fmt::Debug for SpinOps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpinOps").field("spin", &self.spin).finish_non_exhaustive()
    }
}

/// Builds the collective operators for total spin `spin`.
pub fn build_collective_ops(spin: Spin) -> Result<SpinOps, SpinError> {
    spin.check_exact_cap()?;
    let f = spin.value();
    let dim = spin.dim();
    let m: Vec<f64> = (0..dim).map(|k| f - k as f64).collect();
    let ladder = (0..dim - 1)
        .map(|k| {
            let lower = m[k + 1];
            (f * (f + 1.0) - lower * (lower + 1.0)).max(0.0).sqrt()
        })
        .collect();
    Ok(SpinOps { spin, m, ladder, dense: OnceLock::new() })
}

impl SpinOps {
    pub fn spin(&self) -> Spin {
        self.spin
    }

    pub fn dim(&self) -> usize {
        self.spin.dim()
    }

    /// Diagonal of `F_z`.
    pub fn fz_diagonal(&self) -> &[f64] {
        &self.m
    }

    fn dense(&self) -> &DenseOps {
        self.dense.get_or_init(|| {
            let n = self.dim();
            let mut fx = DMatrix::zeros(n, n);
            let mut fy = DMatrix::zeros(n, n);
            let mut fz = DMatrix::zeros(n, n);
            for k in 0..n {
                fz[(k, k)] = C64::from(self.m[k]);
            }
            for (k, &l) in self.ladder.iter().enumerate() {
                fx[(k, k + 1)] = C64::from(0.5 * l);
                fx[(k + 1, k)] = C64::from(0.5 * l);
                fy[(k, k + 1)] = -I * (0.5 * l);
                fy[(k + 1, k)] = I * (0.5 * l);
            }
            DenseOps { fx, fy, fz }
        })
    }

    pub fn fx(&self) -> &DMatrix<C64> {
        &self.dense().fx
    }

    pub fn fy(&self) -> &DMatrix<C64> {
        &self.dense().fy
    }

    pub fn fz(&self) -> &DMatrix<C64> {
        &self.dense().fz
    }

    pub fn identity(&self) -> DMatrix<C64> {
        DMatrix::identity(self.dim(), self.dim())
    }

    pub fn apply_fz(&self, v: &DVector<C64>) -> DVector<C64> {
        DVector::from_iterator(v.len(), v.iter().zip(&self.m).map(|(a, &m)| a * m))
    }

    pub fn apply_fx(&self, v: &DVector<C64>) -> DVector<C64> {
        let n = v.len();
        let mut out = DVector::zeros(n);
        for (k, &l) in self.ladder.iter().enumerate() {
            out[k] += v[k + 1] * (0.5 * l);
            out[k + 1] += v[k] * (0.5 * l);
        }
        out
    }

    pub fn apply_fy(&self, v: &DVector<C64>) -> DVector<C64> {
        let n = v.len();
        let mut out = DVector::zeros(n);
        for (k, &l) in self.ladder.iter().enumerate() {
            out[k] -= I * v[k + 1] * (0.5 * l);
            out[k + 1] += I * v[k] * (0.5 * l);
        }
        out
    }

    /// `F_z X`
    pub fn fz_left(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= C64::from(self.m[i]);
        }
        out
    }

    /// `X F_z`
    pub fn fz_right(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= C64::from(self.m[j]);
        }
        out
    }

    /// `F_y X`
    pub fn fy_left(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, x.ncols());
        for j in 0..x.ncols() {
            for (k, &l) in self.ladder.iter().enumerate() {
                let h = 0.5 * l;
                out[(k, j)] -= I * x[(k + 1, j)] * h;
                out[(k + 1, j)] += I * x[(k, j)] * h;
            }
        }
        out
    }

    /// `X F_y`
    pub fn fy_right(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (k, &l) in self.ladder.iter().enumerate() {
            let h = 0.5 * l;
            let src_k = x.column(k) * (-I * h);
            let src_k1 = x.column(k + 1) * (I * h);
            out.column_mut(k + 1).add_assign(&src_k);
            out.column_mut(k).add_assign(&src_k1);
        }
        out
    }

    fn check_state(&self, state: Spin) -> Result<(), SpinError> {
        if state != self.spin {
            return Err(SpinError::SpinMismatch { ops: self.spin, state });
        }
        Ok(())
    }
}

/// Pure state on the symmetric subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub spin: Spin,
    pub amps: DVector<C64>,
}

impl StateVector {
    pub fn new(spin: Spin, amps: DVector<C64>) -> Result<Self, SpinError> {
        if amps.len() != spin.dim() {
            return Err(SpinError::DimensionMismatch { op: spin.dim(), state: amps.len() });
        }
        Ok(Self { spin, amps })
    }

    /// The `F_z` eigenket with projection `m = F`.
    pub fn z_up(spin: Spin) -> Self {
        let mut amps = DVector::zeros(spin.dim());
        amps[0] = C64::from(1.0);
        Self { spin, amps }
    }

    pub fn norm_squared(&self) -> f64 {
        self.amps.norm_squared()
    }

    /// Rescales to unit norm and returns the squared norm before rescaling.
    pub fn normalize(&mut self) -> f64 {
        let n2 = self.norm_squared();
        if n2 > 0.0 {
            self.amps /= C64::from(n2.sqrt());
        }
        n2
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps.dotc(&other.amps)
    }

    /// `<F_z>` using the diagonal representation.
    pub fn expect_fz(&self, ops: &SpinOps) -> f64 {
        self.amps.iter().zip(ops.fz_diagonal()).map(|(a, m)| a.norm_sqr() * m).sum::<f64>()
            / self.norm_squared()
    }

    pub fn expect_fz_squared(&self, ops: &SpinOps) -> f64 {
        self.amps.iter().zip(ops.fz_diagonal()).map(|(a, m)| a.norm_sqr() * m * m).sum::<f64>()
            / self.norm_squared()
    }

    pub fn density_matrix(&self) -> DensityMatrix {
        DensityMatrix { spin: self.spin, rho: &self.amps * self.amps.adjoint() }
    }
}

/// Density operator on the symmetric subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    pub spin: Spin,
    pub rho: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    /// Replaces `rho` by its Hermitian part.
    pub fn hermitize(&mut self) {
        let adj = self.rho.adjoint();
        self.rho = (&self.rho + adj) * C64::from(0.5);
    }

    /// Rescales to unit trace and returns the trace before rescaling.
    pub fn normalize(&mut self) -> f64 {
        let tr = self.trace();
        if tr != 0.0 {
            self.rho /= C64::from(tr);
        }
        tr
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut h = self.clone();
        h.hermitize();
        h.rho.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// True when every eigenvalue is at least `-tolerance`.
    ///
    /// Runs a Cholesky factorization of the Hermitian part of
    /// `rho + tolerance * I` and fails on the first non-positive pivot, which
    /// is much cheaper than a full eigendecomposition.
    pub fn is_positive_within(&self, tolerance: f64) -> bool {
        let n = self.rho.nrows();
        let mut l = DMatrix::<C64>::zeros(n, n);
        for j in 0..n {
            let mut d = self.rho[(j, j)].re + tolerance;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) {
                return false;
            }
            let d = d.sqrt();
            l[(j, j)] = C64::from(d);
            for i in (j + 1)..n {
                let mut v = 0.5 * (self.rho[(i, j)] + self.rho[(j, i)].conj());
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = v / d;
            }
        }
        true
    }
}

/// States that can report the expectation of a Hermitian matrix.
pub trait Expectation {
    fn raw_expectation(&self, op: &DMatrix<C64>) -> Result<C64, SpinError>;
}

impl Expectation for StateVector {
    fn raw_expectation(&self, op: &DMatrix<C64>) -> Result<C64, SpinError> {
        if op.nrows() != self.amps.len() || op.ncols() != self.amps.len() {
            return Err(SpinError::DimensionMismatch { op: op.nrows(), state: self.amps.len() });
        }
        Ok(self.amps.dotc(&(op * &self.amps)) / self.norm_squared())
    }
}

impl Expectation for DensityMatrix {
    fn raw_expectation(&self, op: &DMatrix<C64>) -> Result<C64, SpinError> {
        if op.nrows() != self.rho.nrows() || op.ncols() != self.rho.ncols() {
            return Err(SpinError::DimensionMismatch { op: op.nrows(), state: self.rho.nrows() });
        }
        Ok(op.component_mul(&self.rho.transpose()).sum())
    }
}

/// `<op>` for a Hermitian `op`. Residual imaginary parts below
/// [`IMAG_TOLERANCE`] are dropped; larger ones are reported as corruption.
pub fn expectation<S: Expectation + ?Sized>(op: &DMatrix<C64>, state: &S) -> Result<f64, SpinError> {
    let z = state.raw_expectation(op)?;
    if z.im.abs() > IMAG_TOLERANCE * z.re.abs().max(1.0) {
        return Err(SpinError::ComplexExpectation(z.im));
    }
    Ok(z.re)
}

/// Spin coherent state `|F, +F>_x`.
///
/// Amplitudes are `2^{-F} sqrt(binom(2F, F+m))`, accumulated in log space so
/// that large `F` does not overflow.
pub fn coherent_state_x(spin: Spin) -> StateVector {
    let n = spin.twice() as usize;
    let mut log_binom = 0.0_f64;
    let log_half = -(n as f64) * std::f64::consts::LN_2;
    let mut amps = DVector::zeros(n + 1);
    for j in 0..=n {
        if j > 0 {
            log_binom += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        amps[j] = C64::from((0.5 * (log_binom + log_half)).exp());
    }
    let mut psi = StateVector { spin, amps };
    psi.normalize();
    psi
}

/// Point `(theta, xi)` of the two-parameter Gaussian family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub theta: f64,
    pub xi: f64,
    pub spin: Spin,
}

impl GaussianState {
    pub fn coherent(spin: Spin) -> Self {
        Self { theta: 0.0, xi: 0.0, spin }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.xi.is_finite()
    }

    /// `8 F xi`, the exponent that appears throughout the tangent geometry.
    pub fn squeezing_exponent(&self) -> f64 {
        8.0 * self.spin.value() * self.xi
    }

    /// Closed-form `(<v_theta,v_theta>, <v_xi,v_xi>, <v_xi,v_theta>)` in the
    /// lowest-order Holstein-Primakoff approximation.
    pub fn tangent_inner_products(&self) -> Result<(f64, f64, f64), SpinError> {
        let f = self.spin.value();
        let x = self.squeezing_exponent();
        if x > 64.0 {
            return Err(SpinError::SqueezingOverflow(x));
        }
        Ok((0.5 * f * x.exp(), 8.0 * f * f, 0.0))
    }
}

/// `-2 i xi (F_z F_y + F_y F_z)`.
fn squeezing_generator(ops: &SpinOps, xi: f64) -> DMatrix<C64> {
    let fy = ops.fy();
    let fz = ops.fz();
    (fz * fy + fy * fz) * (-2.0 * xi * I)
}

fn unitary_exp(generator: DMatrix<C64>) -> Result<DMatrix<C64>, SpinError> {
    let u = generator.exp();
    if u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(SpinError::ExponentialOverflow(f64::INFINITY));
    }
    Ok(u)
}

/// `exp(-i theta F_y)` as a dense matrix.
pub fn rotation_y(ops: &SpinOps, theta: f64) -> Result<DMatrix<C64>, SpinError> {
    unitary_exp(ops.fy() * (-theta * I))
}

/// `exp(-2 i xi (F_z F_y + F_y F_z))` as a dense matrix.
pub fn squeezing(ops: &SpinOps, xi: f64) -> Result<DMatrix<C64>, SpinError> {
    unitary_exp(squeezing_generator(ops, xi))
}

/// `R_y(theta) S(xi) |F,+F>_x`.
pub fn gaussian_state_ket(g: &GaussianState, ops: &SpinOps) -> Result<StateVector, SpinError> {
    ops.check_state(g.spin)?;
    let x = coherent_state_x(g.spin);
    let mut amps = x.amps;
    if g.xi != 0.0 {
        amps = squeezing(ops, g.xi)? * amps;
    }
    if g.theta != 0.0 {
        amps = rotation_y(ops, g.theta)? * amps;
    }
    let psi = StateVector { spin: g.spin, amps };
    let n2 = psi.norm_squared();
    if !n2.is_finite() || (n2 - 1.0).abs() > 1e-6 {
        return Err(SpinError::ExponentialOverflow(n2));
    }
    Ok(psi)
}

/// Finite-difference tangent vectors of the Gaussian family at `g` and their
/// inner products `(<v_theta,v_theta>, <v_xi,v_xi>, <v_xi,v_theta>)`.
pub fn tangent_inner_products_numeric(
    g: &GaussianState,
    ops: &SpinOps,
    step: f64,
) -> Result<(f64, f64, C64), SpinError> {
    if !(step >= 1e-9) {
        return Err(SpinError::StepTooSmall(step));
    }
    let at = |theta: f64, xi: f64| gaussian_state_ket(&GaussianState { theta, xi, spin: g.spin }, ops);
    let h = C64::from(0.5 / step);
    let v_theta = (at(g.theta + step, g.xi)?.amps - at(g.theta - step, g.xi)?.amps) * h;
    let v_xi = (at(g.theta, g.xi + step)?.amps - at(g.theta, g.xi - step)?.amps) * h;
    Ok((v_theta.norm_squared(), v_xi.norm_squared(), v_xi.dotc(&v_theta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spin(f: f64) -> Spin {
        Spin::new(f).unwrap()
    }

    fn commutator(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
        a * b - b * a
    }

    #[test]
    fn rejects_non_half_integer_spin() {
        assert!(Spin::new(0.3).is_err());
        assert!(Spin::new(0.0).is_err());
        assert!(Spin::new(-1.0).is_err());
        assert_eq!(Spin::new(2.5).unwrap().dim(), 6);
        assert_eq!(spin(0.5).to_string(), "1/2");
        assert_eq!(spin(100.0).to_string(), "100");
    }

    #[test]
    fn rejects_dimension_over_cap() {
        assert!(build_collective_ops(spin(2000.0)).is_ok());
        assert_eq!(
            build_collective_ops(spin(2000.5)).unwrap_err(),
            SpinError::DimensionTooLarge { dim: 4002 }
        );
    }

    #[test]
    fn spin_one_fz_is_diag() {
        let ops = build_collective_ops(spin(1.0)).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::from(1.0),
            C64::from(0.0),
            C64::from(-1.0),
        ]));
        assert_eq!(ops.fz(), &expected);
    }

    #[test]
    fn dimension_is_linear_in_f() {
        assert_eq!(build_collective_ops(spin(100.0)).unwrap().dim(), 201);
    }

    #[test]
    fn commutator_f10() {
        let ops = build_collective_ops(spin(10.0)).unwrap();
        let c = commutator(ops.fx(), ops.fy()) - ops.fz() * I;
        assert!(c.norm() < 1e-12);
    }

    #[test]
    fn banded_apply_matches_dense() {
        let ops = build_collective_ops(spin(3.5)).unwrap();
        let v = DVector::from_iterator(8, (0..8).map(|k| C64::new(k as f64 - 2.0, 0.3 * k as f64)));
        assert!((ops.apply_fx(&v) - ops.fx() * &v).norm() < 1e-14);
        assert!((ops.apply_fy(&v) - ops.fy() * &v).norm() < 1e-14);
        assert!((ops.apply_fz(&v) - ops.fz() * &v).norm() < 1e-14);
    }

    #[test]
    fn coherent_state_half() {
        let s = spin(0.5);
        let ops = build_collective_ops(s).unwrap();
        let psi = coherent_state_x(s);
        assert_relative_eq!(expectation(ops.fx(), &psi).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn coherent_state_moments() {
        let s = spin(10.0);
        let ops = build_collective_ops(s).unwrap();
        let psi = coherent_state_x(s);
        assert_relative_eq!(expectation(ops.fx(), &psi).unwrap(), 10.0, epsilon = 1e-12);
        assert!(expectation(ops.fy(), &psi).unwrap().abs() < 1e-12);
        assert!(expectation(ops.fz(), &psi).unwrap().abs() < 1e-12);

        let s = spin(100.0);
        let ops = build_collective_ops(s).unwrap();
        let psi = coherent_state_x(s);
        let fz2 = ops.fz() * ops.fz();
        assert_relative_eq!(expectation(&fz2, &psi).unwrap(), 50.0, epsilon = 1e-9);
        assert_relative_eq!(psi.expect_fz_squared(&ops).sqrt(), 50f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn coherent_state_matches_rotated_z_eigenket() {
        // |F,F>_x = exp(-i pi/2 F_y) |F,F>_z
        let s = spin(10.0);
        let ops = build_collective_ops(s).unwrap();
        let rotated = rotation_y(&ops, std::f64::consts::FRAC_PI_2).unwrap() * StateVector::z_up(s).amps;
        let psi = coherent_state_x(s);
        assert!((rotated - psi.amps).norm() < 1e-10);
    }

    #[test]
    fn expectation_detects_mismatch_and_corruption() {
        let ops = build_collective_ops(spin(1.0)).unwrap();
        let psi = coherent_state_x(spin(2.0));
        assert!(matches!(expectation(ops.fz(), &psi), Err(SpinError::DimensionMismatch { .. })));

        let psi = coherent_state_x(spin(1.0));
        let not_hermitian = ops.fx() * I;
        assert!(matches!(expectation(&not_hermitian, &psi), Err(SpinError::ComplexExpectation(_))));
    }

    #[test]
    fn density_matrix_expectation_matches_ket() {
        let s = spin(4.0);
        let ops = build_collective_ops(s).unwrap();
        let g = GaussianState { theta: 0.4, xi: 0.01, spin: s };
        let psi = gaussian_state_ket(&g, &ops).unwrap();
        let rho = psi.density_matrix();
        for op in [ops.fx(), ops.fy(), ops.fz()] {
            assert_relative_eq!(
                expectation(op, &psi).unwrap(),
                expectation(op, &rho).unwrap(),
                epsilon = 1e-12
            );
        }
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        assert!(rho.is_positive_within(1e-9));
    }

    #[test]
    fn gaussian_ket_identity_point_is_coherent() {
        let s = spin(6.0);
        let ops = build_collective_ops(s).unwrap();
        let psi = gaussian_state_ket(&GaussianState::coherent(s), &ops).unwrap();
        assert!((psi.amps - coherent_state_x(s).amps).norm() < 1e-14);
    }

    #[test]
    fn gaussian_ket_quarter_turn() {
        let s = spin(100.0);
        let ops = build_collective_ops(s).unwrap();
        let g = GaussianState { theta: std::f64::consts::FRAC_PI_2, xi: 0.0, spin: s };
        let psi = gaussian_state_ket(&g, &ops).unwrap();
        assert_relative_eq!(psi.expect_fz(&ops), -100.0, epsilon = 1e-8);
    }

    #[test]
    fn gaussian_ket_rejects_foreign_ops() {
        let ops = build_collective_ops(spin(2.0)).unwrap();
        let g = GaussianState::coherent(spin(3.0));
        assert!(matches!(gaussian_state_ket(&g, &ops), Err(SpinError::SpinMismatch { .. })));
    }

    #[test]
    fn analytic_tangent_products_guard_overflow() {
        let g = GaussianState { theta: 0.0, xi: 0.2, spin: spin(50.0) };
        assert!(matches!(g.tangent_inner_products(), Err(SpinError::SqueezingOverflow(_))));
    }

    #[test]
    fn tangent_step_too_small() {
        let s = spin(2.0);
        let ops = build_collective_ops(s).unwrap();
        assert!(matches!(
            tangent_inner_products_numeric(&GaussianState::coherent(s), &ops, 1e-12),
            Err(SpinError::StepTooSmall(_))
        ));
    }

    #[test]
    fn tangent_theta_norm_at_coherent_point() {
        let s = spin(50.0);
        let ops = build_collective_ops(s).unwrap();
        let (tt, _, cross) =
            tangent_inner_products_numeric(&GaussianState::coherent(s), &ops, DEFAULT_TANGENT_STEP).unwrap();
        assert_relative_eq!(tt, 25.0, epsilon = 1e-6);
        assert!(cross.norm() < 1e-6);
    }

    fn rel(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn casimir_and_commutators() {
        for f in [0.5, 1.0, 10.0, 100.0] {
            let ops = build_collective_ops(spin(f)).unwrap();
            let (x, y, z) = (ops.fx(), ops.fy(), ops.fz());
            let casimir = x * x + y * y + z * z;
            assert!(rel(&casimir, &(ops.identity() * C64::from(f * (f + 1.0)))) < 1e-10);
            assert!(rel(&commutator(x, y), &(z * I)) < 1e-10);
            assert!(rel(&commutator(y, z), &(x * I)) < 1e-10);
            assert!(rel(&commutator(z, x), &(y * I)) < 1e-10);
        }
    }

    #[test]
    fn rotation_matches_wigner_small_d() {
        // d^F_{m,F}(beta) = sqrt(C(2F, F-m)) cos(beta/2)^(F+m) sin(beta/2)^(F-m)
        let f = 10.0;
        let beta: f64 = 0.7;
        let ops = build_collective_ops(spin(f)).unwrap();
        let col = rotation_y(&ops, beta).unwrap().column(0).into_owned();
        let n = 20usize;
        let mut binom = 1.0f64;
        for k in 0..=n {
            let m = f - k as f64;
            let d = binom.sqrt() * (beta / 2.0).cos().powf(f + m) * (beta / 2.0).sin().powf(f - m);
            assert!((col[k] - C64::from(d)).norm() < 1e-12, "k = {k}");
            binom = binom * (n - k) as f64 / (k + 1) as f64;
        }
    }

    proptest::proptest! {
        #[test]
        fn algebra_holds_for_any_spin(twice in 1u32..80) {
            let ops = build_collective_ops(Spin::from_twice(twice).unwrap()).unwrap();
            proptest::prop_assert!(rel(&commutator(ops.fx(), ops.fy()), &(ops.fz() * I)) < 1e-10);
            let trace: C64 = ops.fz().trace();
            proptest::prop_assert!(trace.norm() < 1e-9);
        }
    }

}
