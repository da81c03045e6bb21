//! Seeded Wiener increments and the two stepping rules used by every filter.
//!
//! A [`NoiseStream`] is a ChaCha20 keystream selected by `(master_seed,
//! stream_index)`. ChaCha is counter based, so stream `i` is reproducible on its
//! own regardless of how many other streams were drawn or on which thread.
//! Standard normals come from the Box-Muller transform applied to consecutive
//! pairs of 53-bit uniforms; both outputs of each pair are used, cosine branch
//! first.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spin::C64;

pub const DEFAULT_DT: f64 = 1e-4;
pub const MAX_DT: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("time step {0} must lie in (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error("non-finite value in SDE {0}")]
    NonFinite(&'static str),
}

/// Replayable source of Wiener increments with variance `dt`.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    master_seed: u64,
    stream_index: u64,
    dt: f64,
    sqrt_dt: f64,
    counter: u64,
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NoiseStream {
    pub fn new(master_seed: u64, stream_index: u64, dt: f64) -> Result<Self, SdeError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SdeError::InvalidStep(dt));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Ok(Self { master_seed, stream_index, dt, sqrt_dt: dt.sqrt(), counter: 0, rng, spare: None })
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of increments drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Fresh copy of this stream rewound to its first increment.
    pub fn replay(&self) -> Self {
        Self::new(self.master_seed, self.stream_index, self.dt).expect("validated on construction")
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// Next Wiener increment `dW ~ N(0, dt)`.
    pub fn next_increment(&mut self) -> f64 {
        self.counter += 1;
        self.sqrt_dt * self.next_standard_normal()
    }

    pub fn take_increments(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_increment()).collect()
    }
}

/// Sums consecutive groups of `factor` fine increments, giving the same
/// Brownian path sampled on a coarser grid.
pub fn coarsen_increments(fine: &[f64], factor: usize) -> Vec<f64> {
    assert!(factor > 0, "coarsening factor must be positive");
    fine.chunks(factor).map(|c| c.iter().sum()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SdeScheme {
    #[default]
    EulerIto,
    HeunStratonovich,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeStepperConfig {
    pub dt: f64,
    pub scheme: SdeScheme,
}

impl Default for SdeStepperConfig {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, scheme: SdeScheme::EulerIto }
    }
}

impl SdeStepperConfig {
    pub fn new(dt: f64, scheme: SdeScheme) -> Result<Self, SdeError> {
        if !(dt > 0.0 && dt <= MAX_DT) {
            return Err(SdeError::InvalidStep(dt));
        }
        Ok(Self { dt, scheme })
    }

    /// Number of steps covering `[0, t_final]`.
    pub fn steps_for(&self, t_final: f64) -> usize {
        (t_final / self.dt).round() as usize
    }
}

/// Vector-space operations the steppers need.
pub trait SdeState: Clone {
    /// `self += a * x`
    fn axpy(&mut self, a: f64, x: &Self);
    fn all_finite(&self) -> bool;
}

impl SdeState for f64 {
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl SdeState for Vec<f64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x) {
            *s += a * v;
        }
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl SdeState for DVector<C64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.axpy(C64::from(a), x, C64::from(1.0));
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl SdeState for DMatrix<C64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += v * a);
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

fn check_scalars(dt: f64, dw: f64) -> Result<(), SdeError> {
    if !dt.is_finite() {
        return Err(SdeError::NonFinite("time step"));
    }
    if !dw.is_finite() {
        return Err(SdeError::NonFinite("increment"));
    }
    Ok(())
}

/// `state + drift dt + diffusion dW`, with drift and diffusion already
/// evaluated at the pre-step state.
pub fn euler_ito_step<S: SdeState>(state: &S, drift: &S, diffusion: &S, dt: f64, dw: f64) -> Result<S, SdeError> {
    check_scalars(dt, dw)?;
    if !state.all_finite() {
        return Err(SdeError::NonFinite("state"));
    }
    if !drift.all_finite() {
        return Err(SdeError::NonFinite("drift"));
    }
    if !diffusion.all_finite() {
        return Err(SdeError::NonFinite("diffusion"));
    }
    let mut next = state.clone();
    next.axpy(dt, drift);
    next.axpy(dw, diffusion);
    Ok(next)
}

/// Heun predictor-corrector step, which converges to the Stratonovich
/// solution.
pub fn heun_stratonovich_step<S, A, B>(state: &S, drift: A, diffusion: B, dt: f64, dw: f64) -> Result<S, SdeError>
where
    S: SdeState,
    A: Fn(&S) -> S,
    B: Fn(&S) -> S,
{
    check_scalars(dt, dw)?;
    if !state.all_finite() {
        return Err(SdeError::NonFinite("state"));
    }
    let f0 = drift(state);
    let g0 = diffusion(state);
    let predictor = euler_ito_step(state, &f0, &g0, dt, dw)?;
    let f1 = drift(&predictor);
    let g1 = diffusion(&predictor);
    if !f1.all_finite() {
        return Err(SdeError::NonFinite("drift"));
    }
    if !g1.all_finite() {
        return Err(SdeError::NonFinite("diffusion"));
    }
    let mut next = state.clone();
    next.axpy(0.5 * dt, &f0);
    next.axpy(0.5 * dt, &f1);
    next.axpy(0.5 * dw, &g0);
    next.axpy(0.5 * dw, &g1);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_replay_identically() {
        let mut a = NoiseStream::new(42, 3, 1e-3).unwrap();
        let mut b = NoiseStream::new(42, 3, 1e-3).unwrap();
        let xa = a.take_increments(1001);
        let xb = b.take_increments(1001);
        assert_eq!(xa, xb);
        assert_eq!(a.counter(), 1001);
        let mut c = a.replay();
        assert_eq!(c.take_increments(1001), xa);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = NoiseStream::new(42, 0, 1e-3).unwrap();
        let mut b = NoiseStream::new(42, 1, 1e-3).unwrap();
        assert_ne!(a.take_increments(8), b.take_increments(8));
    }

    #[test]
    fn rejects_bad_dt() {
        assert!(NoiseStream::new(1, 0, 0.0).is_err());
        assert!(NoiseStream::new(1, 0, f64::NAN).is_err());
        assert!(SdeStepperConfig::new(0.1, SdeScheme::EulerIto).is_err());
        assert!(SdeStepperConfig::new(-1e-4, SdeScheme::EulerIto).is_err());
        assert_eq!(SdeStepperConfig::default().steps_for(1.0), 10_000);
    }

    #[test]
    fn zero_coefficients_leave_state() {
        let x = vec![1.0, -2.0, 3.5];
        let z = vec![0.0; 3];
        assert_eq!(euler_ito_step(&x, &z, &z, 1e-3, 0.7).unwrap(), x);
        let y = heun_stratonovich_step(&x, |_| vec![0.0; 3], |_| vec![0.0; 3], 1e-3, 0.7).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deterministic_limit_is_exact() {
        let a = 0.37;
        let mut x = 1.0;
        for _ in 0..1000 {
            x = euler_ito_step(&x, &a, &0.0, 1e-3, 0.0).unwrap();
        }
        assert!((x - (1.0 + a)).abs() < 1e-12);
    }

    #[test]
    fn nan_inputs_rejected() {
        assert!(euler_ito_step(&1.0, &f64::NAN, &0.0, 1e-3, 0.1).is_err());
        assert!(euler_ito_step(&1.0, &0.0, &0.0, 1e-3, f64::INFINITY).is_err());
        assert!(heun_stratonovich_step(&1.0, |_| f64::NAN, |_| 0.0, 1e-3, 0.1).is_err());
    }

    #[test]
    fn coarsening_preserves_sum() {
        let mut s = NoiseStream::new(5, 0, 1e-4).unwrap();
        let fine = s.take_increments(64);
        let coarse = coarsen_increments(&fine, 8);
        assert_eq!(coarse.len(), 8);
        let total: f64 = fine.iter().sum();
        assert!((coarse.iter().sum::<f64>() - total).abs() < 1e-14);
    }

    fn strong_errors(scheme: SdeScheme) -> Vec<f64> {
        // dX = mu X dt + sigma X dW (Itô) has X_T = exp((mu - sigma^2/2) T + sigma W_T);
        // read as Stratonovich it has X_T = exp(mu T + sigma W_T).
        let (mu, sigma) = (0.5, 0.8);
        let factors = [64, 32, 16, 8];
        let mut errs = vec![0.0; factors.len()];
        let paths = 200;
        for path in 0..paths {
            let mut noise = NoiseStream::new(9, path, 1.0 / 1024.0).unwrap();
            let fine = noise.take_increments(1024);
            let w: f64 = fine.iter().sum();
            let exact = match scheme {
                SdeScheme::EulerIto => ((mu - 0.5 * sigma * sigma) + sigma * w).exp(),
                SdeScheme::HeunStratonovich => (mu + sigma * w).exp(),
            };
            for (e, &factor) in errs.iter_mut().zip(&factors) {
                let dws = coarsen_increments(&fine, factor);
                let dt = factor as f64 / 1024.0;
                let mut x = 1.0f64;
                for dw in dws {
                    x = match scheme {
                        SdeScheme::EulerIto => euler_ito_step(&x, &(mu * x), &(sigma * x), dt, dw).unwrap(),
                        SdeScheme::HeunStratonovich => {
                            heun_stratonovich_step(&x, |y| mu * y, |y| sigma * y, dt, dw).unwrap()
                        }
                    };
                }
                *e += (x - exact).abs() / paths as f64;
            }
        }
        errs
    }

    fn order(errs: &[f64]) -> f64 {
        (errs[0] / errs[errs.len() - 1]).log2() / (errs.len() - 1) as f64
    }

    #[test]
    fn euler_strong_order_one_half() {
        let p = order(&strong_errors(SdeScheme::EulerIto));
        assert!((0.35..0.75).contains(&p), "order {p}");
    }

    #[test]
    fn heun_converges_to_stratonovich_at_order_one() {
        let p = order(&strong_errors(SdeScheme::HeunStratonovich));
        assert!((0.8..1.3).contains(&p), "order {p}");
    }

    #[test]
    fn increments_have_wiener_moments() {
        let dt = 1e-3;
        let n = 200_000;
        let xs = NoiseStream::new(1, 7, dt).unwrap().take_increments(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let lag1 = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / ((n - 1) as f64 * dt);
        let se = (dt / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se);
        assert!((var / dt - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        assert!(lag1.abs() < 4.0 / (n as f64).sqrt());
    }

    proptest::proptest! {
        #[test]
        fn coarsening_keeps_the_path(seed in 0u64..1000, factor in 1usize..9, blocks in 1usize..50) {
            let fine = NoiseStream::new(seed, 0, 1e-3).unwrap().take_increments(factor * blocks);
            let coarse = coarsen_increments(&fine, factor);
            proptest::prop_assert_eq!(coarse.len(), blocks);
            for (j, c) in coarse.iter().enumerate() {
                let direct: f64 = fine[j * factor..(j + 1) * factor].iter().sum();
                proptest::prop_assert!((c - direct).abs() < 1e-15);
            }
        }
    }

}
