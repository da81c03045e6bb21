//! Field estimation with a double-passed collective spin.

pub mod ensemble;
pub mod estimation;
pub mod filters;
pub mod sde;
pub mod spin;

pub use ensemble::{Coupling, PowerLawFit, ScanConfig, ScanResult, ScanTask};
pub use estimation::{CrbConfig, CrbNoiseMode, FieldEstimate, ParticleEnsemble, ParticleInnovation, QuantumParticle};
pub use filters::{CouplingParams, Drive, FilterError, FilterKind, TrajectoryRecord, TruthModel};
pub use sde::{NoiseStream, SdeError, SdeScheme, SdeStepperConfig};
pub use spin::{DensityMatrix, GaussianState, Spin, SpinError, SpinOps, StateVector, C64};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
