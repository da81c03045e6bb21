//! Run configuration: a TOML file with one section per subcommand, overlaid
//! by command-line flags.

use std::path::Path;

use doublepass_core::ensemble::Coupling;
use doublepass_core::{CrbNoiseMode, ParticleInnovation, SdeScheme};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const SECTIONS: [&str; 5] = ["trajectory", "compare-filters", "crb-scan", "particle-scan", "bias-scan"];

/// Matched single/double pass SSE trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub f: f64,
    pub m: f64,
    pub k: f64,
    pub omega: f64,
    pub gamma: f64,
    pub t_final: f64,
    pub dt: f64,
    pub master_seed: u64,
    pub scheme: SdeScheme,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            f: 100.0,
            m: 1.7,
            k: 1.7,
            omega: 2.0,
            gamma: 1.0,
            t_final: 1.0,
            dt: 1e-4,
            master_seed: 7,
            scheme: SdeScheme::EulerIto,
        }
    }
}

/// Exact and projection filters on one shared record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub f: f64,
    pub m: f64,
    pub k: f64,
    pub omega: f64,
    pub gamma: f64,
    pub t_final: f64,
    pub dt: f64,
    pub master_seed: u64,
    /// Relative errors are reported where `|pi_exact| > floor_fraction * F`.
    pub floor_fraction: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            f: 100.0,
            m: 1.7,
            k: 1.7,
            omega: 2.0,
            gamma: 1.0,
            t_final: 1.0,
            dt: 1e-4,
            master_seed: 0,
            floor_fraction: 0.05,
        }
    }
}

/// Settings shared by the three ensemble commands. Setting both `m` and `k`
/// fixes the couplings; otherwise `M = K = c / (t_final F^alpha)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub f_values: Vec<f64>,
    pub realizations: usize,
    pub c: f64,
    pub alpha: f64,
    pub m: Option<f64>,
    pub k: Option<f64>,
    pub gamma: f64,
    pub b_true: f64,
    pub t_final: f64,
    pub dt: f64,
    pub master_seed: u64,
    pub delta: f64,
    pub crb_mode: CrbNoiseMode,
    pub richardson: bool,
    pub d: f64,
    pub d_values: Vec<f64>,
    pub np: usize,
    pub innovation: ParticleInnovation,
}

impl ScanSection {
    pub fn crb() -> Self {
        Self { f_values: vec![25.0, 50.0, 100.0, 200.0, 400.0], ..Self::base() }
    }

    pub fn particle() -> Self {
        Self { f_values: vec![100.0, 200.0, 400.0, 1000.0], ..Self::base() }
    }

    pub fn bias() -> Self {
        Self { f_values: vec![100.0], ..Self::base() }
    }

    fn base() -> Self {
        Self {
            f_values: Vec::new(),
            realizations: 100,
            c: 0.5888,
            alpha: 0.77,
            m: None,
            k: None,
            gamma: 1.0,
            b_true: 0.0,
            t_final: 1.0,
            dt: 1e-4,
            master_seed: 0,
            delta: doublepass_core::estimation::DEFAULT_DELTA,
            crb_mode: CrbNoiseMode::SharedInnovation,
            richardson: true,
            d: 1e3,
            d_values: vec![1e3, 1e4, 1e5],
            np: 10_000,
            innovation: ParticleInnovation::Shared,
        }
    }

    pub fn coupling(&self) -> Result<Coupling, CliError> {
        match (self.m, self.k) {
            (Some(m), Some(k)) => Ok(Coupling::Fixed { m, k }),
            (None, None) => Ok(Coupling::Schedule { c: self.c, alpha: self.alpha }),
            _ => Err(CliError::Config("set both m and k, or neither to use the (c, alpha) schedule".into())),
        }
    }
}

impl Default for ScanSection {
    fn default() -> Self {
        Self::base()
    }
}

/// Reads a config file and returns the table for `section` (empty when the
/// section is absent). Unknown sections are rejected.
pub fn load_section(path: &Path, section: &str) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for (key, value) in &doc {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(CliError::Config(format!("unknown section [{key}] in {}", path.display())));
        }
        if !value.is_table() {
            return Err(CliError::Config(format!("[{key}] must be a table")));
        }
    }
    match doc.get(section) {
        Some(v) => match serde_json::to_value(v) {
            Ok(Value::Object(map)) => Ok(map),
            _ => Err(CliError::Config(format!("[{section}] is not a table"))),
        },
        None => Ok(Map::new()),
    }
}

/// Builds the resolved config: defaults, then the file section, then every
/// flag that was given.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    file: Map<String, Value>,
    flags: Map<String, Value>,
) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(defaults).map_err(|e| CliError::Config(e.to_string()))?
    else {
        return Err(CliError::Config("config must be a table".into()));
    };
    for (key, value) in file {
        if !merged.contains_key(&key) {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        merged.insert(key, value);
    }
    for (key, value) in flags {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} must be positive and finite")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), CliError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} must be non-negative and finite")))
    }
}

fn step(dt: f64, t_final: f64) -> Result<(), CliError> {
    positive("t_final", t_final)?;
    if !(dt > 0.0 && dt <= doublepass_core::sde::MAX_DT) {
        return Err(CliError::Config(format!("dt = {dt} must lie in (0, {}]", doublepass_core::sde::MAX_DT)));
    }
    if dt > t_final {
        return Err(CliError::Config(format!("dt = {dt} exceeds t_final = {t_final}")));
    }
    Ok(())
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("F", self.f)?;
        non_negative("M", self.m)?;
        non_negative("K", self.k)?;
        positive("gamma", self.gamma)?;
        if !self.omega.is_finite() {
            return Err(CliError::Config("omega must be finite".into()));
        }
        step(self.dt, self.t_final)
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        positive("F", self.f)?;
        non_negative("M", self.m)?;
        non_negative("K", self.k)?;
        positive("gamma", self.gamma)?;
        if !self.omega.is_finite() {
            return Err(CliError::Config("omega must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.floor_fraction) {
            return Err(CliError::Config(format!("floor_fraction = {} must lie in [0, 1)", self.floor_fraction)));
        }
        step(self.dt, self.t_final)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        match v {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_file() {
        let file = obj(json!({"f": 20.0, "m": 0.5}));
        let flags = obj(json!({"f": 30.0, "k": null}));
        let cfg: TrajectoryConfig = resolve(TrajectoryConfig::default(), file, flags).unwrap();
        assert_eq!(cfg.f, 30.0);
        assert_eq!(cfg.m, 0.5);
        assert_eq!(cfg.k, 1.7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = obj(json!({"frequency": 2.0}));
        assert!(resolve(TrajectoryConfig::default(), file, Map::new()).is_err());
    }

    #[test]
    fn wrong_types_are_rejected() {
        let file = obj(json!({"realizations": "many"}));
        assert!(resolve(ScanSection::crb(), file, Map::new()).is_err());
    }

    #[test]
    fn half_fixed_coupling_is_an_error() {
        let s = ScanSection { m: Some(1.0), ..ScanSection::crb() };
        assert!(s.coupling().is_err());
        let s = ScanSection { m: Some(1.0), k: Some(0.0), ..ScanSection::crb() };
        assert_eq!(s.coupling().unwrap(), Coupling::Fixed { m: 1.0, k: 0.0 });
    }

    #[test]
    fn validation_catches_bad_physics() {
        assert!(TrajectoryConfig { dt: 0.5, ..Default::default() }.validate().is_err());
        assert!(TrajectoryConfig { m: -1.0, ..Default::default() }.validate().is_err());
        assert!(CompareConfig { f: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrajectoryConfig::default().validate().is_ok());
    }
}
