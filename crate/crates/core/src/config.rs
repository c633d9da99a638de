//! JSON run configuration.
//!
//! Unknown keys are rejected everywhere. Every validation error names the
//! offending key in dotted form (`simulation.dt`, `domain.r0`, ...).

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainKind, DomainSpec};
use crate::experiment::ReplicationSettings;
use crate::pointprocess::{Density, MeasureSpec, ScalingRule, Schedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config is not valid: {0}")]
    Syntax(String),
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Horizons at which replications are run.
    pub tau: Vec<f64>,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub seed: u64,
}

/// Geometry plus the diffusion matrix: either `sigma2` (for `sigma2 * I`)
/// or a full `sigma` matrix given as rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Interval {
        length: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<Vec<f64>>>,
    },
    Box {
        lengths: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<Vec<f64>>>,
    },
    Disk {
        r0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    #[default]
    Lebesgue,
    Density,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    #[serde(default)]
    pub base: BaseKind,
    /// Named density for `base = "density"`; only `"bump"` is built in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Overrides the ground eigenvalue in `g(tau)`; required on domains
    /// without a closed-form basis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub kind: Schedule,
    /// Grid of the `a_tau -> a` convergence table.
    #[serde(default = "default_convergence_tau")]
    pub convergence_tau: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda1: None,
            kind: Schedule::Exact,
            convergence_tau: default_convergence_tau(),
        }
    }
}

fn default_convergence_tau() -> Vec<f64> {
    vec![0.5, 1.0, 1.5, 2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub dt: f64,
    pub n_paths: u64,
    pub n_reps: u64,
    pub bridge: bool,
    /// Largest expected number of particle-steps a replication run may take.
    pub budget: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            n_paths: 100_000,
            n_reps: 2000,
            bridge: true,
            budget: 1e10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_bands: usize,
    pub s_grid: Vec<f64>,
    pub bootstrap: usize,
    /// Significance floor of every statistical gate.
    pub significance: f64,
    /// Sup-norm truncation tolerance of the survival series.
    pub spectral_tol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_bands: 20,
            s_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            bootstrap: 1000,
            significance: 1e-3,
            spectral_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory receiving the CSV files.
    pub csv_dir: PathBuf,
    pub report: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            csv_dir: PathBuf::from("out"),
            report: PathBuf::from("out/report.txt"),
        }
    }
}

/// Parse and validate a JSON document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be finite and > 0, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.domain_spec()?;
        if let (BaseKind::Density, None) = (self.measure.base, &self.measure.density) {
            return Err(invalid("measure.density", "required when measure.base is \"density\""));
        }
        if let Some(name) = &self.measure.density {
            if self.measure.base != BaseKind::Density {
                return Err(invalid("measure.density", "only allowed when measure.base is \"density\""));
            }
            if name != "bump" {
                return Err(invalid("measure.density", format!("unknown density `{name}` (known: bump)")));
            }
        }
        if let Some(l) = self.schedule.lambda1 {
            positive("schedule.lambda1", l)?;
        }
        if self.tau.is_empty() {
            return Err(invalid("tau", "needs at least one horizon"));
        }
        for &t in &self.tau {
            positive("tau", t)?;
        }
        if self.schedule.convergence_tau.is_empty() {
            return Err(invalid("schedule.convergence_tau", "needs at least one horizon"));
        }
        for &t in &self.schedule.convergence_tau {
            positive("schedule.convergence_tau", t)?;
        }
        if self.schedule.convergence_tau.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("schedule.convergence_tau", "must be strictly increasing"));
        }
        let sim = &self.simulation;
        positive("simulation.dt", sim.dt)?;
        positive("simulation.budget", sim.budget)?;
        if sim.n_paths == 0 {
            return Err(invalid("simulation.n_paths", "must be >= 1"));
        }
        if sim.n_reps < crate::experiment::MIN_FIT_RECORDS as u64 {
            return Err(invalid(
                "simulation.n_reps",
                format!("must be >= {} for the goodness-of-fit test", crate::experiment::MIN_FIT_RECORDS),
            ));
        }
        let an = &self.analysis;
        if an.n_bands < 2 {
            return Err(invalid("analysis.n_bands", "must be >= 2"));
        }
        if an.s_grid.is_empty() || an.s_grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("analysis.s_grid", "must be a non-empty list of values in [0, 1]"));
        }
        if an.bootstrap < 2 {
            return Err(invalid("analysis.bootstrap", "must be >= 2"));
        }
        if !(an.significance > 0.0 && an.significance < 1.0) {
            return Err(invalid("analysis.significance", "must lie in (0, 1)"));
        }
        positive("analysis.spectral_tol", an.spectral_tol)?;
        Ok(())
    }

    pub fn domain_spec(&self) -> Result<DomainSpec, ConfigError> {
        let (kind, sigma2, sigma, dim) = match &self.domain {
            DomainConfig::Interval { length, sigma2, sigma } => {
                positive("domain.length", *length)?;
                (DomainKind::Interval { length: *length }, sigma2, sigma, 1)
            }
            DomainConfig::Box { lengths, sigma2, sigma } => {
                if lengths.is_empty() {
                    return Err(invalid("domain.lengths", "needs at least one side"));
                }
                for &l in lengths {
                    positive("domain.lengths", l)?;
                }
                (DomainKind::Box { lengths: lengths.clone() }, sigma2, sigma, lengths.len())
            }
            DomainConfig::Disk { r0, sigma2, sigma } => {
                positive("domain.r0", *r0)?;
                (DomainKind::Disk { radius: *r0 }, sigma2, sigma, 2)
            }
        };
        let matrix = match (sigma2, sigma) {
            (Some(s2), None) => {
                positive("domain.sigma2", *s2)?;
                DMatrix::identity(dim, dim) * *s2
            }
            (None, Some(rows)) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(invalid("domain.sigma", format!("must be a {dim}x{dim} matrix")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
            (Some(_), Some(_)) => return Err(invalid("domain.sigma", "give either sigma2 or sigma, not both")),
            (None, None) => return Err(invalid("domain.sigma2", "missing (or give the full domain.sigma matrix)")),
        };
        DomainSpec::new(kind, matrix).map_err(|e| invalid("domain.sigma", e.to_string()))
    }

    pub fn measure_spec(&self, domain: &DomainSpec) -> Result<MeasureSpec, ConfigError> {
        match self.measure.base {
            BaseKind::Lebesgue => Ok(MeasureSpec::lebesgue(domain)),
            BaseKind::Zero => Ok(MeasureSpec::zero(domain)),
            BaseKind::Density => {
                MeasureSpec::with_density(domain, Density::Bump).map_err(|e| invalid("measure.density", e.to_string()))
            }
        }
    }

    /// Scaling rule with `lambda1` from the override or else `ground`.
    pub fn scaling_rule(&self, domain: &DomainSpec, ground: Option<f64>) -> Result<ScalingRule, ConfigError> {
        let lambda1 = self
            .schedule
            .lambda1
            .or(ground)
            .ok_or_else(|| invalid("schedule.lambda1", "required: the domain has no closed-form ground eigenvalue"))?;
        ScalingRule::new(lambda1, self.measure_spec(domain)?, self.schedule.kind)
            .map_err(|e| invalid("schedule.lambda1", e.to_string()))
    }

    pub fn replication_settings(&self) -> ReplicationSettings {
        ReplicationSettings {
            dt: self.simulation.dt,
            bridge_correction: self.simulation.bridge,
            budget: self.simulation.budget,
            spectral_tol: self.analysis.spectral_tol,
        }
    }

    /// Canonical serialization: defaults filled in, fixed key order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// The configuration shipped as `configs/default.json`.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minimal_disk_config_gets_defaults() {
        let cfg = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1},"tau":[1.0],"seed":42}"#).unwrap();
        assert_eq!(cfg.simulation, SimulationConfig::default());
        assert_eq!(cfg.simulation.dt, 1e-4);
        assert_eq!(cfg.simulation.n_paths, 100_000);
        assert_eq!(cfg.simulation.n_reps, 2000);
        assert!(cfg.simulation.bridge);
        assert_eq!(cfg.analysis.n_bands, 20);
        assert_eq!(cfg.analysis.s_grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cfg.measure.base, BaseKind::Lebesgue);
        assert_eq!(cfg.domain_spec().unwrap().volume(), std::f64::consts::PI);
    }

    #[test]
    fn errors_name_the_key() {
        let err = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":-1},"tau":[1.0],"seed":42}"#).unwrap_err();
        assert!(err.to_string().contains("domain.sigma2") && err.to_string().contains("> 0"), "{err}");
        let err = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1},"tau":[1.0],"seed":42,"colour":1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let err = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1,"r1":2},"tau":[1.0],"seed":4}"#).unwrap_err();
        assert!(err.to_string().contains("r1"), "{err}");
        let err = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1},"seed":42}"#).unwrap_err();
        assert!(err.to_string().contains("tau"), "{err}");
        let err = parse_config(
            r#"{"domain":{"kind":"interval","length":1,"sigma2":1},"tau":[1.0],"seed":1,"simulation":{"dt":0}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("simulation.dt"), "{err}");
        let err = parse_config(r#"{"domain":{"kind":"box","lengths":[1,1],"sigma":[[1,2],[2,1]]},"tau":[1],"seed":1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("domain.sigma"), "{err}");
    }

    #[test]
    fn shipped_default_is_valid() {
        let cfg = parse_config(DEFAULT_CONFIG).unwrap();
        assert!(matches!(cfg.domain, DomainConfig::Disk { r0, sigma2: Some(s2), .. } if r0 == 1.0 && s2 == 1.0));
        assert_eq!(cfg.tau, vec![1.0]);
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1},"tau":[1.0],"seed":42}"#).unwrap();
        let b = parse_config("{ \"seed\": 42, \"tau\": [1], \"domain\": {\"sigma2\": 1.0, \"r0\": 1.0, \"kind\": \"disk\"} }").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse_config(r#"{"domain":{"kind":"disk","r0":1,"sigma2":1},"tau":[1.0],"seed":43}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    fn arb_domain() -> impl Strategy<Value = DomainConfig> {
        prop_oneof![
            (0.1f64..10.0, 0.1f64..5.0).prop_map(|(length, s2)| DomainConfig::Interval {
                length,
                sigma2: Some(s2),
                sigma: None
            }),
            (prop::collection::vec(0.1f64..5.0, 1..4), 0.1f64..5.0).prop_map(|(lengths, s2)| DomainConfig::Box {
                lengths,
                sigma2: Some(s2),
                sigma: None
            }),
            (0.1f64..5.0, 0.1f64..3.0, -0.5f64..0.5).prop_map(|(r0, d, off)| DomainConfig::Disk {
                r0,
                sigma2: None,
                sigma: Some(vec![vec![d + 1.0, off], vec![off, d + 1.0]]),
            }),
        ]
    }

    prop_compose! {
        fn arb_config()(
            domain in arb_domain(),
            tau in prop::collection::vec(0.05f64..5.0, 1..4),
            seed in any::<u64>(),
            dt in 1e-6f64..1e-2,
            n_paths in 1u64..1_000_000,
            n_reps in 200u64..10_000,
            bridge in any::<bool>(),
            n_bands in 2usize..100,
            lambda1 in prop::option::of(0.1f64..100.0),
            density in any::<bool>(),
        ) -> RunConfig {
            RunConfig {
                domain,
                measure: if density {
                    MeasureConfig { base: BaseKind::Density, density: Some("bump".into()) }
                } else {
                    MeasureConfig::default()
                },
                schedule: ScheduleConfig { lambda1, ..Default::default() },
                tau,
                simulation: SimulationConfig { dt, n_paths, n_reps, bridge, ..Default::default() },
                analysis: AnalysisConfig { n_bands, ..Default::default() },
                output: OutputConfig::default(),
                seed,
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn serialize_then_parse_round_trips(cfg in arb_config()) {
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let back = parse_config(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.hash(), cfg.hash());
        }
    }
}
