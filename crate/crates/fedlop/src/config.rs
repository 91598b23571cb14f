//! Experiment configuration: one JSON file drives simulation, coordinator,
//! and agent modes alike.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::{FeatureSchema, SyntheticConfig};
use crate::error::{Error, Result};
use crate::federation::{AggregationMode, FederationConfig, Strategy};
use crate::model::{ArchConfig, HyperParams};

/// Where the grade records come from. Exactly one source per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    /// Column schema; the default schema when omitted.
    #[serde(default)]
    pub schema: Option<FeatureSchema>,
}

/// Execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Everything in one process.
    Simulate,
    /// Serve rounds to remote agents over TCP.
    Coordinator,
    /// Train one client against a coordinator.
    Agent,
}

fn default_train_ratio() -> f64 {
    0.7
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("fedlop-out")
}
fn default_mode() -> Mode {
    Mode::Simulate
}
fn default_aggregation() -> AggregationMode {
    AggregationMode::ParticipantsMean
}
fn default_timeout() -> u64 {
    60
}
fn default_fedprox_mu() -> f64 {
    0.01
}
fn default_listen() -> String {
    "127.0.0.1:7878".to_string()
}

/// The complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One of: fecmap, fecmap_lsl, fecmap_mpp, fedavg, fedprox, fedper,
    /// lgfed, fedrep.
    pub strategy: String,
    #[serde(default = "default_fedprox_mu")]
    pub fedprox_mu: f64,
    pub n_clients: usize,
    pub participation_rate: f64,
    pub rounds: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationMode,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub arch: ArchConfig,
    pub data: DataSource,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Coordinator bind address.
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Per-round upload deadline for the coordinator.
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: u64,
    /// Strategies a sweep fans out over; defaults to just `strategy`.
    #[serde(default)]
    pub sweep_strategies: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "<path>".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, message: String| -> Result<()> {
            Err(Error::Config { field: field.into(), message })
        };
        if Strategy::parse(&self.strategy, self.fedprox_mu).is_err() {
            return fail(
                "strategy",
                format!("unknown strategy `{}`", self.strategy),
            );
        }
        for s in &self.sweep_strategies {
            if Strategy::parse(s, self.fedprox_mu).is_err() {
                return fail("sweep_strategies", format!("unknown strategy `{s}`"));
            }
        }
        if self.fedprox_mu < 0.0 {
            return fail("fedprox_mu", "must be >= 0".into());
        }
        if self.n_clients == 0 {
            return fail("n_clients", "must be >= 1".into());
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return fail("participation_rate", "must be in (0, 1]".into());
        }
        if self.rounds == 0 {
            return fail("rounds", "must be >= 1".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return fail("train_ratio", "must be in (0, 1)".into());
        }
        if self.hyper.alpha < 0.0 {
            return fail("hyper.alpha", "must be >= 0".into());
        }
        if self.hyper.batch_size == Some(0) {
            return fail("hyper.batch_size", "must be >= 1 when set".into());
        }
        match &self.data {
            DataSource::Csv(src) => {
                if !src.path.exists() {
                    return fail(
                        "data.csv.path",
                        format!("file not found: {}", src.path.display()),
                    );
                }
            }
            DataSource::Synthetic(s) => {
                if s.n_students == 0 || s.records_per_student == 0 {
                    return fail("data.synthetic", "dataset size must be positive".into());
                }
                if s.noise_scale < 0.0 {
                    return fail("data.synthetic.noise_scale", "must be >= 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy, self.fedprox_mu)
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            n_clients: self.n_clients,
            participation_rate: self.participation_rate,
            rounds: self.rounds,
            aggregation: self.aggregation,
            hyper: self.hyper.clone(),
            seed: self.seed,
        }
    }

    /// The schema the data pipeline uses.
    pub fn schema(&self) -> FeatureSchema {
        match &self.data {
            DataSource::Csv(src) => src.schema.clone().unwrap_or_default(),
            DataSource::Synthetic(_) => FeatureSchema::default(),
        }
    }

    /// Output directory, honoring the `FEDLOP_OUT` override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("FEDLOP_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "strategy": "fecmap",
            "n_clients": 3,
            "participation_rate": 1.0,
            "rounds": 2,
            "data": { "synthetic": { "n_students": 50, "seed": 1 } },
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(cfg.mode, Mode::Simulate);
        assert_eq!(cfg.train_ratio, 0.7);
        assert_eq!(cfg.hyper.local_steps, 15);
        assert_eq!(cfg.hyper.momentum, 0.5);
        match cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.n_students, 50),
            _ => panic!("expected synthetic source"),
        }
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = minimal_json().replace("\"rounds\": 2", "\"rounds\": 0");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "rounds"),
            other => panic!("expected config error, got {other:?}"),
        }

        let bad = minimal_json().replace("fecmap", "fedsomething");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "strategy"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn missing_csv_file_is_a_config_error() {
        let json = minimal_json().replace(
            r#"{ "synthetic": { "n_students": 50, "seed": 1 } }"#,
            r#"{ "csv": { "path": "/nonexistent/grades.csv" } }"#,
        );
        match ExperimentConfig::from_json(&json) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.csv.path"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::from_json(&minimal_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
