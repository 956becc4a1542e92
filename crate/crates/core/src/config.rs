//! The simulation configuration file.
//!
//! TOML. Model and cluster keys sit at the top level; everything else lives
//! in its own table:
//!
//! ```toml
//! num_blocks = 4
//! d_model = 64
//! num_devices = 8
//!
//! [workload]
//! batch_size = 64
//! bias_concentration = 0.1
//! length_distribution = { min = 16, max = 128, shape = "uniform" }
//!
//! [condense]
//! S1 = 0.8
//! threshold_mode = "fixed:0.3"
//! ```
//!
//! Overrides use dotted keys (`workload.seed=7`, `q` lives at `migration.q`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condense::CondenseConfig;
use crate::cost::CostConfig;
use crate::engine::{LossModel, Strategy};
use crate::error::{Error, Result};
use crate::migration::MigrationConfig;
use crate::model::{validate, ClusterConfig, ModelConfig};
use crate::workload::WorkloadSpec;

/// Keys that may be absent from a serialized config because they default to
/// "unset".
const OPTIONAL_KEYS: &[&str] = &["device_capacity", "expert_placement", "loss.trace"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Experts HYT may replicate per block.
    pub hyt_top_m: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { hyt_top_m: 1 }
    }
}

/// Defaults for the CLI's run selectors; flags override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub iterations: usize,
    /// Strategy for `simulate`.
    pub strategy: Strategy,
    /// Strategies for `compare` and `sweep`.
    pub strategies: Vec<Strategy>,
    /// Expert counts visited by `sweep`.
    pub sweep_experts: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            strategy: Strategy::Luffy,
            strategies: Strategy::ALL.to_vec(),
            sweep_experts: vec![2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub cluster: ClusterConfig,
    pub workload: WorkloadSpec,
    pub cost: CostConfig,
    pub condense: CondenseConfig,
    pub migration: MigrationConfig,
    pub baselines: BaselineConfig,
    pub loss: LossModel,
    pub run: RunConfig,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Every violated invariant across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut v = validate(&self.model, &self.cluster);
        v.extend(self.workload.validate());
        v.extend(self.condense.validate());
        v.extend(self.loss.validate());
        if self.run.iterations == 0 {
            v.push("run.iterations must be at least 1".to_string());
        }
        if self.run.strategies.is_empty() {
            v.push("run.strategies must not be empty".to_string());
        }
        if self.run.sweep_experts.contains(&0) {
            v.push("run.sweep_experts entries must be positive".to_string());
        }
        if !(self.cost.alpha >= 0.0) {
            v.push("cost.alpha must be non-negative".to_string());
        }
        if !(self.cost.latency_ms >= 0.0) {
            v.push("cost.latency_ms must be non-negative".to_string());
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    /// Applies `key=value` overrides. Values are read as TOML literals, and
    /// fall back to plain strings (`threshold_mode=fixed:0.3`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).expect("config serializes to TOML");
        for raw in overrides {
            let raw = raw.as_ref();
            let bad = |m: &str| Error::BadOverride(raw.to_string(), m.to_string());
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            let key = key.trim();
            let value = parse_literal(value.trim());
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().ok_or_else(|| bad("empty key"))?;
            let mut table = root.as_table_mut().expect("root is a table");
            for p in parents {
                table = table
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| bad("unknown section"))?;
            }
            if !table.contains_key(*last) && !OPTIONAL_KEYS.contains(&key) {
                return Err(bad("unknown key"));
            }
            table.insert(last.to_string(), value);
        }
        root.try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))
    }
}

fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::ThresholdMode;

    #[test]
    fn default_round_trips_through_toml() {
        let c = SimConfig::default();
        let text = c.to_toml_string();
        assert_eq!(SimConfig::from_toml_str(&text).unwrap(), c);
        assert!(c.validate().is_empty());
    }

    #[test]
    fn flat_model_keys() {
        let c = SimConfig::from_toml_str(
            "num_blocks = 2\nd_model = 16\nnum_devices = 4\ndevice_capacity = 300\n\
             [condense]\nS1 = 0.9\nthreshold_mode = \"fixed:0.3\"\n",
        )
        .unwrap();
        assert_eq!(c.model.num_blocks, 2);
        assert_eq!(c.cluster.num_devices, 4);
        assert_eq!(c.cluster.device_capacity, Some(300));
        assert_eq!(c.condense.s1, 0.9);
        assert_eq!(c.condense.threshold_mode, ThresholdMode::Fixed(0.3));
        assert_eq!(c.workload, WorkloadSpec::default());
    }

    #[test]
    fn overrides_win() {
        let c = SimConfig::default()
            .with_overrides(&[
                "workload.seed=7",
                "top_k=1",
                "condense.threshold_mode=off",
                "expert_placement=[0,0,1,1,2,2,3,3]",
                "migration.migration_objective=max",
                "run.strategies=[\"vanilla\", \"ext\"]",
            ])
            .unwrap();
        assert_eq!(c.workload.seed, 7);
        assert_eq!(c.model.top_k, 1);
        assert_eq!(c.condense.threshold_mode, ThresholdMode::Off);
        assert_eq!(c.run.strategies, [Strategy::Vanilla, Strategy::Ext]);
        assert_eq!(
            c.cluster.expert_placement.as_deref(),
            Some(&[0, 0, 1, 1, 2, 2, 3, 3][..])
        );
    }

    #[test]
    fn bad_overrides() {
        let c = SimConfig::default();
        for o in ["nokey", "bogus=1", "workload.nothing=2", "nosection.x=1"] {
            let e = c.with_overrides(&[o]).unwrap_err();
            assert!(e.is_config_error(), "{o}: {e}");
        }
        assert!(c
            .with_overrides(&["top_k=\"two\""])
            .unwrap_err()
            .is_config_error());
    }

    #[test]
    fn parse_error_is_config_error() {
        assert!(SimConfig::from_toml_str("num_blocks = [")
            .unwrap_err()
            .is_config_error());
    }
}
