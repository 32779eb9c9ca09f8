//! Experiment documents.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use kdisc::discover::{DiscoveryConfig, ValidationOptions};
use kdisc::dynamics::{Scheme, SimConfig};
use kdisc::kernels::KernelSpecConfig;
use kdisc::presets::Experiment;

/// One experiment: data generation, ground truth, discovery, validation and
/// output locations. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    /// Update rule used by `generate`.
    #[serde(default = "binary")]
    pub scheme: Scheme,
    pub kernels: KernelSpecConfig,
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub validation: ValidationOptions,
    #[serde(default)]
    pub output: OutputPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub trajectory: PathBuf,
    pub report: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { trajectory: "trajectory.kdt".into(), report: "report.json".into() }
    }
}

fn binary() -> Scheme {
    Scheme::Binary
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> kdisc::Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.sim.validate(cfg.scheme)?;
        cfg.kernels.build()?;
        Ok(cfg)
    }

    pub fn from_experiment(e: Experiment) -> Self {
        ExperimentConfig {
            sim: e.sim,
            scheme: Scheme::Binary,
            kernels: e.kernels,
            discovery: e.discovery,
            validation: e.validation,
            output: OutputPaths::default(),
        }
    }

    /// `--seed` sets the simulation seed and derives the discovery seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.discovery.seed = seed ^ 0x5EED_D15C;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kdisc::discover::Method;
    use kdisc::presets::{preset, Benchmark, Scale, Setting};

    #[test]
    fn preset_documents_round_trip() {
        let cfg = ExperimentConfig::from_experiment(
            preset(Benchmark::NonlocalDiffusion, Setting::S2, Scale::Desk, Method::Rbm, 4).unwrap(),
        );
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ExperimentConfig::from_experiment(
            preset(Benchmark::KnownS, Setting::S1, Scale::Desk, Method::KnownS, 1).unwrap(),
        );
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["discovery"]["bogus"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }
}
