//! Experiment configuration: JSON in, fully resolved settings out.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{EngineConfig, FirstTokenMode, SimError};
use crate::metrics::MetricsWindow;
use crate::perfmodel::{
    CostModel, DeviceSpec, EfficiencyFactors, InstanceSpec, LinkMode, ModelSpec, PerfError, Phase,
};
use crate::policy::{build_policy, PolicyKind, PolicyParams};
use crate::workload::{ArrivalProcess, ArrivalSpec, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

/// A named preset or an inline custom definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Preset<T> {
    Name(String),
    Custom(T),
}

impl<T: Clone> Preset<T> {
    fn resolve(&self, kind: &str, lookup: impl Fn(&str) -> Option<T>) -> Result<T, ConfigError> {
        match self {
            Preset::Name(n) => lookup(n).ok_or_else(|| ConfigError::Invalid(format!("unknown {kind} preset {n:?}"))),
            Preset::Custom(t) => Ok(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Include per-request latencies in report.json.
    pub per_request: bool,
    /// Write the engine event log as JSON lines.
    pub emit_events: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            per_request: false,
            emit_events: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvesConfig {
    pub phases: Vec<Phase>,
    pub lengths: Vec<u64>,
    pub batches: Vec<u64>,
}

impl Default for CurvesConfig {
    fn default() -> Self {
        Self {
            phases: vec![Phase::Prefill, Phase::Decode],
            lengths: vec![100, 500, 1000],
            batches: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    /// Per-device HBM bytes.
    HbmCapacity,
    /// Per-device link bytes per second.
    LinkBandwidth,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::HbmCapacity => "hbm_capacity",
            Resource::LinkBandwidth => "link_bandwidth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSweepConfig {
    pub resource: Resource,
    pub values: Vec<f64>,
    /// Arrival rate for every point; the first entry of `rates` when absent.
    #[serde(default)]
    pub rate: Option<f64>,
}

/// The on-disk experiment description. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Preset<ModelSpec>,
    pub device: Preset<DeviceSpec<f64>>,
    pub devices_per_instance: u64,
    pub memory_reserve_fraction: f64,
    pub instances: usize,
    pub policies: Vec<PolicyKind>,
    pub policy_params: PolicyParams,
    pub workload: Preset<WorkloadSpec>,
    pub arrival_process: ArrivalProcess,
    /// Requests per second; one simulation per rate and policy.
    pub rates: Vec<f64>,
    /// Arrivals are generated over this many seconds.
    pub duration_s: f64,
    /// Arrivals before this are excluded from metrics.
    pub warmup_s: f64,
    /// Extra simulated time after the last arrival window.
    pub drain_s: f64,
    pub seed: u64,
    pub efficiency: EfficiencyFactors<f64>,
    pub link_mode: LinkMode,
    pub first_token: FirstTokenMode,
    /// Replay this trace file instead of generating one.
    pub trace: Option<PathBuf>,
    pub check_invariants: bool,
    pub output: OutputConfig,
    pub curves: CurvesConfig,
    pub resource_sweep: Option<ResourceSweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Preset::Name("llama2-70b".into()),
            device: Preset::Name("h100".into()),
            devices_per_instance: 4,
            memory_reserve_fraction: 0.10,
            instances: 4,
            policies: vec![PolicyKind::Accellm],
            policy_params: PolicyParams::default(),
            workload: Preset::Name("mixed".into()),
            arrival_process: ArrivalProcess::Poisson,
            rates: vec![4.0],
            duration_s: 300.0,
            warmup_s: 30.0,
            drain_s: 60.0,
            seed: 0,
            efficiency: EfficiencyFactors::default(),
            link_mode: LinkMode::Striped,
            first_token: FirstTokenMode::Prefill,
            trace: None,
            check_invariants: false,
            output: OutputConfig::default(),
            curves: CurvesConfig::default(),
            resource_sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Replaces presets with their definitions and checks every constraint.
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let model = self.model.resolve("model", ModelSpec::preset)?;
        let device = self.device.resolve("device", DeviceSpec::preset)?;
        let workload = self.workload.resolve("workload", WorkloadSpec::preset)?;
        workload
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut instance = InstanceSpec::new(device);
        instance.num_devices = self.devices_per_instance;
        instance.tensor_parallel = self.devices_per_instance;
        instance.memory_reserve_fraction = self.memory_reserve_fraction;
        CostModel::new(model.clone(), instance.clone(), self.efficiency, self.link_mode)?;

        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.instances == 0 {
            return invalid("instances must be at least 1");
        }
        if self.policies.is_empty() {
            return invalid("policies must not be empty");
        }
        if self.rates.is_empty() {
            return invalid("rates must not be empty");
        }
        if self.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return invalid("rates must be finite and non-negative");
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return invalid("duration_s must be positive");
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return invalid("warmup_s must lie in [0, duration_s)");
        }
        if !(self.drain_s >= 0.0 && self.drain_s.is_finite()) {
            return invalid("drain_s must be non-negative");
        }
        if let Some(rs) = &self.resource_sweep {
            if rs.values.is_empty() || rs.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return invalid("resource_sweep.values must be non-empty and positive");
            }
        }
        for &kind in &self.policies {
            build_policy(kind, &self.policy_params).validate_cluster(self.instances)?;
        }

        let mut policies = self.policies.clone();
        policies.dedup();
        Ok(ResolvedConfig {
            model,
            instance,
            efficiency: self.efficiency,
            link_mode: self.link_mode,
            instances: self.instances,
            policies,
            policy_params: self.policy_params.clone(),
            workload,
            arrival_process: self.arrival_process,
            rates: self.rates.clone(),
            duration_s: self.duration_s,
            warmup_s: self.warmup_s,
            drain_s: self.drain_s,
            seed: self.seed,
            first_token: self.first_token,
            trace: self.trace.clone(),
            check_invariants: self.check_invariants,
            output: self.output.clone(),
            curves: self.curves.clone(),
            resource_sweep: self.resource_sweep.clone(),
        })
    }
}

/// A validated configuration with presets expanded; echoed into `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub model: ModelSpec,
    pub instance: InstanceSpec<f64>,
    pub efficiency: EfficiencyFactors<f64>,
    pub link_mode: LinkMode,
    pub instances: usize,
    pub policies: Vec<PolicyKind>,
    pub policy_params: PolicyParams,
    pub workload: WorkloadSpec,
    pub arrival_process: ArrivalProcess,
    pub rates: Vec<f64>,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub drain_s: f64,
    pub seed: u64,
    pub first_token: FirstTokenMode,
    pub trace: Option<PathBuf>,
    pub check_invariants: bool,
    pub output: OutputConfig,
    pub curves: CurvesConfig,
    pub resource_sweep: Option<ResourceSweepConfig>,
}

impl ResolvedConfig {
    pub fn cost_model(&self) -> Result<CostModel<f64>, PerfError> {
        CostModel::new(self.model.clone(), self.instance.clone(), self.efficiency, self.link_mode)
    }

    pub fn arrival(&self, rate: f64) -> ArrivalSpec {
        ArrivalSpec {
            rate,
            process: self.arrival_process,
            duration: self.duration_s,
            seed: self.seed,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            horizon: Some(self.duration_s + self.drain_s),
            first_token: self.first_token,
            check_invariants: self.check_invariants,
            record_events: self.output.emit_events,
        }
    }

    /// Latency statistics skip the warm-up; throughput stops at the end of arrivals.
    pub fn metrics_window(&self) -> MetricsWindow {
        MetricsWindow {
            warmup_s: self.warmup_s,
            end_s: Some(self.duration_s),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact resolved JSON, leaving out where outputs go.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(out) = value.get_mut("output").and_then(|o| o.as_object_mut()) {
            out.remove("dir");
        }
        let text = value.to_string();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_takes_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let r = cfg.resolve().unwrap();
        assert_eq!(r.model.num_layers, 80);
        assert_eq!(r.instance.device.name, "H100");
        assert_eq!(r.workload.name, "mixed");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_json(r#"{"instancez": 4}"#).unwrap_err();
        assert!(err.to_string().contains("instancez"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"output": {"dirr": "x"}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn odd_count_with_accellm_rejected() {
        let cfg = ExperimentConfig::from_json(r#"{"instances": 5, "policies": ["accellm"]}"#).unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("even instance count required"), "{err}");
        let ok = ExperimentConfig::from_json(r#"{"instances": 5, "policies": ["unified"]}"#).unwrap();
        assert!(ok.resolve().is_ok());
    }

    #[test]
    fn empty_rate_list_rejected() {
        let cfg = ExperimentConfig::from_json(r#"{"rates": []}"#).unwrap();
        assert!(matches!(cfg.resolve(), Err(ConfigError::Invalid(m)) if m.contains("rates")));
    }

    #[test]
    fn custom_device_and_unknown_preset() {
        let cfg = ExperimentConfig::from_json(
            r#"{"device": {"name": "x", "peak_flops": 1e15, "hbm_capacity": 9e10,
                 "hbm_bandwidth": 4e12, "link_bandwidth": 1e11}}"#,
        )
        .unwrap();
        assert_eq!(cfg.resolve().unwrap().instance.device.name, "x");
        let bad = ExperimentConfig::from_json(r#"{"device": "tpu"}"#).unwrap();
        assert!(bad.resolve().unwrap_err().to_string().contains("tpu"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default().resolve().unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
