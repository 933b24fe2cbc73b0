//! Discrete-event simulator for multi-instance LLM inference clusters.
//!
//! [`perfmodel`] prices work, [`workload`] produces request traces,
//! [`engine`] replays them under a [`policy`], and [`metrics`] turns the
//! outcome into latency and efficiency figures.

pub mod config;
pub mod engine;
pub mod experiment;
pub mod metrics;
pub mod perfmodel;
pub mod policy;
pub mod scalar;
pub mod workload;

pub use scalar::Scalar;

pub type CostModelF64 = perfmodel::CostModel<f64>;
pub type CostModelF32 = perfmodel::CostModel<f32>;
pub type DeviceSpecF64 = perfmodel::DeviceSpec<f64>;
pub type DeviceSpecF32 = perfmodel::DeviceSpec<f32>;
pub type InstanceSpecF64 = perfmodel::InstanceSpec<f64>;
pub type InstanceSpecF32 = perfmodel::InstanceSpec<f32>;
pub type EfficiencyF64 = perfmodel::EfficiencyFactors<f64>;
pub type EfficiencyF32 = perfmodel::EfficiencyFactors<f32>;
