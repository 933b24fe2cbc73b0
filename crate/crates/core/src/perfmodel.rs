//! Analytical cost model for transformer inference on tensor-parallel instances.
//!
//! Prefill is priced as compute-bound work, decode as the slower of the HBM
//! traffic (weights plus every resident KV line) and the matmul compute, and
//! inter-instance KV movement as bytes over the instance's link share. All
//! formulas are generic over [`Scalar`] so the same code can be evaluated in
//! `f32` or `f64`; the simulator itself uses `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("empty prefill batch")]
    EmptyPrefillBatch,
    #[error("empty decode batch")]
    EmptyDecodeBatch,
    #[error("prompt length must be at least one token")]
    ZeroLengthPrompt,
    #[error("model does not fit in instance memory")]
    ModelDoesNotFit,
    #[error("invalid {what}: {reason}")]
    InvalidSpec { what: &'static str, reason: String },
}

fn invalid(what: &'static str, reason: impl Into<String>) -> PerfError {
    PerfError::InvalidSpec {
        what,
        reason: reason.into(),
    }
}

/// Accelerator characteristics (per device).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec<T> {
    pub name: String,
    /// fp16 floating-point operations per second.
    pub peak_flops: T,
    /// HBM capacity in bytes.
    pub hbm_capacity: T,
    /// HBM bandwidth in bytes per second.
    pub hbm_bandwidth: T,
    /// This device's share of the inter-instance interconnect, bytes per second.
    pub link_bandwidth: T,
}

impl<T: Scalar> DeviceSpec<T> {
    /// Huawei Ascend 910B2.
    pub fn ascend_910b2() -> Self {
        Self {
            name: "910B2".into(),
            peak_flops: T::lit(400e12),
            hbm_capacity: T::lit(64e9),
            hbm_bandwidth: T::lit(1.8e12),
            link_bandwidth: T::lit(392e9),
        }
    }

    /// NVIDIA H100 SXM.
    pub fn h100() -> Self {
        Self {
            name: "H100".into(),
            peak_flops: T::lit(989e12),
            hbm_capacity: T::lit(80e9),
            hbm_bandwidth: T::lit(3.35e12),
            link_bandwidth: T::lit(900e9),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "910b2" | "ascend-910b2" => Some(Self::ascend_910b2()),
            "h100" => Some(Self::h100()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let fields = [
            ("peak_flops", self.peak_flops),
            ("hbm_capacity", self.hbm_capacity),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("link_bandwidth", self.link_bandwidth),
        ];
        for (field, v) in fields {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(invalid("device", format!("{field} must be positive")));
            }
        }
        Ok(())
    }
}

/// Transformer architecture constants that drive the cost formulas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub param_count: u64,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    /// Width of one stored value (2 for fp16).
    pub bytes_per_value: u64,
}

impl ModelSpec {
    /// Llama-2 70B with grouped-query attention, fp16 weights and cache.
    pub fn llama2_70b() -> Self {
        Self {
            name: "llama2-70b".into(),
            param_count: 70_000_000_000,
            num_layers: 80,
            hidden_dim: 8192,
            num_kv_heads: 8,
            head_dim: 128,
            bytes_per_value: 2,
        }
    }

    /// Llama-2 7B shaped model (full multi-head attention).
    pub fn llama2_7b() -> Self {
        Self {
            name: "llama2-7b".into(),
            param_count: 7_000_000_000,
            num_layers: 32,
            hidden_dim: 4096,
            num_kv_heads: 32,
            head_dim: 128,
            bytes_per_value: 2,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "llama2-70b" | "llama-2-70b" => Some(Self::llama2_70b()),
            "llama2-7b" | "llama-2-7b" => Some(Self::llama2_7b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let fields = [
            ("param_count", self.param_count),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("bytes_per_value", self.bytes_per_value),
        ];
        for (field, v) in fields {
            if v == 0 {
                return Err(invalid("model", format!("{field} must be positive")));
            }
        }
        Ok(())
    }

    /// Bytes of keys plus values stored for one token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers * self.num_kv_heads * self.head_dim * self.bytes_per_value
    }

    /// Bytes of KV cache one layer adds per token.
    pub fn kv_bytes_per_token_per_layer(&self) -> u64 {
        2 * self.num_kv_heads * self.head_dim * self.bytes_per_value
    }

    pub fn weight_bytes(&self) -> u64 {
        self.param_count * self.bytes_per_value
    }
}

pub fn kv_bytes_per_token(model: &ModelSpec) -> u64 {
    model.kv_bytes_per_token()
}

pub fn weight_bytes(model: &ModelSpec) -> u64 {
    model.weight_bytes()
}

/// A group of identical devices holding one tensor-parallel model replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec<T> {
    pub device: DeviceSpec<T>,
    pub num_devices: u64,
    pub tensor_parallel: u64,
    pub memory_reserve_fraction: T,
}

impl<T: Scalar> InstanceSpec<T> {
    /// Four-way tensor-parallel instance with a 10% memory reserve.
    pub fn new(device: DeviceSpec<T>) -> Self {
        Self {
            device,
            num_devices: 4,
            tensor_parallel: 4,
            memory_reserve_fraction: T::lit(0.10),
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        self.device.validate()?;
        if self.num_devices == 0 {
            return Err(invalid("instance", "num_devices must be at least 1"));
        }
        if self.tensor_parallel != self.num_devices {
            return Err(invalid(
                "instance",
                "tensor_parallel must equal num_devices",
            ));
        }
        let r = self.memory_reserve_fraction;
        if !(r >= T::zero() && r < T::one()) {
            return Err(invalid(
                "instance",
                "memory_reserve_fraction must lie in [0, 1)",
            ));
        }
        Ok(())
    }

    fn devices(&self) -> T {
        T::of_u64(self.num_devices)
    }

    /// HBM left for weights and KV after the reserve.
    pub fn usable_hbm_bytes(&self) -> T {
        self.devices() * self.device.hbm_capacity * (T::one() - self.memory_reserve_fraction)
    }
}

/// Achieved fractions of the peak compute, HBM and link rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyFactors<T> {
    pub compute: T,
    pub mem_bw: T,
    pub link: T,
}

impl<T: Scalar> Default for EfficiencyFactors<T> {
    fn default() -> Self {
        Self {
            compute: T::lit(0.5),
            mem_bw: T::lit(0.8),
            link: T::lit(0.8),
        }
    }
}

impl<T: Scalar> EfficiencyFactors<T> {
    pub fn new(compute: T, mem_bw: T, link: T) -> Self {
        Self {
            compute,
            mem_bw,
            link,
        }
    }

    pub fn ideal() -> Self {
        Self::new(T::one(), T::one(), T::one())
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        for (field, v) in [
            ("compute", self.compute),
            ("mem_bw", self.mem_bw),
            ("link", self.link),
        ] {
            if !(v > T::zero() && v <= T::one()) {
                return Err(invalid(
                    "efficiency",
                    format!("{field} must lie in (0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// How an instance's devices share an inter-instance transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkMode {
    /// Every device ships its own KV shard over its own link.
    #[default]
    Striped,
    /// The whole transfer goes through one device's link.
    SingleLink,
}

fn prefill_flops<T: Scalar>(model: &ModelSpec, prompt_len: u64) -> T {
    let l = T::of_u64(prompt_len);
    let params = T::of_u64(model.param_count);
    let hidden = T::of_u64(model.hidden_dim);
    let layers = T::of_u64(model.num_layers);
    T::lit(2.0) * params * l + T::lit(4.0) * l * l * hidden * layers
}

/// Compute-bound latency of one batched prefill job.
pub fn prefill_latency<T: Scalar>(
    model: &ModelSpec,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
    prompt_lengths: &[u64],
) -> Result<T, PerfError> {
    if prompt_lengths.is_empty() {
        return Err(PerfError::EmptyPrefillBatch);
    }
    let mut flops = T::zero();
    for &len in prompt_lengths {
        if len == 0 {
            return Err(PerfError::ZeroLengthPrompt);
        }
        flops = flops + prefill_flops::<T>(model, len);
    }
    Ok(flops / (inst.devices() * inst.device.peak_flops * eff.compute))
}

/// Decode-step latency from the batch size and the summed KV lengths.
pub fn decode_step_latency_totals<T: Scalar>(
    model: &ModelSpec,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
    batch_size: u64,
    total_kv_tokens: u64,
) -> Result<T, PerfError> {
    if batch_size == 0 {
        return Err(PerfError::EmptyDecodeBatch);
    }
    let bytes = T::of_u64(model.weight_bytes())
        + T::of_u64(total_kv_tokens) * T::of_u64(model.kv_bytes_per_token());
    let mem_time = bytes / (inst.devices() * inst.device.hbm_bandwidth * eff.mem_bw);
    let flops = T::lit(2.0) * T::of_u64(model.param_count) * T::of_u64(batch_size);
    let compute_time = flops / (inst.devices() * inst.device.peak_flops * eff.compute);
    Ok(mem_time.max(compute_time))
}

/// One decode iteration over requests whose resident KV lengths are given.
pub fn decode_step_latency<T: Scalar>(
    model: &ModelSpec,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
    kv_lengths: &[u64],
) -> Result<T, PerfError> {
    let total: u64 = kv_lengths.iter().sum();
    decode_step_latency_totals(model, inst, eff, kv_lengths.len() as u64, total)
}

/// Floor every decode step pays: streaming the weights once.
pub fn weight_load_floor<T: Scalar>(
    model: &ModelSpec,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
) -> T {
    T::of_u64(model.weight_bytes()) / (inst.devices() * inst.device.hbm_bandwidth * eff.mem_bw)
}

/// Effective inter-instance bandwidth in bytes per second.
pub fn link_rate<T: Scalar>(inst: &InstanceSpec<T>, eff: &EfficiencyFactors<T>, mode: LinkMode) -> T {
    let lanes = match mode {
        LinkMode::Striped => inst.devices(),
        LinkMode::SingleLink => T::one(),
    };
    lanes * inst.device.link_bandwidth * eff.link
}

/// Transfer time over all of the instance's device links.
pub fn transfer_latency<T: Scalar>(num_bytes: u64, inst: &InstanceSpec<T>, eff: &EfficiencyFactors<T>) -> T {
    transfer_latency_with(num_bytes, inst, eff, LinkMode::Striped)
}

pub fn transfer_latency_with<T: Scalar>(
    num_bytes: u64,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
    mode: LinkMode,
) -> T {
    if num_bytes == 0 {
        return T::zero();
    }
    T::of_u64(num_bytes) / link_rate(inst, eff, mode)
}

/// KV tokens that fit next to the weights after the memory reserve.
pub fn kv_capacity_tokens<T: Scalar>(model: &ModelSpec, inst: &InstanceSpec<T>) -> Result<u64, PerfError> {
    let free = inst.usable_hbm_bytes() - T::of_u64(model.weight_bytes());
    if free < T::zero() {
        return Err(PerfError::ModelDoesNotFit);
    }
    let tokens = (free / T::of_u64(model.kv_bytes_per_token())).floor();
    Ok(tokens.to_u64().unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint<T> {
    pub phase: Phase,
    pub length: u64,
    pub batch: u64,
    pub latency: T,
    pub tokens_per_s: T,
}

/// Latency and throughput over a grid of (length, batch) for one phase.
///
/// Rows are ordered by length, then batch size, in the order given.
pub fn throughput_curves<T: Scalar>(
    model: &ModelSpec,
    inst: &InstanceSpec<T>,
    eff: &EfficiencyFactors<T>,
    lengths: &[u64],
    batch_sizes: &[u64],
    phase: Phase,
) -> Result<Vec<CurvePoint<T>>, PerfError> {
    let mut rows = Vec::with_capacity(lengths.len() * batch_sizes.len());
    for &length in lengths {
        for &batch in batch_sizes {
            let (latency, tokens_per_s) = match phase {
                Phase::Prefill => {
                    let lat = prefill_latency(model, inst, eff, &vec![length; batch as usize])?;
                    (lat, T::of_u64(batch * length) / lat)
                }
                Phase::Decode => {
                    let lat = decode_step_latency_totals(model, inst, eff, batch, batch * length)?;
                    (lat, T::of_u64(batch) / lat)
                }
            };
            rows.push(CurvePoint {
                phase,
                length,
                batch,
                latency,
                tokens_per_s,
            });
        }
    }
    Ok(rows)
}

/// Bundles the model, instance and efficiencies the engine prices work with.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel<T> {
    pub model: ModelSpec,
    pub instance: InstanceSpec<T>,
    pub eff: EfficiencyFactors<T>,
    pub link_mode: LinkMode,
}

impl<T: Scalar> CostModel<T> {
    pub fn new(
        model: ModelSpec,
        instance: InstanceSpec<T>,
        eff: EfficiencyFactors<T>,
        link_mode: LinkMode,
    ) -> Result<Self, PerfError> {
        model.validate()?;
        instance.validate()?;
        eff.validate()?;
        Ok(Self {
            model,
            instance,
            eff,
            link_mode,
        })
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        self.model.kv_bytes_per_token()
    }

    pub fn prefill_latency(&self, prompt_lengths: &[u64]) -> Result<T, PerfError> {
        prefill_latency(&self.model, &self.instance, &self.eff, prompt_lengths)
    }

    pub fn decode_step_latency(&self, kv_lengths: &[u64]) -> Result<T, PerfError> {
        decode_step_latency(&self.model, &self.instance, &self.eff, kv_lengths)
    }

    pub fn decode_step_latency_totals(&self, batch: u64, total_kv_tokens: u64) -> Result<T, PerfError> {
        decode_step_latency_totals(&self.model, &self.instance, &self.eff, batch, total_kv_tokens)
    }

    pub fn transfer_latency(&self, num_bytes: u64) -> T {
        transfer_latency_with(num_bytes, &self.instance, &self.eff, self.link_mode)
    }

    pub fn link_rate(&self) -> T {
        link_rate(&self.instance, &self.eff, self.link_mode)
    }

    pub fn kv_capacity_tokens(&self) -> Result<u64, PerfError> {
        kv_capacity_tokens(&self.model, &self.instance)
    }

    pub fn weight_load_floor(&self) -> T {
        weight_load_floor(&self.model, &self.instance, &self.eff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h100() -> InstanceSpec<f64> {
        InstanceSpec::new(DeviceSpec::h100())
    }

    fn ascend() -> InstanceSpec<f64> {
        InstanceSpec::new(DeviceSpec::ascend_910b2())
    }

    fn unit_model() -> ModelSpec {
        ModelSpec {
            name: "unit".into(),
            param_count: 1,
            num_layers: 1,
            hidden_dim: 1,
            num_kv_heads: 1,
            head_dim: 1,
            bytes_per_value: 1,
        }
    }

    #[test]
    fn kv_bytes_examples() {
        assert_eq!(kv_bytes_per_token(&ModelSpec::llama2_70b()), 327_680);
        assert_eq!(kv_bytes_per_token(&unit_model()), 2);
        assert_eq!(kv_bytes_per_token(&ModelSpec::llama2_7b()), 524_288);
    }

    #[test]
    fn weight_bytes_examples() {
        assert_eq!(weight_bytes(&ModelSpec::llama2_70b()), 140_000_000_000);
        assert_eq!(weight_bytes(&unit_model()), 1);
        assert_eq!(weight_bytes(&ModelSpec::llama2_7b()), 14_000_000_000);
    }

    #[test]
    fn prefill_examples() {
        let m = ModelSpec::llama2_70b();
        let half = EfficiencyFactors::new(0.5, 1.0, 1.0);
        // 2*70e9*512 + 4*512^2*8192*80 over 4*989e12*0.5
        let expect = (7.168e13 + 6.871_947_673_6e11) / 1.978e15;
        let got = prefill_latency(&m, &h100(), &half, &[512]).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        assert_relative_eq!(got, 0.036_586, max_relative = 1e-4);

        let got = prefill_latency(&m, &ascend(), &half, &[1000]).unwrap();
        assert_relative_eq!(got, (1.4e14 + 2.621_44e12) / 8.0e14, max_relative = 1e-12);
        assert_relative_eq!(got, 0.178_27, max_relative = 1e-4);

        let full = EfficiencyFactors::new(1.0, 1.0, 1.0);
        let fast = prefill_latency(&m, &h100(), &full, &[700]).unwrap();
        let slow = prefill_latency(&m, &h100(), &half, &[700]).unwrap();
        assert_relative_eq!(slow, 2.0 * fast, max_relative = 1e-15);
    }

    #[test]
    fn prefill_rejects_empty_and_zero() {
        let m = ModelSpec::llama2_70b();
        let eff = EfficiencyFactors::default();
        let err = prefill_latency(&m, &h100(), &eff, &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty prefill batch");
        assert_eq!(
            prefill_latency(&m, &h100(), &eff, &[10, 0]).unwrap_err(),
            PerfError::ZeroLengthPrompt
        );
    }

    #[test]
    fn decode_examples() {
        let m = ModelSpec::llama2_70b();
        let ideal = EfficiencyFactors::ideal();
        let got = decode_step_latency(&m, &h100(), &ideal, &[500; 32]).unwrap();
        assert_relative_eq!(got, (1.4e11 + 32.0 * 500.0 * 327_680.0) / 1.34e13, max_relative = 1e-12);
        assert_relative_eq!(got, 0.010_84, max_relative = 1e-3);

        let got = decode_step_latency(&m, &ascend(), &ideal, &[100]).unwrap();
        assert_relative_eq!(got, (1.4e11 + 3.2768e7) / 7.2e12, max_relative = 1e-12);
        assert_relative_eq!(got, 0.019_45, max_relative = 1e-3);

        let err = decode_step_latency(&m, &h100(), &ideal, &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty decode batch");
    }

    #[test]
    fn decode_kv_term_is_linear_without_weights() {
        let mut m = ModelSpec::llama2_70b();
        // Tiny model so the memory term is all KV and compute never binds.
        m.param_count = 1;
        let ideal = EfficiencyFactors::ideal();
        let base = decode_step_latency(&m, &h100(), &ideal, &[300, 700, 20]).unwrap();
        let doubled = decode_step_latency(&m, &h100(), &ideal, &[600, 1400, 40]).unwrap();
        assert_relative_eq!(doubled, 2.0 * base, max_relative = 1e-6);
    }

    #[test]
    fn transfer_examples() {
        let ideal = EfficiencyFactors::<f64>::ideal();
        let bytes = 327_680_000;
        let striped = transfer_latency(bytes, &h100(), &ideal);
        assert_relative_eq!(striped, 327.68e6 / 3.6e12, max_relative = 1e-12);
        assert_relative_eq!(striped, 91.0e-6, max_relative = 1e-3);
        let single = transfer_latency_with(bytes, &h100(), &ideal, LinkMode::SingleLink);
        assert_relative_eq!(single, 0.364e-3, max_relative = 1e-3);
        let ascend_single = transfer_latency_with(bytes, &ascend(), &ideal, LinkMode::SingleLink);
        assert_relative_eq!(ascend_single, 0.836e-3, max_relative = 1e-3);
        assert_eq!(transfer_latency(0, &h100(), &ideal), 0.0);
    }

    #[test]
    fn capacity_examples() {
        let m = ModelSpec::llama2_70b();
        assert_eq!(kv_capacity_tokens(&m, &h100()).unwrap(), 451_660);
        assert_eq!(kv_capacity_tokens(&m, &ascend()).unwrap(), 275_878);

        // Weights exactly fill the usable memory.
        let mut dev = DeviceSpec::<f64>::h100();
        dev.hbm_capacity = 35e9;
        let mut inst = InstanceSpec::new(dev);
        inst.memory_reserve_fraction = 0.0;
        assert_eq!(kv_capacity_tokens(&m, &inst).unwrap(), 0);

        inst.device.hbm_capacity = 30e9;
        assert_eq!(kv_capacity_tokens(&m, &inst).unwrap_err(), PerfError::ModelDoesNotFit);
    }

    #[test]
    fn curves_examples() {
        let m = ModelSpec::llama2_70b();
        let ideal = EfficiencyFactors::ideal();
        let rows = throughput_curves(&m, &h100(), &ideal, &[500], &[1, 32], Phase::Decode).unwrap();
        assert_eq!(rows.len(), 2);
        assert_relative_eq!(rows[0].latency, 0.010_46, max_relative = 1e-3);
        assert_relative_eq!(rows[0].tokens_per_s, 95.6, max_relative = 1e-3);
        assert_relative_eq!(rows[1].latency, 0.010_84, max_relative = 1e-3);
        assert_relative_eq!(rows[1].tokens_per_s, 2952.0, max_relative = 1e-3);

        let half = EfficiencyFactors::new(0.5, 1.0, 1.0);
        let rows = throughput_curves(&m, &h100(), &half, &[512], &[1, 2], Phase::Prefill).unwrap();
        assert_relative_eq!(rows[0].latency, 0.0366, max_relative = 1e-3);
        assert_relative_eq!(rows[1].latency, 0.0732, max_relative = 1e-3);
        assert_relative_eq!(rows[0].tokens_per_s, rows[1].tokens_per_s, max_relative = 1e-12);
    }

    #[test]
    fn f32_agrees_with_f64() {
        let m = ModelSpec::llama2_70b();
        let i32 = InstanceSpec::<f32>::new(DeviceSpec::h100());
        let e32 = EfficiencyFactors::<f32>::default();
        let i64 = h100();
        let e64 = EfficiencyFactors::<f64>::default();
        let a = prefill_latency(&m, &i32, &e32, &[512, 77]).unwrap() as f64;
        let b = prefill_latency(&m, &i64, &e64, &[512, 77]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-5);
        let a = decode_step_latency(&m, &i32, &e32, &[512, 77, 1000]).unwrap() as f64;
        let b = decode_step_latency(&m, &i64, &e64, &[512, 77, 1000]).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-5);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut inst = h100();
        inst.tensor_parallel = 2;
        assert!(inst.validate().is_err());
        let mut inst = h100();
        inst.memory_reserve_fraction = 1.0;
        assert!(inst.validate().is_err());
        let mut dev = DeviceSpec::<f64>::h100();
        dev.link_bandwidth = 0.0;
        assert!(dev.validate().is_err());
        assert!(EfficiencyFactors::new(0.0, 1.0, 1.0).validate().is_err());
        assert!(EfficiencyFactors::new(1.0, 1.1, 1.0).validate().is_err());
        let mut m = ModelSpec::llama2_70b();
        m.head_dim = 0;
        assert!(m.validate().is_err());
    }
}
