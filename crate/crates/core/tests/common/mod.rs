#![allow(dead_code)]

pub mod scenario;

use kvsim::engine::{run, EngineConfig, EventRecord, FirstTokenMode, RawResults};
use kvsim::perfmodel::{CostModel, DeviceSpec, EfficiencyFactors, InstanceSpec, LinkMode, ModelSpec};
use kvsim::policy::{build_policy, Policy, PolicyKind, PolicyParams};
use kvsim::workload::{Trace, TraceRequest};

pub fn cost(device: DeviceSpec<f64>, eff: EfficiencyFactors<f64>) -> CostModel<f64> {
    CostModel::new(ModelSpec::llama2_70b(), InstanceSpec::new(device), eff, LinkMode::Striped).unwrap()
}

pub fn h100() -> CostModel<f64> {
    cost(DeviceSpec::h100(), EfficiencyFactors::default())
}

/// `(arrival_s, prompt_len, decode_len)` rows, ids in order.
pub fn trace(rows: &[(f64, u64, u64)]) -> Trace {
    Trace {
        requests: rows
            .iter()
            .enumerate()
            .map(|(id, &(arrival_s, prompt_len, decode_len))| TraceRequest {
                id: id as u64,
                arrival_s,
                prompt_len,
                decode_len,
            })
            .collect(),
        bounds: None,
    }
}

pub fn checked() -> EngineConfig {
    EngineConfig {
        check_invariants: true,
        record_events: true,
        ..EngineConfig::default()
    }
}

pub fn with_mode(mode: FirstTokenMode) -> EngineConfig {
    EngineConfig {
        first_token: mode,
        ..checked()
    }
}

pub fn simulate(trace: &Trace, cost: &CostModel<f64>, n: usize, kind: PolicyKind) -> RawResults {
    let mut p = build_policy(kind, &PolicyParams::default());
    run(trace, cost, n, p.as_mut(), &checked()).unwrap()
}

pub fn simulate_with(trace: &Trace, cost: &CostModel<f64>, n: usize, policy: &mut dyn Policy) -> RawResults {
    run(trace, cost, n, policy, &checked()).unwrap()
}

pub fn events<'a>(raw: &'a RawResults, kind: &'a str) -> impl Iterator<Item = &'a EventRecord> + 'a {
    raw.events.as_ref().expect("events recorded").iter().filter(move |e| e.kind == kind)
}

pub fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}
