//! Random small clusters and the invariants every run must satisfy.

use super::*;
use kvsim::engine::{run, EngineConfig, FirstTokenMode, RawResults, RequestState};
use kvsim::metrics::{compute_report, MetricsWindow};
use kvsim::perfmodel::{DeviceSpec, EfficiencyFactors};
use kvsim::policy::{build_policy, AccellmConfig, PolicyKind, PolicyParams};
use kvsim::workload::Trace;
use proptest::prelude::*;

macro_rules! ensure {
    ($c:expr) => {
        if !$c {
            return Err(format!("{} failed", stringify!($c)));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {{
        let (a, b) = (&$a, &$b);
        if a != b {
            return Err(format!("{} != {}: {a:?} vs {b:?}", stringify!($a), stringify!($b)));
        }
    }};
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: PolicyKind,
    pub instances: usize,
    pub ascend: bool,
    pub hbm: f64,
    pub mode: FirstTokenMode,
    pub leveling: bool,
    pub cobatch: bool,
    pub rows: Vec<(f64, u64, u64)>,
}

pub fn scenario() -> impl Strategy<Value = Scenario> {
    let kind = prop_oneof![
        Just(PolicyKind::Accellm),
        Just(PolicyKind::SplitwiseStatic),
        Just(PolicyKind::Unified),
    ];
    let rows = prop::collection::vec((0.0f64..6.0, 1u64..1500, 1u64..300), 0..=50);
    (
        kind,
        1usize..=4,
        any::<bool>(),
        0.0f64..1.0,
        any::<bool>(),
        any::<bool>(),
        any::<bool>(),
        rows,
    )
        .prop_map(|(kind, n, ascend, squeeze, decode_step, leveling, cobatch, mut rows)| {
            let instances = match kind {
                PolicyKind::Accellm => 2 * n.div_ceil(2),
                PolicyKind::SplitwiseStatic => n.max(2),
                PolicyKind::Unified => n,
            };
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            // Lower HBM down to a few thousand tokens per instance to force
            // evictions and preemptions.
            let hbm = if ascend { 40e9 + squeeze * 40e9 } else { 39.4e9 + squeeze * 40e9 };
            Scenario {
                kind,
                instances,
                ascend,
                hbm,
                mode: if decode_step { FirstTokenMode::DecodeStep } else { FirstTokenMode::Prefill },
                leveling,
                cobatch,
                rows,
            }
        })
}

pub fn execute(s: &Scenario) -> Result<RawResults, String> {
    let mut dev = if s.ascend { DeviceSpec::ascend_910b2() } else { DeviceSpec::h100() };
    dev.hbm_capacity = s.hbm;
    let c = cost(dev, EfficiencyFactors::default());
    let mut params = PolicyParams::default();
    params.accellm = AccellmConfig {
        leveling: s.leveling,
        ..AccellmConfig::default()
    };
    params.splitwise_static.cobatch_under_load = s.cobatch;
    let mut p = build_policy(s.kind, &params);
    let cfg = EngineConfig {
        first_token: s.mode,
        ..checked()
    };
    run(&trace(&s.rows), &c, s.instances, p.as_mut(), &cfg).map_err(|e| e.to_string())
}

/// Runs `s` twice and checks every run-level invariant.
pub fn check(s: &Scenario) -> Result<(), String> {
    let t = trace(&s.rows);
    ensure_eq!(Trace::parse(&t.to_file_string()).map_err(|e| e.to_string())?, t);

    // The engine asserts memory safety, copy freshness and batch residency
    // at every event boundary; any violation surfaces as an error here.
    let raw = execute(s)?;
    let log = raw.events.as_ref().unwrap();

    for r in &raw.requests {
        ensure_eq!(r.state, RequestState::Complete);
        ensure_eq!(r.tokens_emitted, r.decode_len);
        ensure_eq!(r.token_times_s.len() as u64, r.decode_len);
    }
    let emitted: u64 = raw.requests.iter().map(|r| r.tokens_emitted).sum();
    let stepped: u64 = log
        .iter()
        .filter(|e| e.kind == "decode_done")
        .map(|e| e.requests.len() as u64)
        .sum();
    let from_prefill = match s.mode {
        FirstTokenMode::Prefill => raw.requests.len() as u64,
        FirstTokenMode::DecodeStep => 0,
    };
    ensure_eq!(emitted, stepped + from_prefill);
    ensure_eq!(raw.counters.decode_tokens, stepped);

    ensure!(log.windows(2).all(|w| w[1].t >= w[0].t));
    for i in &raw.instance_records {
        ensure!(i.peak_kv_tokens <= raw.kv_capacity_tokens);
        ensure!(i.activity.windows(2).all(|w| w[1].start >= w[0].end - 1e-12));
    }

    for e in log.iter().filter(|e| e.kind == "move") {
        ensure_eq!(e.bytes, None);
    }
    let copied: u64 = log.iter().filter(|e| e.kind == "copy").filter_map(|e| e.bytes).sum();
    ensure_eq!(raw.traffic.leveling, copied);
    let mirrored: u64 = log.iter().filter(|e| e.kind == "mirror").filter_map(|e| e.bytes).sum();
    ensure_eq!(raw.traffic.mirror, mirrored);
    let link_total: u64 = raw
        .links
        .iter()
        .map(|l| l.prefill_transfer_bytes + l.mirror_bytes + l.leveling_bytes)
        .sum();
    ensure_eq!(link_total, raw.traffic.total());

    match s.kind {
        PolicyKind::Accellm => {
            ensure_eq!(raw.counters.cobatched_steps, 0);
            ensure!(log.iter().all(|e| e.kind != "cobatch_prefill"));
        }
        PolicyKind::SplitwiseStatic => {
            let prefillers: Vec<_> = log
                .iter()
                .filter(|e| e.kind == "prefill_start")
                .map(|e| e.instance)
                .collect();
            ensure!(log
                .iter()
                .filter(|e| e.kind == "decode_start")
                .all(|e| !prefillers.contains(&e.instance) || e.requests.is_empty()));
            ensure_eq!(raw.traffic.mirror + raw.traffic.leveling, 0);
        }
        PolicyKind::Unified => {
            ensure_eq!(raw.traffic.total(), 0);
            ensure!(raw.links.iter().all(|l| l.transfers == 0));
        }
    }

    let again = execute(s)?;
    ensure_eq!(raw.to_json(), again.to_json());
    ensure_eq!(raw.events_jsonl(), again.events_jsonl());

    let window = MetricsWindow::default();
    let report = compute_report(&raw, &window, true);
    ensure_eq!(&report, &compute_report(&raw, &window, true));
    let per = report.per_request.as_ref().unwrap();
    let counted: u64 = per.iter().map(|m| 1 + m.tbt.len() as u64).sum();
    let done: u64 = raw
        .requests
        .iter()
        .filter(|r| r.state == RequestState::Complete)
        .map(|r| r.tokens_emitted)
        .sum();
    ensure_eq!(counted, done);
    for st in [report.ttft, report.tbt, report.jct, report.queue_wait].into_iter().flatten() {
        ensure!(st.median <= st.p95 && st.p95 <= st.max);
    }
    for m in per {
        ensure!(m.jct >= m.ttft);
    }
    Ok(())
}
