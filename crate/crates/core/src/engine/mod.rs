//! Deterministic discrete-event core.
//!
//! The engine owns simulated time, the memory and link ledgers and every
//! request's lifecycle; a [`Policy`] decides what runs where through
//! [`SchedCtx::apply`].

mod events;
mod ledger;
mod state;
mod types;
mod view;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{MemoryLedger, Refusal, TrafficTotals, MIRROR_WINDOW_S};
pub use state::{Counters, EngineState, EventRecord, KvEntry, Segment};
pub use types::{
    Activity, CopyRole, Decision, InstId, JobKind, ReqId, RequestState, Retain, Role, TrafficKind,
};
pub use view::{ClusterView, JobInfo, RequestView};

use events::{arrival_requests, Payload};
use ledger::traffic_index;
use crate::perfmodel::{CostModel, PerfError};
use crate::policy::Policy;
use crate::workload::Trace;

/// Version tag written into serialized results.
pub const RAW_SCHEMA: &str = "kvsim.raw/1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error("cluster must contain at least one instance")]
    EmptyCluster,
    #[error("even instance count required, got {0}")]
    OddInstanceCount(usize),
    #[error("invalid policy configuration: {0}")]
    PolicyConfig(String),
    #[error("invalid decision at t={time:.6}s: {msg}")]
    InvalidDecision { time: f64, msg: String },
    #[error("capacity violation at t={time:.6}s on {instance}: {requested} tokens requested, {free} free")]
    Capacity {
        time: f64,
        instance: InstId,
        requested: u64,
        free: u64,
    },
    #[error("attempted to evict the primary KV of {request} on {instance}")]
    EvictPrimary { request: ReqId, instance: InstId },
    #[error("request {request} needs {tokens} KV tokens, an instance holds {capacity}")]
    RequestTooLarge { request: u64, tokens: u64, capacity: u64 },
    #[error("invariant violated at t={time:.6}s: {msg}")]
    Invariant { time: f64, msg: String },
}

/// When a request's first output token appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstTokenMode {
    /// Prefill itself emits the first token.
    #[default]
    Prefill,
    /// Prefill only builds the cache; every token costs a decode step.
    DecodeStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Events after this simulated time are not processed.
    pub horizon: Option<f64>,
    pub first_token: FirstTokenMode,
    /// Re-verify ledgers and residency after every event (slow).
    pub check_invariants: bool,
    pub record_events: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            first_token: FirstTokenMode::Prefill,
            check_invariants: false,
            record_events: false,
        }
    }
}

/// Handle through which a policy inspects the cluster and applies decisions.
pub struct SchedCtx<'a> {
    st: &'a mut EngineState,
    allows_cobatch: bool,
}

impl SchedCtx<'_> {
    pub fn view(&self) -> ClusterView<'_> {
        ClusterView::new(self.st)
    }

    pub fn now(&self) -> f64 {
        self.st.now
    }

    /// Applies one decision immediately; later calls observe its effects.
    pub fn apply(&mut self, d: Decision) -> Result<(), SimError> {
        self.st.apply(d, self.allows_cobatch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_s: f64,
    pub prompt_len: u64,
    pub decode_len: u64,
    pub tokens_emitted: u64,
    pub state: RequestState,
    pub prefill_start_s: Option<f64>,
    pub first_token_s: Option<f64>,
    pub token_times_s: Vec<f64>,
    pub completion_s: Option<f64>,
    pub preemptions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: usize,
    pub peak_kv_tokens: u64,
    pub busy_s: f64,
    pub prefill_jobs: u64,
    pub decode_steps: u64,
    pub activity: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub from: usize,
    pub to: usize,
    pub prefill_transfer_bytes: u64,
    pub mirror_bytes: u64,
    pub leveling_bytes: u64,
    pub transfers: u64,
    pub peak_mirror_bytes_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub t: f64,
    pub queued: usize,
    pub live: usize,
}

/// Everything a run produced, before any statistics are taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResults {
    pub schema: String,
    pub policy: String,
    pub instances: usize,
    pub kv_capacity_tokens: u64,
    pub kv_bytes_per_token: u64,
    pub trace_fingerprint: String,
    pub first_token: FirstTokenMode,
    pub horizon_s: Option<f64>,
    pub end_time_s: f64,
    pub requests: Vec<RequestRecord>,
    pub instance_records: Vec<InstanceRecord>,
    pub traffic: TrafficTotals,
    pub links: Vec<LinkRecord>,
    pub queue_depth: Vec<QueueSample>,
    pub counters: Counters,
    #[serde(skip)]
    pub events: Option<Vec<EventRecord>>,
}

impl RawResults {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    /// Event log as JSON lines, when it was recorded.
    pub fn events_jsonl(&self) -> Option<String> {
        self.events.as_ref().map(|evs| {
            evs.iter()
                .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
                .collect()
        })
    }
}

/// Simulates `trace` on `instances` identical instances under `policy`.
pub fn run(
    trace: &Trace,
    cost: &CostModel<f64>,
    instances: usize,
    policy: &mut dyn Policy,
    cfg: &EngineConfig,
) -> Result<RawResults, SimError> {
    if instances == 0 {
        return Err(SimError::EmptyCluster);
    }
    policy.validate_cluster(instances)?;
    let capacity = cost.kv_capacity_tokens()?;
    if let Some(r) = trace.requests.iter().find(|r| r.prompt_len + r.decode_len > capacity) {
        return Err(SimError::RequestTooLarge {
            request: r.id,
            tokens: r.prompt_len + r.decode_len,
            capacity,
        });
    }
    let mut st = EngineState::new(trace, cost, instances, capacity, cfg);

    let mut k = 0;
    while k < trace.requests.len() {
        let t = trace.requests[k].arrival_s;
        let mut last = k;
        while last + 1 < trace.requests.len() && trace.requests[last + 1].arrival_s == t {
            last += 1;
        }
        st.events.push(t, Payload::Arrival { first: k, last });
        k = last + 1;
    }
    let period = policy.timer_period();
    let allows_cobatch = policy.allows_cobatch();
    policy.init(&mut SchedCtx {
        st: &mut st,
        allows_cobatch,
    })?;
    if !trace.is_empty() {
        st.events.push(period, Payload::PolicyTimer);
    }

    let mut queue_depth = Vec::new();
    while let Some(t) = st.events.peek_time() {
        if cfg.horizon.is_some_and(|h| t > h) {
            break;
        }
        let ev = st.events.pop().expect("peeked event");
        debug_assert!(ev.time >= st.now, "time went backwards");
        st.account(ev.time);
        st.now = ev.time;
        let mut ctx = SchedCtx {
            st: &mut st,
            allows_cobatch,
        };
        match ev.payload {
            Payload::Arrival { first, last } => {
                let reqs: Vec<ReqId> = arrival_requests(first, last).collect();
                ctx.st.arrive(&reqs);
                policy.on_arrival(&mut ctx, &reqs)?;
            }
            Payload::TransferDone(id) => {
                let moved = ctx.st.finish_transfer(id);
                if !moved.is_empty() {
                    policy.on_transfer_complete(&mut ctx, &moved)?;
                }
            }
            Payload::PrefillDone(inst) => {
                let (prefilled, done) = ctx.st.finish_prefill(inst);
                if !done.is_empty() {
                    policy.on_request_complete(&mut ctx, &done)?;
                }
                policy.on_prefill_complete(&mut ctx, inst, &prefilled)?;
            }
            Payload::DecodeStepDone(inst) => {
                let (done, _) = ctx.st.finish_decode(inst);
                if !done.is_empty() {
                    policy.on_request_complete(&mut ctx, &done)?;
                }
                policy.on_step_boundary(&mut ctx, inst)?;
            }
            Payload::PolicyTimer => {
                queue_depth.push(QueueSample {
                    t: ev.time,
                    queued: ctx.st.queued,
                    live: ctx.st.live,
                });
                policy.on_timer(&mut ctx)?;
                if ctx.st.events.has_work() || ctx.st.live > 0 {
                    ctx.st.events.push(ev.time + period, Payload::PolicyTimer);
                }
            }
        }
        while !ctx.st.preempted.is_empty() {
            let pre = std::mem::take(&mut ctx.st.preempted);
            policy.on_preempted(&mut ctx, &pre)?;
        }
        classify(&mut st, policy);
        if cfg.check_invariants {
            st.check_invariants()?;
        }
    }
    let end = st.now;
    st.account(end);
    Ok(collect(st, policy.name(), trace, capacity, cfg, queue_depth))
}

fn classify(st: &mut EngineState, policy: &dyn Policy) {
    let classes: Vec<Option<Activity>> = {
        let view = ClusterView::new(st);
        view.instances()
            .map(|i| {
                if !view.is_free(i) {
                    return None;
                }
                Some(if policy.holding(&view, i) {
                    Activity::SyncWait
                } else if st.runnable_locally(i)
                    || (view.queued_count() > 0 && policy.may_prefill(&view, i))
                {
                    Activity::IdleRunnable
                } else {
                    Activity::Idle
                })
            })
            .collect()
    };
    for (i, c) in st.insts.iter_mut().zip(classes) {
        if let Some(c) = c {
            i.free_class = c;
        }
    }
}

fn collect(
    st: EngineState,
    policy: &str,
    trace: &Trace,
    capacity: u64,
    cfg: &EngineConfig,
    queue_depth: Vec<QueueSample>,
) -> RawResults {
    let requests = st
        .reqs
        .iter()
        .map(|q| RequestRecord {
            id: q.trace_id,
            arrival_s: q.arrival,
            prompt_len: q.prompt_len,
            decode_len: q.decode_len,
            tokens_emitted: q.tokens_emitted,
            state: q.state,
            prefill_start_s: q.prefill_start,
            first_token_s: q.first_token_time,
            token_times_s: q.token_times.clone(),
            completion_s: q.completion_time,
            preemptions: q.preemptions,
        })
        .collect();
    let instance_records = st
        .insts
        .iter()
        .enumerate()
        .map(|(k, i)| InstanceRecord {
            id: k,
            peak_kv_tokens: st.mem.peak(InstId(k)),
            busy_s: i.busy_time,
            prefill_jobs: i.prefill_jobs,
            decode_steps: i.decode_steps,
            activity: i.activity.clone(),
        })
        .collect();
    let mut traffic = TrafficTotals::default();
    let mut links = Vec::new();
    for (from, to, l) in st.links.iter() {
        if l.transfers == 0 {
            continue;
        }
        traffic.prefill_transfer += l.bytes[traffic_index(TrafficKind::PrefillTransfer)];
        traffic.mirror += l.bytes[traffic_index(TrafficKind::Mirror)];
        traffic.leveling += l.bytes[traffic_index(TrafficKind::Leveling)];
        links.push(LinkRecord {
            from: from.0,
            to: to.0,
            prefill_transfer_bytes: l.bytes[traffic_index(TrafficKind::PrefillTransfer)],
            mirror_bytes: l.bytes[traffic_index(TrafficKind::Mirror)],
            leveling_bytes: l.bytes[traffic_index(TrafficKind::Leveling)],
            transfers: l.transfers,
            peak_mirror_bytes_per_s: l.peak_mirror_bps,
        });
    }
    RawResults {
        schema: RAW_SCHEMA.to_string(),
        policy: policy.to_string(),
        instances: st.insts.len(),
        kv_capacity_tokens: capacity,
        kv_bytes_per_token: st.kvb,
        trace_fingerprint: trace.fingerprint(),
        first_token: cfg.first_token,
        horizon_s: cfg.horizon,
        end_time_s: st.now,
        requests,
        instance_records,
        traffic,
        links,
        queue_depth,
        counters: st.counters,
        events: st.log,
    }
}
