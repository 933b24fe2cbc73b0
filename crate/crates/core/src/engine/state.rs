use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::events::{EventQueue, Payload};
use super::ledger::{LinkLedger, MemoryLedger};
use super::types::{
    Activity, CopyRole, Decision, InstId, JobKind, ReqId, RequestState, Retain, Role, TrafficKind,
};
use super::{EngineConfig, FirstTokenMode, SimError};
use crate::perfmodel::CostModel;
use crate::workload::Trace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvEntry {
    pub inst: InstId,
    pub role: CopyRole,
    /// Logical tokens, including lines still in flight towards this copy.
    pub tokens: u64,
    /// When the last in-flight line lands.
    pub ready_at: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct RequestRt {
    pub trace_id: u64,
    pub arrival: f64,
    pub prompt_len: u64,
    pub decode_len: u64,
    pub tokens_emitted: u64,
    pub state: RequestState,
    pub first_token_time: Option<f64>,
    pub token_times: Vec<f64>,
    pub completion_time: Option<f64>,
    /// Start of the first prefill job that included this request.
    pub prefill_start: Option<f64>,
    /// Tokens the next prefill must (re)compute.
    pub prefill_tokens: u64,
    pub resumed: bool,
    pub preemptions: u32,
    pub kv: Vec<KvEntry>,
    pub batched_on: Option<InstId>,
    pub in_job: bool,
    pub handover: Option<u64>,
    pub ready_on: Option<InstId>,
}

impl RequestRt {
    pub fn primary(&self) -> Option<&KvEntry> {
        self.kv.iter().find(|e| e.role == CopyRole::Primary)
    }

    pub fn entry(&self, inst: InstId) -> Option<&KvEntry> {
        self.kv.iter().find(|e| e.inst == inst)
    }

    fn entry_mut(&mut self, inst: InstId) -> Option<&mut KvEntry> {
        self.kv.iter_mut().find(|e| e.inst == inst)
    }

    pub fn is_live(&self) -> bool {
        matches!(self.state, RequestState::Prefilling | RequestState::Decoding)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Job {
    pub kind: JobKind,
    pub start: f64,
    pub end: f64,
    pub decode: Vec<ReqId>,
    pub prefill: Vec<ReqId>,
}

/// Interval of uniform activity on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub activity: Activity,
}

#[derive(Debug, Clone)]
pub(crate) struct InstanceRt {
    pub role: Role,
    pub batch: Vec<ReqId>,
    pub job: Option<Job>,
    pub busy_time: f64,
    pub activity: Vec<Segment>,
    pub free_class: Activity,
    pub last_step: f64,
    pub hosted: BTreeSet<ReqId>,
    pub ready: BTreeSet<ReqId>,
    pub prefill_jobs: u64,
    pub decode_steps: u64,
}

impl InstanceRt {
    fn new() -> Self {
        Self {
            role: Role::Idle,
            batch: Vec::new(),
            job: None,
            busy_time: 0.0,
            activity: Vec::new(),
            free_class: Activity::Idle,
            last_step: 0.0,
            hosted: BTreeSet::new(),
            ready: BTreeSet::new(),
            prefill_jobs: 0,
            decode_steps: 0,
        }
    }

    fn push_segment(&mut self, start: f64, end: f64, activity: Activity) {
        if end <= start {
            return;
        }
        if let Some(last) = self.activity.last_mut() {
            if last.activity == activity && last.end == start {
                last.end = end;
                return;
            }
        }
        self.activity.push(Segment {
            start,
            end,
            activity,
        });
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Transfer {
    pub from: InstId,
    pub to: InstId,
    pub requests: Vec<ReqId>,
    pub retain: Retain,
}

/// Run-wide counters reported alongside results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub prefill_jobs: u64,
    pub decode_steps: u64,
    pub cobatched_steps: u64,
    /// Σ batch sizes over decode steps.
    pub decode_tokens: u64,
    /// Σ batch members holding at least one redundant copy at step start.
    pub decode_tokens_with_copy: u64,
    /// Token lines shipped to redundant copies.
    pub mirrored_tokens: u64,
    pub stale_mirror_skips: u64,
    pub rebalance_moves: u64,
    pub handovers: u64,
    pub redundant_created: u64,
    pub policy_evictions: u64,
    pub engine_evictions: u64,
    pub preemptions: u64,
}

/// One line of the optional debugging event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub requests: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub until: Option<f64>,
}

/// Everything the simulation mutates. Policies reach it only through
/// [`super::SchedCtx`] and [`super::ClusterView`].
#[derive(Debug)]
pub struct EngineState {
    pub(crate) now: f64,
    pub(crate) cfg: EngineConfig,
    pub(crate) cost: CostModel<f64>,
    pub(crate) kvb: u64,
    pub(crate) layers: u64,
    pub(crate) slack: f64,
    pub(crate) reqs: Vec<RequestRt>,
    pub(crate) insts: Vec<InstanceRt>,
    pub(crate) mem: MemoryLedger,
    pub(crate) links: LinkLedger,
    pub(crate) transfers: BTreeMap<u64, Transfer>,
    next_transfer: u64,
    pub(crate) events: EventQueue,
    pub(crate) queued: usize,
    pub(crate) live: usize,
    pub(crate) arrived: usize,
    pub(crate) preempted: Vec<ReqId>,
    pub(crate) counters: Counters,
    pub(crate) log: Option<Vec<EventRecord>>,
    pub(crate) last_account: f64,
}

fn err(now: f64, msg: impl Into<String>) -> SimError {
    SimError::InvalidDecision {
        time: now,
        msg: msg.into(),
    }
}

impl EngineState {
    pub(crate) fn new(
        trace: &Trace,
        cost: &CostModel<f64>,
        instances: usize,
        capacity: u64,
        cfg: &EngineConfig,
    ) -> Self {
        let reqs = trace
            .requests
            .iter()
            .map(|r| RequestRt {
                trace_id: r.id,
                arrival: r.arrival_s,
                prompt_len: r.prompt_len,
                decode_len: r.decode_len,
                tokens_emitted: 0,
                state: RequestState::Queued,
                first_token_time: None,
                token_times: Vec::new(),
                completion_time: None,
                prefill_start: None,
                prefill_tokens: r.prompt_len,
                resumed: false,
                preemptions: 0,
                kv: Vec::new(),
                batched_on: None,
                in_job: false,
                handover: None,
                ready_on: None,
            })
            .collect();
        let layers = cost.model.num_layers;
        Self {
            now: 0.0,
            cfg: cfg.clone(),
            cost: cost.clone(),
            kvb: cost.kv_bytes_per_token(),
            layers,
            slack: cost.weight_load_floor() / layers.max(1) as f64,
            reqs,
            insts: (0..instances).map(|_| InstanceRt::new()).collect(),
            mem: MemoryLedger::new(instances, capacity),
            links: LinkLedger::new(instances, cost.link_rate()),
            transfers: BTreeMap::new(),
            next_transfer: 0,
            events: EventQueue::default(),
            queued: 0,
            live: 0,
            arrived: 0,
            preempted: Vec::new(),
            counters: Counters::default(),
            log: cfg.record_events.then(Vec::new),
            last_account: 0.0,
        }
    }

    pub(crate) fn record(
        &mut self,
        kind: &str,
        instance: Option<InstId>,
        requests: &[ReqId],
        peer: Option<InstId>,
        bytes: Option<u64>,
        until: Option<f64>,
    ) {
        if let Some(log) = self.log.as_mut() {
            log.push(EventRecord {
                t: self.now,
                kind: kind.to_string(),
                instance: instance.map(|i| i.0),
                requests: requests.iter().map(|r| r.0).collect(),
                peer: peer.map(|i| i.0),
                bytes,
                until,
            });
        }
    }

    fn check_inst(&self, inst: InstId) -> Result<(), SimError> {
        if inst.0 >= self.insts.len() {
            return Err(err(self.now, format!("unknown instance {inst}")));
        }
        Ok(())
    }

    fn check_req(&self, r: ReqId) -> Result<&RequestRt, SimError> {
        self.reqs
            .get(r.0)
            .filter(|q| q.arrival <= self.now)
            .ok_or_else(|| err(self.now, format!("unknown or not yet arrived request {r}")))
    }

    pub(crate) fn primary_inst(&self, r: ReqId) -> Option<InstId> {
        self.reqs[r.0].primary().map(|e| e.inst)
    }

    /// Redundant copy on `inst` that matches the primary and is resident by now
    /// (up to one layer's worth of pipelining slack).
    pub(crate) fn usable_copy(&self, r: ReqId, inst: InstId) -> bool {
        let q = &self.reqs[r.0];
        match (q.primary(), q.entry(inst)) {
            (Some(p), Some(e)) => {
                e.role == CopyRole::Redundant
                    && e.tokens == p.tokens
                    && e.ready_at <= self.now + self.slack
            }
            _ => false,
        }
    }

    fn alloc_entry(
        &mut self,
        r: ReqId,
        inst: InstId,
        tokens: u64,
        role: CopyRole,
        ready_at: f64,
    ) -> Result<(), SimError> {
        self.mem
            .allocate(inst, tokens)
            .map_err(|refusal| SimError::Capacity {
                time: self.now,
                instance: refusal.instance,
                requested: refusal.requested,
                free: refusal.free,
            })?;
        self.reqs[r.0].kv.push(KvEntry {
            inst,
            role,
            tokens,
            ready_at,
        });
        self.insts[inst.0].hosted.insert(r);
        Ok(())
    }

    fn free_entry(&mut self, r: ReqId, inst: InstId) -> u64 {
        let q = &mut self.reqs[r.0];
        let Some(pos) = q.kv.iter().position(|e| e.inst == inst) else {
            return 0;
        };
        let e = q.kv.swap_remove(pos);
        self.mem.release(inst, e.tokens);
        self.insts[inst.0].hosted.remove(&r);
        e.tokens
    }

    fn free_all(&mut self, r: ReqId) {
        let insts: Vec<InstId> = self.reqs[r.0].kv.iter().map(|e| e.inst).collect();
        for i in insts {
            self.free_entry(r, i);
        }
    }

    /// Frees a redundant copy and returns the tokens released.
    pub(crate) fn evict_redundant(&mut self, r: ReqId, inst: InstId) -> Result<u64, SimError> {
        match self.reqs[r.0].entry(inst) {
            None => Err(err(self.now, format!("{r} has no KV copy on {inst}"))),
            Some(e) if e.role == CopyRole::Primary => Err(SimError::EvictPrimary {
                request: r,
                instance: inst,
            }),
            Some(_) => Ok(self.free_entry(r, inst)),
        }
    }

    fn remove_from_batch(&mut self, r: ReqId) {
        if let Some(i) = self.reqs[r.0].batched_on.take() {
            self.insts[i.0].batch.retain(|&x| x != r);
        }
    }

    /// Recomputes whether `r` waits, unbatched, on its primary's instance.
    pub(crate) fn refresh_ready(&mut self, r: ReqId) {
        if let Some(i) = self.reqs[r.0].ready_on.take() {
            self.insts[i.0].ready.remove(&r);
        }
        let q = &self.reqs[r.0];
        if q.state == RequestState::Decoding
            && q.batched_on.is_none()
            && q.handover.is_none()
            && !q.in_job
        {
            if let Some(p) = q.primary().map(|e| e.inst) {
                self.reqs[r.0].ready_on = Some(p);
                self.insts[p.0].ready.insert(r);
            }
        }
    }

    fn emit_token(&mut self, r: ReqId) {
        let now = self.now;
        let q = &mut self.reqs[r.0];
        q.tokens_emitted += 1;
        q.token_times.push(now);
        q.first_token_time.get_or_insert(now);
    }

    fn complete(&mut self, r: ReqId) {
        self.remove_from_batch(r);
        self.free_all(r);
        let q = &mut self.reqs[r.0];
        q.state = RequestState::Complete;
        q.completion_time = Some(self.now);
        q.handover = None;
        self.live -= 1;
        self.refresh_ready(r);
    }

    fn preempt(&mut self, r: ReqId) {
        let tokens = self.reqs[r.0].primary().map_or(0, |e| e.tokens);
        self.remove_from_batch(r);
        self.free_all(r);
        let q = &mut self.reqs[r.0];
        q.state = RequestState::Queued;
        q.prefill_tokens = tokens;
        q.resumed = true;
        q.preemptions += 1;
        self.queued += 1;
        self.counters.preemptions += 1;
        self.preempted.push(r);
        self.refresh_ready(r);
    }

    pub(crate) fn arrive(&mut self, reqs: &[ReqId]) {
        self.arrived += reqs.len();
        self.queued += reqs.len();
        self.live += reqs.len();
        self.record("arrival", None, reqs, None, None, None);
    }

    fn start_job(&mut self, inst: InstId, job: Job) -> Result<(), SimError> {
        let i = &mut self.insts[inst.0];
        if i.job.is_some() {
            return Err(err(self.now, format!("{inst} is busy")));
        }
        i.push_segment(job.start, job.end, job.kind.into());
        i.busy_time += job.end - job.start;
        let payload = match job.kind {
            JobKind::Prefill => {
                i.role = Role::Prefill;
                i.prefill_jobs += 1;
                Payload::PrefillDone(inst)
            }
            JobKind::Decode | JobKind::CoBatched => {
                i.role = Role::Decode;
                i.decode_steps += 1;
                i.last_step = job.end - job.start;
                Payload::DecodeStepDone(inst)
            }
        };
        self.events.push(job.end, payload);
        for &r in job.decode.iter().chain(job.prefill.iter()) {
            self.reqs[r.0].in_job = true;
            self.refresh_ready(r);
        }
        self.insts[inst.0].job = Some(job);
        Ok(())
    }

    fn take_queued(&self, requests: &[ReqId]) -> Result<(Vec<u64>, u64), SimError> {
        let mut seen = BTreeSet::new();
        let mut lens = Vec::with_capacity(requests.len());
        for &r in requests {
            let q = self.check_req(r)?;
            if q.state != RequestState::Queued {
                return Err(err(self.now, format!("{r} is not queued")));
            }
            if !seen.insert(r) {
                return Err(err(self.now, format!("{r} listed twice")));
            }
            lens.push(q.prefill_tokens);
        }
        let total = lens.iter().sum();
        Ok((lens, total))
    }

    pub(crate) fn apply(&mut self, d: Decision, allows_cobatch: bool) -> Result<(), SimError> {
        match d {
            Decision::AssignPrefill {
                instance,
                requests,
                kv_target,
                retain,
            } => self.assign_prefill(instance, requests, kv_target, retain),
            Decision::StartDecode { instance, cobatch } => {
                if !cobatch.is_empty() && !allows_cobatch {
                    return Err(err(
                        self.now,
                        format!("{instance}: policy does not co-batch prefill and decode"),
                    ));
                }
                self.start_decode(instance, cobatch)
            }
            Decision::SetRole { instance, role } => {
                self.check_inst(instance)?;
                self.insts[instance.0].role = role;
                Ok(())
            }
            Decision::AddToBatch { instance, request } => self.add_to_batch(instance, request),
            Decision::RebalanceMove { request, from, to } => self.rebalance_move(request, from, to),
            Decision::CreateRedundant { request, on } => self.create_redundant(request, on),
            Decision::EvictRedundant { request, on } => {
                self.check_inst(on)?;
                self.check_req(request)?;
                let freed = self.evict_redundant(request, on)?;
                self.counters.policy_evictions += 1;
                self.record("evict", Some(on), &[request], None, Some(freed * self.kvb), None);
                Ok(())
            }
        }
    }

    fn assign_prefill(
        &mut self,
        inst: InstId,
        requests: Vec<ReqId>,
        target: Option<InstId>,
        retain: Retain,
    ) -> Result<(), SimError> {
        self.check_inst(inst)?;
        if requests.is_empty() {
            return Err(err(self.now, "empty prefill assignment"));
        }
        match (target, retain) {
            (None, Retain::Primary) => {}
            (None, _) => return Err(err(self.now, "handover requires a KV target")),
            (Some(t), _) => {
                self.check_inst(t)?;
                if t == inst {
                    return Err(err(self.now, "KV target equals prefill instance"));
                }
            }
        }
        if self.insts[inst.0].job.is_some() {
            return Err(err(self.now, format!("{inst} is busy")));
        }
        let (lens, total) = self.take_queued(&requests)?;
        for (who, need) in std::iter::once(inst).chain(target).map(|i| (i, total)) {
            if !self.mem.fits(who, need) {
                return Err(SimError::Capacity {
                    time: self.now,
                    instance: who,
                    requested: need,
                    free: self.mem.free(who),
                });
            }
        }
        let latency = self.cost.prefill_latency(&lens)?;
        let end = self.now + latency;
        for (&r, &len) in requests.iter().zip(&lens) {
            self.alloc_entry(r, inst, len, CopyRole::Primary, end)?;
            let q = &mut self.reqs[r.0];
            q.state = RequestState::Prefilling;
            q.prefill_start.get_or_insert(self.now);
            self.queued -= 1;
        }
        if let Some(t) = target {
            let bytes = total * self.kvb;
            let finish = self.links.enqueue_pipelined(
                inst,
                t,
                bytes,
                TrafficKind::PrefillTransfer,
                self.now,
                latency,
                self.layers,
            );
            let id = self.next_transfer;
            self.next_transfer += 1;
            for (&r, &len) in requests.iter().zip(&lens) {
                self.alloc_entry(r, t, len, CopyRole::Redundant, finish)?;
                if retain != Retain::Primary {
                    self.reqs[r.0].handover = Some(id);
                }
            }
            self.transfers.insert(
                id,
                Transfer {
                    from: inst,
                    to: t,
                    requests: requests.clone(),
                    retain,
                },
            );
            self.events.push(finish, Payload::TransferDone(id));
            self.record("transfer", Some(inst), &requests, Some(t), Some(bytes), Some(finish));
        }
        self.counters.prefill_jobs += 1;
        self.record("prefill_start", Some(inst), &requests, target, None, Some(end));
        self.start_job(
            inst,
            Job {
                kind: JobKind::Prefill,
                start: self.now,
                end,
                decode: Vec::new(),
                prefill: requests,
            },
        )
    }

    fn make_room(&mut self, inst: InstId, need: u64) {
        while !self.mem.fits(inst, need) {
            let victim = self.insts[inst.0]
                .hosted
                .iter()
                .filter_map(|&r| {
                    let e = self.reqs[r.0].entry(inst)?;
                    (e.role == CopyRole::Redundant).then_some((e.tokens, r))
                })
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            if let Some((_, r)) = victim {
                self.free_entry(r, inst);
                self.counters.engine_evictions += 1;
                self.record("engine_evict", Some(inst), &[r], None, None, None);
                continue;
            }
            let newest = self.insts[inst.0].batch.iter().copied().max_by(|a, b| {
                let (qa, qb) = (&self.reqs[a.0], &self.reqs[b.0]);
                qa.arrival.total_cmp(&qb.arrival).then(a.cmp(b))
            });
            match newest {
                Some(r) => {
                    self.record("preempt", Some(inst), &[r], None, None, None);
                    self.preempt(r);
                }
                None => break,
            }
        }
    }

    fn start_decode(&mut self, inst: InstId, cobatch: Vec<ReqId>) -> Result<(), SimError> {
        self.check_inst(inst)?;
        if self.insts[inst.0].job.is_some() {
            return Err(err(self.now, format!("{inst} is busy")));
        }
        let (plens, ptotal) = self.take_queued(&cobatch)?;
        if !self.mem.fits(inst, ptotal) {
            return Err(SimError::Capacity {
                time: self.now,
                instance: inst,
                requested: ptotal,
                free: self.mem.free(inst),
            });
        }
        let growth = self.insts[inst.0].batch.len() as u64;
        if !self.mem.fits(inst, ptotal + growth) {
            self.make_room(inst, ptotal + self.insts[inst.0].batch.len() as u64);
        }
        let batch = self.insts[inst.0].batch.clone();
        if batch.is_empty() && cobatch.is_empty() {
            if self.preempted.is_empty() {
                return Err(err(self.now, format!("{inst}: decode step with empty batch")));
            }
            return Ok(());
        }
        let kv_total: u64 = batch
            .iter()
            .map(|r| self.reqs[r.0].primary().map_or(0, |e| e.tokens))
            .sum();
        let mut latency = 0.0;
        if !batch.is_empty() {
            latency += self.cost.decode_step_latency_totals(batch.len() as u64, kv_total)?;
        }
        if !cobatch.is_empty() {
            latency += self.cost.prefill_latency(&plens)?;
        }
        let end = self.now + latency;

        // Grow every primary by the token this step produces, then mirror it.
        let mut mirrors: BTreeMap<InstId, Vec<(ReqId, u64)>> = BTreeMap::new();
        for &r in &batch {
            self.mem.allocate(inst, 1).map_err(|f| SimError::Capacity {
                time: self.now,
                instance: inst,
                requested: 1,
                free: f.free,
            })?;
            let q = &mut self.reqs[r.0];
            let p = q.kv.iter_mut().find(|e| e.role == CopyRole::Primary).expect("batched request has a primary");
            p.tokens += 1;
            p.ready_at = end;
            let tokens = p.tokens;
            let mut has_copy = false;
            for e in q.kv.iter().filter(|e| e.role == CopyRole::Redundant) {
                has_copy = true;
                if e.tokens < tokens {
                    mirrors.entry(e.inst).or_default().push((r, tokens - e.tokens));
                }
            }
            if has_copy {
                self.counters.decode_tokens_with_copy += 1;
            }
        }
        for (dest, lines) in mirrors {
            if self.links.backlog(inst, dest, self.now) > latency {
                self.counters.stale_mirror_skips += lines.len() as u64;
                continue;
            }
            let mut shipped: Vec<(ReqId, u64)> = Vec::with_capacity(lines.len());
            for (r, lag) in lines {
                if self.mem.allocate(dest, lag).is_ok() {
                    shipped.push((r, lag));
                } else {
                    self.counters.stale_mirror_skips += 1;
                }
            }
            let tokens: u64 = shipped.iter().map(|x| x.1).sum();
            if tokens == 0 {
                continue;
            }
            let bytes = tokens * self.kvb;
            let finish = self.links.enqueue_pipelined(
                inst,
                dest,
                bytes,
                TrafficKind::Mirror,
                self.now,
                latency,
                self.layers,
            );
            for &(r, lag) in &shipped {
                let e = self.reqs[r.0].entry_mut(dest).expect("mirror destination copy");
                e.tokens += lag;
                e.ready_at = e.ready_at.max(finish);
            }
            self.counters.mirrored_tokens += tokens;
            let reqs: Vec<ReqId> = shipped.iter().map(|x| x.0).collect();
            self.record("mirror", Some(inst), &reqs, Some(dest), Some(bytes), Some(finish));
        }

        for (&r, &len) in cobatch.iter().zip(&plens) {
            self.alloc_entry(r, inst, len, CopyRole::Primary, end)?;
            let q = &mut self.reqs[r.0];
            q.state = RequestState::Prefilling;
            q.prefill_start.get_or_insert(self.now);
            self.queued -= 1;
        }
        let kind = if cobatch.is_empty() {
            JobKind::Decode
        } else if batch.is_empty() {
            JobKind::Prefill
        } else {
            JobKind::CoBatched
        };
        if kind == JobKind::Prefill {
            self.counters.prefill_jobs += 1;
        } else {
            self.counters.decode_steps += 1;
            self.counters.decode_tokens += batch.len() as u64;
            if kind == JobKind::CoBatched {
                self.counters.cobatched_steps += 1;
            }
        }
        self.record("decode_start", Some(inst), &batch, None, None, Some(end));
        if !cobatch.is_empty() {
            self.record("cobatch_prefill", Some(inst), &cobatch, None, None, Some(end));
        }
        self.start_job(
            inst,
            Job {
                kind,
                start: self.now,
                end,
                decode: batch,
                prefill: cobatch,
            },
        )
    }

    fn add_to_batch(&mut self, inst: InstId, r: ReqId) -> Result<(), SimError> {
        self.check_inst(inst)?;
        let q = self.check_req(r)?;
        if q.state != RequestState::Decoding || q.handover.is_some() {
            return Err(err(self.now, format!("{r} is not ready to decode")));
        }
        if q.batched_on.is_some() {
            return Err(err(self.now, format!("{r} is already batched")));
        }
        match q.primary() {
            Some(p) if p.inst == inst && p.ready_at <= self.now + self.slack => {}
            _ => return Err(err(self.now, format!("{r} has no resident primary on {inst}"))),
        }
        self.reqs[r.0].batched_on = Some(inst);
        self.insts[inst.0].batch.push(r);
        self.refresh_ready(r);
        Ok(())
    }

    fn rebalance_move(&mut self, r: ReqId, from: InstId, to: InstId) -> Result<(), SimError> {
        self.check_inst(from)?;
        self.check_inst(to)?;
        let q = self.check_req(r)?;
        if q.state != RequestState::Decoding || q.handover.is_some() || q.in_job {
            return Err(err(self.now, format!("{r} cannot move now")));
        }
        if self.primary_inst(r) != Some(from) {
            return Err(err(self.now, format!("{r} primary is not on {from}")));
        }
        if !self.usable_copy(r, to) {
            return Err(err(self.now, format!("{r} has no fresh copy on {to}")));
        }
        let was_batched = self.reqs[r.0].batched_on.is_some();
        self.remove_from_batch(r);
        for e in self.reqs[r.0].kv.iter_mut() {
            if e.inst == from {
                e.role = CopyRole::Redundant;
            } else if e.inst == to {
                e.role = CopyRole::Primary;
            }
        }
        if was_batched {
            self.reqs[r.0].batched_on = Some(to);
            self.insts[to.0].batch.push(r);
        }
        self.refresh_ready(r);
        self.counters.rebalance_moves += 1;
        self.record("move", Some(from), &[r], Some(to), None, None);
        Ok(())
    }

    fn create_redundant(&mut self, r: ReqId, on: InstId) -> Result<(), SimError> {
        self.check_inst(on)?;
        let q = self.check_req(r)?;
        if q.state != RequestState::Decoding || q.handover.is_some() {
            return Err(err(self.now, format!("{r} cannot be copied now")));
        }
        if q.entry(on).is_some() {
            return Err(err(self.now, format!("{r} already has a copy on {on}")));
        }
        let p = *q.primary().expect("decoding request has a primary");
        let busy_until = if q.in_job { p.ready_at } else { self.now };
        let bytes = p.tokens * self.kvb;
        if !self.mem.fits(on, p.tokens) {
            return Err(SimError::Capacity {
                time: self.now,
                instance: on,
                requested: p.tokens,
                free: self.mem.free(on),
            });
        }
        let finish =
            self.links
                .enqueue_pipelined(p.inst, on, bytes, TrafficKind::Leveling, self.now, 0.0, 1);
        self.alloc_entry(r, on, p.tokens, CopyRole::Redundant, finish.max(busy_until))?;
        self.counters.redundant_created += 1;
        self.record("copy", Some(p.inst), &[r], Some(on), Some(bytes), Some(finish));
        Ok(())
    }

    /// Handles a prefill job end; returns the prefilled and the completed requests.
    pub(crate) fn finish_prefill(&mut self, inst: InstId) -> (Vec<ReqId>, Vec<ReqId>) {
        let job = self.insts[inst.0].job.take().expect("prefill job running");
        let mut done = Vec::new();
        for &r in &job.prefill {
            if self.first_token_from(r) {
                done.push(r);
            }
        }
        self.record("prefill_done", Some(inst), &job.prefill, None, None, None);
        (job.prefill, done)
    }

    /// Settles a freshly prefilled request; true when it already completed.
    fn first_token_from(&mut self, r: ReqId) -> bool {
        let q = &mut self.reqs[r.0];
        q.in_job = false;
        q.state = RequestState::Decoding;
        let emits = !q.resumed && self.cfg.first_token == FirstTokenMode::Prefill;
        q.resumed = false;
        if emits {
            self.emit_token(r);
        }
        let q = &self.reqs[r.0];
        if q.tokens_emitted >= q.decode_len {
            self.complete(r);
            return true;
        }
        self.refresh_ready(r);
        false
    }

    /// Handles a decode step end; returns (completed, newly prefilled by co-batching).
    pub(crate) fn finish_decode(&mut self, inst: InstId) -> (Vec<ReqId>, Vec<ReqId>) {
        let job = self.insts[inst.0].job.take().expect("decode job running");
        let mut done = Vec::new();
        for &r in &job.decode {
            self.reqs[r.0].in_job = false;
            self.emit_token(r);
            let q = &self.reqs[r.0];
            if q.tokens_emitted >= q.decode_len {
                self.complete(r);
                done.push(r);
            } else {
                self.refresh_ready(r);
            }
        }
        let mut prefilled = Vec::new();
        for &r in &job.prefill {
            if self.first_token_from(r) {
                done.push(r);
            } else {
                prefilled.push(r);
            }
        }
        self.record("decode_done", Some(inst), &job.decode, None, None, None);
        if !done.is_empty() {
            self.record("complete", Some(inst), &done, None, None, None);
        }
        (done, prefilled)
    }

    /// Completes a prefill transfer; returns requests whose primary moved.
    pub(crate) fn finish_transfer(&mut self, id: u64) -> Vec<(ReqId, InstId)> {
        let Some(t) = self.transfers.remove(&id) else {
            return Vec::new();
        };
        let mut moved = Vec::new();
        for &r in &t.requests {
            if self.reqs[r.0].handover != Some(id) {
                continue;
            }
            self.reqs[r.0].handover = None;
            let has_target = self.reqs[r.0]
                .entry(t.to)
                .is_some_and(|e| e.role == CopyRole::Redundant);
            let src_primary = self.primary_inst(r) == Some(t.from);
            if has_target && src_primary {
                for e in self.reqs[r.0].kv.iter_mut() {
                    if e.inst == t.to {
                        e.role = CopyRole::Primary;
                    } else if e.inst == t.from {
                        e.role = CopyRole::Redundant;
                    }
                }
                if t.retain == Retain::Nothing {
                    self.free_entry(r, t.from);
                }
                self.counters.handovers += 1;
                moved.push((r, t.to));
            }
            self.refresh_ready(r);
        }
        self.record("transfer_done", Some(t.from), &t.requests, Some(t.to), None, None);
        moved
    }

    /// Attributes the time since the last event to each free instance.
    pub(crate) fn account(&mut self, now: f64) {
        let from = self.last_account;
        for i in self.insts.iter_mut() {
            if i.job.is_none() {
                i.push_segment(from, now, i.free_class);
            }
        }
        self.last_account = now;
    }

    pub(crate) fn runnable_locally(&self, inst: InstId) -> bool {
        let i = &self.insts[inst.0];
        !i.batch.is_empty() || !i.ready.is_empty()
    }

    pub(crate) fn check_invariants(&self) -> Result<(), SimError> {
        let fail = |msg: String| SimError::Invariant {
            time: self.now,
            msg,
        };
        let mut used = vec![0u64; self.insts.len()];
        for (k, q) in self.reqs.iter().enumerate() {
            let r = ReqId(k);
            let primaries = q.kv.iter().filter(|e| e.role == CopyRole::Primary).count();
            if q.is_live() && q.arrival <= self.now {
                if primaries != 1 {
                    return Err(fail(format!("{r} has {primaries} primaries")));
                }
            } else if !q.kv.is_empty() {
                return Err(fail(format!("{r} holds KV while {:?}", q.state)));
            }
            if q.tokens_emitted > q.decode_len {
                return Err(fail(format!("{r} emitted past its decode length")));
            }
            if q.token_times.windows(2).any(|w| w[0] >= w[1]) {
                return Err(fail(format!("{r} token times not increasing")));
            }
            let growing = u64::from(q.in_job && self.cfg.first_token == FirstTokenMode::DecodeStep);
            if let Some(p) = q.primary() {
                if p.tokens > q.prompt_len + q.tokens_emitted + growing {
                    return Err(fail(format!("{r} holds more KV than it produced")));
                }
                for e in &q.kv {
                    if e.tokens > p.tokens {
                        return Err(fail(format!("{r} copy on {} ahead of primary", e.inst)));
                    }
                }
            }
            for e in &q.kv {
                used[e.inst.0] += e.tokens;
            }
            if let Some(b) = q.batched_on {
                if q.primary().map(|e| e.inst) != Some(b) || q.state != RequestState::Decoding {
                    return Err(fail(format!("{r} batched on {b} without its primary")));
                }
            }
        }
        for (k, u) in used.into_iter().enumerate() {
            let inst = InstId(k);
            if u != self.mem.used(inst) {
                return Err(fail(format!("{inst} ledger says {} but copies sum to {u}", self.mem.used(inst))));
            }
            if u > self.mem.capacity() {
                return Err(fail(format!("{inst} over capacity")));
            }
        }
        Ok(())
    }
}
