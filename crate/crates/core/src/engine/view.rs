use super::state::{EngineState, KvEntry};
use super::types::{InstId, JobKind, ReqId, RequestState, Role};
use crate::perfmodel::CostModel;

/// Read-only snapshot of the cluster handed to policies. Decode lengths are
/// deliberately unreachable from here.
#[derive(Clone, Copy)]
pub struct ClusterView<'a> {
    st: &'a EngineState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobInfo {
    pub kind: JobKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestView<'a> {
    pub id: ReqId,
    pub arrival: f64,
    pub prompt_len: u64,
    pub prefill_tokens: u64,
    pub tokens_emitted: u64,
    pub state: RequestState,
    pub primary: Option<InstId>,
    /// Tokens held by the primary copy.
    pub kv_tokens: u64,
    pub batched_on: Option<InstId>,
    pub in_job: bool,
    pub in_transit: bool,
    pub copies: &'a [KvEntry],
}

impl<'a> ClusterView<'a> {
    pub(crate) fn new(st: &'a EngineState) -> Self {
        Self { st }
    }

    pub fn now(&self) -> f64 {
        self.st.now
    }

    pub fn num_instances(&self) -> usize {
        self.st.insts.len()
    }

    pub fn instances(&self) -> impl Iterator<Item = InstId> {
        (0..self.st.insts.len()).map(InstId)
    }

    pub fn cost(&self) -> &'a CostModel<f64> {
        &self.st.cost
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        self.st.kvb
    }

    pub fn capacity(&self) -> u64 {
        self.st.mem.capacity()
    }

    pub fn free_tokens(&self, inst: InstId) -> u64 {
        self.st.mem.free(inst)
    }

    pub fn used_tokens(&self, inst: InstId) -> u64 {
        self.st.mem.used(inst)
    }

    pub fn role(&self, inst: InstId) -> Role {
        self.st.insts[inst.0].role
    }

    pub fn job(&self, inst: InstId) -> Option<JobInfo> {
        self.st.insts[inst.0].job.as_ref().map(|j| JobInfo {
            kind: j.kind,
            start: j.start,
            end: j.end,
        })
    }

    pub fn is_free(&self, inst: InstId) -> bool {
        self.st.insts[inst.0].job.is_none()
    }

    /// Duration of the instance's most recent decode step.
    pub fn last_step(&self, inst: InstId) -> f64 {
        self.st.insts[inst.0].last_step
    }

    /// Requests in the instance's active batch, in join order.
    pub fn batch(&self, inst: InstId) -> &'a [ReqId] {
        &self.st.insts[inst.0].batch
    }

    /// Decoding requests whose primary sits here but are not batched yet.
    pub fn ready(&self, inst: InstId) -> impl Iterator<Item = ReqId> + 'a {
        self.st.insts[inst.0].ready.iter().copied()
    }

    /// Requests with any KV copy on the instance.
    pub fn hosted(&self, inst: InstId) -> impl Iterator<Item = ReqId> + 'a {
        self.st.insts[inst.0].hosted.iter().copied()
    }

    /// Σ primary KV tokens over the active batch.
    pub fn batch_tokens(&self, inst: InstId) -> u64 {
        self.batch(inst).iter().map(|&r| self.kv_tokens(r)).sum()
    }

    pub fn request(&self, r: ReqId) -> RequestView<'a> {
        let q = &self.st.reqs[r.0];
        RequestView {
            id: r,
            arrival: q.arrival,
            prompt_len: q.prompt_len,
            prefill_tokens: q.prefill_tokens,
            tokens_emitted: q.tokens_emitted,
            state: q.state,
            primary: q.primary().map(|e| e.inst),
            kv_tokens: q.primary().map_or(0, |e| e.tokens),
            batched_on: q.batched_on,
            in_job: q.in_job,
            in_transit: q.handover.is_some(),
            copies: &q.kv,
        }
    }

    pub fn kv_tokens(&self, r: ReqId) -> u64 {
        self.st.reqs[r.0].primary().map_or(0, |e| e.tokens)
    }

    pub fn primary(&self, r: ReqId) -> Option<InstId> {
        self.st.primary_inst(r)
    }

    pub fn copy_on(&self, r: ReqId, inst: InstId) -> Option<&'a KvEntry> {
        self.st.reqs[r.0].entry(inst)
    }

    /// A redundant copy here can take over as primary right now.
    pub fn usable_copy(&self, r: ReqId, inst: InstId) -> bool {
        self.st.usable_copy(r, inst)
    }

    /// Decoding, idle between steps, and not waiting on a transfer.
    pub fn movable(&self, r: ReqId) -> bool {
        let q = &self.st.reqs[r.0];
        q.state == RequestState::Decoding && !q.in_job && q.handover.is_none()
    }

    pub fn queued_count(&self) -> usize {
        self.st.queued
    }

    /// Arrived requests that have not completed.
    pub fn live_count(&self) -> usize {
        self.st.live
    }

    pub fn link_backlog(&self, from: InstId, to: InstId) -> f64 {
        self.st.links.backlog(from, to, self.st.now)
    }

    pub fn link_rate(&self) -> f64 {
        self.st.links.rate()
    }

    /// Lag tolerated before a copy counts as resident.
    pub fn pipeline_slack(&self) -> f64 {
        self.st.slack
    }
}
