//! Memory and link bookkeeping.

use serde::{Deserialize, Serialize};

use super::types::{InstId, TrafficKind};

/// Allocation that would exceed an instance's KV capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refusal {
    pub instance: InstId,
    pub requested: u64,
    pub free: u64,
}

/// Per-instance KV token accounting (primary and redundant copies alike).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryLedger {
    capacity: u64,
    used: Vec<u64>,
    peak: Vec<u64>,
}

impl MemoryLedger {
    pub fn new(instances: usize, capacity: u64) -> Self {
        Self {
            capacity,
            used: vec![0; instances],
            peak: vec![0; instances],
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self, inst: InstId) -> u64 {
        self.used[inst.0]
    }

    pub fn free(&self, inst: InstId) -> u64 {
        self.capacity - self.used[inst.0]
    }

    pub fn peak(&self, inst: InstId) -> u64 {
        self.peak[inst.0]
    }

    pub fn fits(&self, inst: InstId, tokens: u64) -> bool {
        tokens <= self.free(inst)
    }

    pub fn allocate(&mut self, inst: InstId, tokens: u64) -> Result<(), Refusal> {
        let free = self.free(inst);
        if tokens > free {
            return Err(Refusal {
                instance: inst,
                requested: tokens,
                free,
            });
        }
        let used = &mut self.used[inst.0];
        *used += tokens;
        self.peak[inst.0] = self.peak[inst.0].max(*used);
        Ok(())
    }

    pub fn release(&mut self, inst: InstId, tokens: u64) {
        let used = &mut self.used[inst.0];
        assert!(*used >= tokens, "releasing {tokens} tokens from {inst} holding {used}");
        *used -= tokens;
    }
}

/// One directed link between two instances.
#[derive(Debug, Clone, Default)]
pub(crate) struct LinkState {
    pub free_at: f64,
    pub bytes: [u64; 3],
    pub transfers: u64,
    bucket: i64,
    bucket_bytes: u64,
    pub peak_mirror_bps: f64,
}

/// Width of the window used for peak mirror bandwidth.
pub const MIRROR_WINDOW_S: f64 = 0.1;

pub(crate) fn traffic_index(kind: TrafficKind) -> usize {
    match kind {
        TrafficKind::PrefillTransfer => 0,
        TrafficKind::Mirror => 1,
        TrafficKind::Leveling => 2,
    }
}

/// FIFO directed links with per-category byte counters.
#[derive(Debug, Clone)]
pub(crate) struct LinkLedger {
    n: usize,
    links: Vec<LinkState>,
    rate: f64,
}

impl LinkLedger {
    pub fn new(n: usize, rate: f64) -> Self {
        Self {
            n,
            links: vec![LinkState::default(); n * n],
            rate,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn link(&self, from: InstId, to: InstId) -> &LinkState {
        &self.links[from.0 * self.n + to.0]
    }

    pub fn backlog(&self, from: InstId, to: InstId, now: f64) -> f64 {
        (self.link(from, to).free_at - now).max(0.0)
    }

    /// Enqueues a transfer whose bytes are produced layer by layer during a
    /// job `[start, start + job_len]` over `layers` layers; returns its finish
    /// time. A zero-length job degenerates to a plain FIFO transfer.
    pub fn enqueue_pipelined(
        &mut self,
        from: InstId,
        to: InstId,
        bytes: u64,
        kind: TrafficKind,
        start: f64,
        job_len: f64,
        layers: u64,
    ) -> f64 {
        let d = bytes as f64 / self.rate;
        let n = layers.max(1) as f64;
        let link = &mut self.links[from.0 * self.n + to.0];
        let queued = link.free_at.max(start) + d;
        let finish = queued
            .max(start + job_len + d / n)
            .max(start + job_len / n + d);
        link.free_at = finish;
        link.bytes[traffic_index(kind)] += bytes;
        link.transfers += 1;
        if kind == TrafficKind::Mirror {
            let bucket = (start / MIRROR_WINDOW_S).floor() as i64;
            if bucket != link.bucket {
                link.bucket = bucket;
                link.bucket_bytes = 0;
            }
            link.bucket_bytes += bytes;
            link.peak_mirror_bps = link
                .peak_mirror_bps
                .max(link.bucket_bytes as f64 / MIRROR_WINDOW_S);
        }
        finish
    }

    pub fn iter(&self) -> impl Iterator<Item = (InstId, InstId, &LinkState)> {
        self.links
            .iter()
            .enumerate()
            .map(move |(k, l)| (InstId(k / self.n), InstId(k % self.n), l))
    }
}

/// Cumulative bytes by traffic category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficTotals {
    pub prefill_transfer: u64,
    pub mirror: u64,
    pub leveling: u64,
}

impl TrafficTotals {
    pub fn total(&self) -> u64 {
        self.prefill_transfer + self.mirror + self.leveling
    }
}
