use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::types::{InstId, ReqId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Payload {
    /// All requests arriving at one timestamp; the range indexes the trace.
    Arrival { first: usize, last: usize },
    TransferDone(u64),
    PrefillDone(InstId),
    DecodeStepDone(InstId),
    PolicyTimer,
}

impl Payload {
    fn priority(&self) -> u8 {
        match self {
            Payload::Arrival { .. } => 0,
            Payload::TransferDone(_) => 1,
            Payload::PrefillDone(_) => 2,
            Payload::DecodeStepDone(_) => 3,
            Payload::PolicyTimer => 4,
        }
    }

    fn id(&self) -> u64 {
        match *self {
            Payload::Arrival { first, .. } => first as u64,
            Payload::TransferDone(t) => t,
            Payload::PrefillDone(i) | Payload::DecodeStepDone(i) => i.0 as u64,
            Payload::PolicyTimer => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Event {
    pub time: f64,
    pub seq: u64,
    pub payload: Payload,
}

impl Event {
    fn key(&self) -> (u8, u64, u64) {
        (self.payload.priority(), self.payload.id(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.key().cmp(&other.key()))
    }
}

/// Min-ordered event queue with deterministic tie-breaking.
#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            seq: self.seq,
            payload,
        }));
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.0.time)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|e| e.0)
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// True when something other than the periodic timer is pending.
    pub fn has_work(&self) -> bool {
        self.heap
            .iter()
            .any(|e| !matches!(e.0.payload, Payload::PolicyTimer))
    }
}

pub(crate) fn arrival_requests(first: usize, last: usize) -> impl Iterator<Item = ReqId> {
    (first..=last).map(ReqId)
}
