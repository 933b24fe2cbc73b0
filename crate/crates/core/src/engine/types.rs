use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a request within the simulated trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReqId(pub usize);

/// Index of an instance within the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstId(pub usize);

impl fmt::Display for ReqId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for InstId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyRole {
    Primary,
    Redundant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Idle,
    Prefill,
    Decode,
}

/// What the prefill instance keeps once the KV cache reaches the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retain {
    /// Prefill instance keeps the primary; the target holds a redundant copy.
    Primary,
    /// The target becomes primary; the prefill instance keeps a redundant copy.
    Redundant,
    /// The target becomes primary and the local copy is freed.
    Nothing,
}

/// A scheduling action issued by a policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    AssignPrefill {
        instance: InstId,
        requests: Vec<ReqId>,
        kv_target: Option<InstId>,
        retain: Retain,
    },
    /// Runs one decode iteration over the instance's active batch, optionally
    /// co-batching queued prompts (only for policies that allow it).
    StartDecode { instance: InstId, cobatch: Vec<ReqId> },
    SetRole { instance: InstId, role: Role },
    AddToBatch { instance: InstId, request: ReqId },
    /// Swaps primary and redundant labels; never copies KV.
    RebalanceMove { request: ReqId, from: InstId, to: InstId },
    CreateRedundant { request: ReqId, on: InstId },
    EvictRedundant { request: ReqId, on: InstId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Prefill,
    Decode,
    /// Decode iteration that also runs queued prefills.
    CoBatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    PrefillTransfer,
    Mirror,
    Leveling,
}

/// What an instance was doing over an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Prefill,
    Decode,
    CoBatched,
    /// Free although work it may start exists.
    IdleRunnable,
    /// Free while waiting for its pair partner's step boundary.
    SyncWait,
    /// Free with nothing to do.
    Idle,
}

impl Activity {
    pub fn is_busy(self) -> bool {
        matches!(self, Activity::Prefill | Activity::Decode | Activity::CoBatched)
    }
}

impl From<JobKind> for Activity {
    fn from(k: JobKind) -> Self {
        match k {
            JobKind::Prefill => Activity::Prefill,
            JobKind::Decode => Activity::Decode,
            JobKind::CoBatched => Activity::CoBatched,
        }
    }
}
