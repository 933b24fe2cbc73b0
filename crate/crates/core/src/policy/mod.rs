//! Scheduling policies behind one callback interface.

mod accellm;
mod rebalance;
mod splitwise;
mod unified;

pub use accellm::{AccellmConfig, AccellmPolicy};
pub use rebalance::{rebalance_pair, Candidate, PairMove, Side};
pub use splitwise::{SplitwiseConfig, SplitwisePolicy};
pub use unified::{UnifiedConfig, UnifiedPolicy};

use serde::{Deserialize, Serialize};

use crate::engine::{ClusterView, Decision, InstId, ReqId, SchedCtx, SimError};

/// Decision-making half of a simulation. Every callback may inspect the
/// cluster through `ctx.view()` and act through `ctx.apply`.
pub trait Policy {
    fn name(&self) -> &'static str;

    fn validate_cluster(&self, _instances: usize) -> Result<(), SimError> {
        Ok(())
    }

    fn init(&mut self, _ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        Ok(())
    }

    fn on_arrival(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError>;

    fn on_prefill_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        instance: InstId,
        requests: &[ReqId],
    ) -> Result<(), SimError>;

    fn on_step_boundary(&mut self, ctx: &mut SchedCtx<'_>, instance: InstId) -> Result<(), SimError>;

    fn on_request_complete(
        &mut self,
        _ctx: &mut SchedCtx<'_>,
        _requests: &[ReqId],
    ) -> Result<(), SimError> {
        Ok(())
    }

    /// Primaries that changed hands when a prefill transfer landed.
    fn on_transfer_complete(
        &mut self,
        _ctx: &mut SchedCtx<'_>,
        _moved: &[(ReqId, InstId)],
    ) -> Result<(), SimError> {
        Ok(())
    }

    /// Requests the engine evicted for recomputation; they are queued again.
    fn on_preempted(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError>;

    fn on_timer(&mut self, _ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        Ok(())
    }

    fn timer_period(&self) -> f64 {
        1.0
    }

    fn allows_cobatch(&self) -> bool {
        false
    }

    /// Whether `instance` could start a prefill if it were given queued work.
    fn may_prefill(&self, _view: &ClusterView<'_>, _instance: InstId) -> bool {
        true
    }

    /// Whether `instance` is deliberately waiting on another instance.
    fn holding(&self, _view: &ClusterView<'_>, _instance: InstId) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Accellm,
    SplitwiseStatic,
    Unified,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Accellm => "accellm",
            PolicyKind::SplitwiseStatic => "splitwise_static",
            PolicyKind::Unified => "unified",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accellm" => Ok(PolicyKind::Accellm),
            "splitwise_static" | "splitwise" => Ok(PolicyKind::SplitwiseStatic),
            "unified" | "vllm" => Ok(PolicyKind::Unified),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

/// Parameters for every policy; only the selected one is consulted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub accellm: AccellmConfig,
    pub splitwise_static: SplitwiseConfig,
    pub unified: UnifiedConfig,
}

pub fn build_policy(kind: PolicyKind, params: &PolicyParams) -> Box<dyn Policy + Send> {
    match kind {
        PolicyKind::Accellm => Box::new(AccellmPolicy::new(params.accellm.clone())),
        PolicyKind::SplitwiseStatic => Box::new(SplitwisePolicy::new(params.splitwise_static.clone())),
        PolicyKind::Unified => Box::new(UnifiedPolicy::new(params.unified.clone())),
    }
}

/// Queue prefix whose prompts fit `budget` tokens; always at least one.
pub(crate) fn budgeted_prefix<'a>(
    view: &ClusterView<'_>,
    queue: impl Iterator<Item = &'a ReqId>,
    budget: u64,
) -> Vec<ReqId> {
    let mut out = Vec::new();
    let mut used = 0;
    for &r in queue {
        let t = view.request(r).prefill_tokens;
        if !out.is_empty() && used + t > budget {
            break;
        }
        used += t;
        out.push(r);
    }
    out
}

/// Joins every ready request and starts a step if there is anything to run.
pub(crate) fn decode_own(ctx: &mut SchedCtx<'_>, inst: InstId) -> Result<bool, SimError> {
    let ready: Vec<ReqId> = ctx.view().ready(inst).collect();
    for r in ready {
        ctx.apply(Decision::AddToBatch {
            instance: inst,
            request: r,
        })?;
    }
    if ctx.view().batch(inst).is_empty() {
        return Ok(false);
    }
    ctx.apply(Decision::StartDecode {
        instance: inst,
        cobatch: Vec::new(),
    })?;
    Ok(true)
}
