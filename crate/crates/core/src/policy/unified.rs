//! Every instance serves both phases and folds pending prompts into its next
//! decode iteration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::Policy;
use crate::engine::{ClusterView, Decision, InstId, ReqId, Retain, SchedCtx, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnifiedConfig {
    /// Prompt tokens folded into a single iteration.
    pub prefill_token_budget: u64,
}

impl Default for UnifiedConfig {
    fn default() -> Self {
        Self {
            prefill_token_budget: 8192,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnifiedPolicy {
    cfg: UnifiedConfig,
    queues: Vec<VecDeque<ReqId>>,
}

impl UnifiedPolicy {
    pub fn new(cfg: UnifiedConfig) -> Self {
        Self {
            cfg,
            queues: Vec::new(),
        }
    }

    fn pending_tokens(&self, view: &ClusterView<'_>, inst: InstId) -> u64 {
        self.queues[inst.0]
            .iter()
            .map(|&r| view.request(r).prefill_tokens)
            .sum()
    }

    /// Instance with the most free tokens net of prompts already routed to it.
    fn route(&self, view: &ClusterView<'_>) -> InstId {
        view.instances()
            .max_by_key(|&i| {
                let free = view.free_tokens(i) as i64 - self.pending_tokens(view, i) as i64;
                (free, std::cmp::Reverse(i))
            })
            .expect("nonempty cluster")
    }

    fn kick(&mut self, ctx: &mut SchedCtx<'_>, inst: InstId) -> Result<(), SimError> {
        if !ctx.view().is_free(inst) {
            return Ok(());
        }
        let ready: Vec<ReqId> = ctx.view().ready(inst).collect();
        for r in ready {
            ctx.apply(Decision::AddToBatch {
                instance: inst,
                request: r,
            })?;
        }
        let view = ctx.view();
        let mut room = view.free_tokens(inst).saturating_sub(view.batch(inst).len() as u64);
        let mut budget = self.cfg.prefill_token_budget;
        let mut cobatch = Vec::new();
        while let Some(&r) = self.queues[inst.0].front() {
            let t = view.request(r).prefill_tokens;
            let over_budget = !cobatch.is_empty() && t > budget;
            if over_budget || t + 1 > room {
                break;
            }
            room -= t + 1;
            budget = budget.saturating_sub(t);
            cobatch.push(r);
            self.queues[inst.0].pop_front();
        }
        if view.batch(inst).is_empty() {
            if cobatch.is_empty() {
                return Ok(());
            }
            return ctx.apply(Decision::AssignPrefill {
                instance: inst,
                requests: cobatch,
                kv_target: None,
                retain: Retain::Primary,
            });
        }
        ctx.apply(Decision::StartDecode {
            instance: inst,
            cobatch,
        })
    }

    fn kick_all(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        for i in 0..self.queues.len() {
            self.kick(ctx, InstId(i))?;
        }
        Ok(())
    }
}

impl Policy for UnifiedPolicy {
    fn name(&self) -> &'static str {
        "unified"
    }

    fn init(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        self.queues = vec![VecDeque::new(); ctx.view().num_instances()];
        Ok(())
    }

    fn on_arrival(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        for &r in requests {
            let i = self.route(&ctx.view());
            self.queues[i.0].push_back(r);
        }
        self.kick_all(ctx)
    }

    fn on_prefill_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        instance: InstId,
        _requests: &[ReqId],
    ) -> Result<(), SimError> {
        self.kick(ctx, instance)
    }

    fn on_step_boundary(&mut self, ctx: &mut SchedCtx<'_>, instance: InstId) -> Result<(), SimError> {
        self.kick(ctx, instance)
    }

    fn on_preempted(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        for &r in requests.iter().rev() {
            let i = self.route(&ctx.view());
            self.queues[i.0].push_front(r);
        }
        Ok(())
    }

    fn on_timer(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        self.kick_all(ctx)
    }

    fn allows_cobatch(&self) -> bool {
        true
    }

    fn may_prefill(&self, _view: &ClusterView<'_>, instance: InstId) -> bool {
        !self.queues[instance.0].is_empty()
    }
}
