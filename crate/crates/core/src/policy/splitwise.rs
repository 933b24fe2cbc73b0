//! Static disaggregation: fixed prefill and decode instances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{budgeted_prefix, decode_own, Policy};
use crate::engine::{ClusterView, Decision, InstId, ReqId, Retain, Role, SchedCtx, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitwiseConfig {
    /// Prefill instance count; `None` means a quarter of the cluster.
    pub prefill_instances: Option<usize>,
    pub prefill_token_budget: u64,
    /// Under backlog, fold one queued prompt into a decode iteration.
    pub cobatch_under_load: bool,
}

impl Default for SplitwiseConfig {
    fn default() -> Self {
        Self {
            prefill_instances: None,
            prefill_token_budget: 8192,
            cobatch_under_load: false,
        }
    }
}

impl SplitwiseConfig {
    pub fn prefill_count(&self, instances: usize) -> usize {
        self.prefill_instances.unwrap_or((instances / 4).max(1))
    }
}

#[derive(Debug, Clone)]
pub struct SplitwisePolicy {
    cfg: SplitwiseConfig,
    prefill: usize,
    instances: usize,
    queue: VecDeque<ReqId>,
}

impl SplitwisePolicy {
    pub fn new(cfg: SplitwiseConfig) -> Self {
        Self {
            cfg,
            prefill: 0,
            instances: 0,
            queue: VecDeque::new(),
        }
    }

    fn decode_instances(&self) -> impl Iterator<Item = InstId> {
        (self.prefill..self.instances).map(InstId)
    }

    /// Decode instance with the most free tokens (lowest id on ties).
    pub fn pick_decode(&self, view: &ClusterView<'_>) -> InstId {
        self.decode_instances()
            .max_by_key(|&i| (view.free_tokens(i), std::cmp::Reverse(i)))
            .expect("at least one decode instance")
    }

    fn dispatch(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        for p in 0..self.prefill {
            let p = InstId(p);
            if self.queue.is_empty() {
                break;
            }
            if !ctx.view().is_free(p) {
                continue;
            }
            let view = ctx.view();
            let target = self.pick_decode(&view);
            let mut batch = budgeted_prefix(&view, self.queue.iter(), self.cfg.prefill_token_budget);
            let headroom = view.batch(target).len() as u64 + view.ready(target).count() as u64;
            let room = view
                .free_tokens(target)
                .saturating_sub(headroom)
                .min(view.free_tokens(p));
            while !batch.is_empty()
                && batch.iter().map(|&r| view.request(r).prefill_tokens).sum::<u64>() > room
            {
                batch.pop();
            }
            if batch.is_empty() {
                break;
            }
            self.queue.drain(..batch.len());
            ctx.apply(Decision::AssignPrefill {
                instance: p,
                requests: batch,
                kv_target: Some(target),
                retain: Retain::Nothing,
            })?;
        }
        Ok(())
    }
}

impl Policy for SplitwisePolicy {
    fn name(&self) -> &'static str {
        "splitwise_static"
    }

    fn validate_cluster(&self, instances: usize) -> Result<(), SimError> {
        let p = self.cfg.prefill_count(instances);
        if instances < 2 || p == 0 || p >= instances {
            return Err(SimError::PolicyConfig(format!(
                "splitwise_static needs 1..{instances} prefill instances and at least one decode instance, got {p}"
            )));
        }
        Ok(())
    }

    fn init(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        self.instances = ctx.view().num_instances();
        self.prefill = self.cfg.prefill_count(self.instances);
        for i in 0..self.instances {
            let role = if i < self.prefill { Role::Prefill } else { Role::Decode };
            ctx.apply(Decision::SetRole {
                instance: InstId(i),
                role,
            })?;
        }
        Ok(())
    }

    fn on_arrival(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        self.queue.extend(requests.iter().copied());
        self.dispatch(ctx)
    }

    fn on_prefill_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        _instance: InstId,
        _requests: &[ReqId],
    ) -> Result<(), SimError> {
        self.dispatch(ctx)
    }

    fn on_transfer_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        moved: &[(ReqId, InstId)],
    ) -> Result<(), SimError> {
        let mut targets: Vec<InstId> = Vec::new();
        for &(r, to) in moved {
            ctx.apply(Decision::AddToBatch {
                instance: to,
                request: r,
            })?;
            if !targets.contains(&to) {
                targets.push(to);
            }
        }
        for t in targets {
            if ctx.view().is_free(t) {
                decode_own(ctx, t)?;
            }
        }
        Ok(())
    }

    fn on_step_boundary(&mut self, ctx: &mut SchedCtx<'_>, instance: InstId) -> Result<(), SimError> {
        if instance.0 < self.prefill {
            return self.dispatch(ctx);
        }
        let ready: Vec<ReqId> = ctx.view().ready(instance).collect();
        for r in ready {
            ctx.apply(Decision::AddToBatch {
                instance,
                request: r,
            })?;
        }
        let mut cobatch = Vec::new();
        if self.cfg.cobatch_under_load {
            let view = ctx.view();
            let prefill_busy = (0..self.prefill).all(|p| !view.is_free(InstId(p)));
            if let Some(&r) = self.queue.front() {
                let need = view.request(r).prefill_tokens + view.batch(instance).len() as u64 + 1;
                if prefill_busy && need <= view.free_tokens(instance) {
                    cobatch.push(r);
                    self.queue.pop_front();
                }
            }
        }
        if ctx.view().batch(instance).is_empty() && cobatch.is_empty() {
            return Ok(());
        }
        ctx.apply(Decision::StartDecode { instance, cobatch })
    }

    fn on_request_complete(&mut self, ctx: &mut SchedCtx<'_>, _requests: &[ReqId]) -> Result<(), SimError> {
        self.dispatch(ctx)
    }

    fn on_preempted(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        for &r in requests.iter().rev() {
            self.queue.push_front(r);
        }
        self.dispatch(ctx)
    }

    fn on_timer(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        self.dispatch(ctx)?;
        for d in self.prefill..self.instances {
            let d = InstId(d);
            if ctx.view().is_free(d) {
                decode_own(ctx, d)?;
            }
        }
        Ok(())
    }

    fn allows_cobatch(&self) -> bool {
        self.cfg.cobatch_under_load
    }

    fn may_prefill(&self, _view: &ClusterView<'_>, instance: InstId) -> bool {
        instance.0 < self.prefill
    }
}
