//! Paired dynamic instances with redundant KV caches.
//!
//! Instances `2i` and `2i+1` form a pair. Either member may prefill while the
//! other decodes the pair's whole load through redundant copies; between
//! prefills the pair rebalances by relabelling copies, never by copying.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::rebalance::{rebalance_pair, Candidate, Side};
use super::{budgeted_prefix, decode_own, Policy};
use crate::engine::{
    ClusterView, CopyRole, Decision, InstId, JobKind, ReqId, RequestState, Retain, SchedCtx, SimError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccellmConfig {
    /// A free member waits for its partner when the partner's step has at
    /// most this fraction of its length left.
    pub sync_fraction: f64,
    pub prefill_token_budget: u64,
    pub degraded_mode: bool,
    /// Share of decoding requests with a fresh copy below which a group
    /// counts as unable to sustain redundancy.
    pub degraded_enter_fraction: f64,
    /// Consecutive timer ticks a condition must hold before switching mode.
    pub degraded_ticks: u32,
    /// Degraded mode ends once twice the live KV fits in this share of the
    /// group's capacity.
    pub degraded_exit_fill: f64,
    /// Share of each decode instance's tokens the dual instance mirrors.
    pub dual_keep_fraction: f64,
    pub leveling: bool,
    /// Share of each link's capacity per second for background copies.
    pub leveling_link_fraction: f64,
    /// Relative spread of per-pair load that triggers inter-pair moves.
    pub leveling_imbalance: f64,
    /// Free share of capacity background copies must leave untouched.
    pub copy_headroom_fraction: f64,
}

impl Default for AccellmConfig {
    fn default() -> Self {
        Self {
            sync_fraction: 0.3,
            prefill_token_budget: 8192,
            degraded_mode: true,
            degraded_enter_fraction: 0.5,
            degraded_ticks: 3,
            degraded_exit_fill: 0.6,
            dual_keep_fraction: 1.0 / 3.0,
            leveling: true,
            leveling_link_fraction: 0.1,
            leveling_imbalance: 0.1,
            copy_headroom_fraction: 0.1,
        }
    }
}

impl AccellmConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("accellm.{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("sync_fraction", self.sync_fraction)?;
        unit("degraded_enter_fraction", self.degraded_enter_fraction)?;
        unit("degraded_exit_fill", self.degraded_exit_fill)?;
        unit("dual_keep_fraction", self.dual_keep_fraction)?;
        unit("leveling_link_fraction", self.leveling_link_fraction)?;
        unit("copy_headroom_fraction", self.copy_headroom_fraction)?;
        if self.leveling_imbalance < 0.0 {
            return Err("accellm.leveling_imbalance must be nonnegative".into());
        }
        if self.prefill_token_budget == 0 {
            return Err("accellm.prefill_token_budget must be positive".into());
        }
        if self.degraded_ticks == 0 {
            return Err("accellm.degraded_ticks must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Normal,
    Degraded { dual: InstId },
}

#[derive(Debug, Clone)]
struct Group {
    pairs: [usize; 2],
    mode: Mode,
    low_ticks: u32,
    calm_ticks: u32,
}

impl Group {
    fn members(&self) -> [InstId; 4] {
        let [p, q] = self.pairs;
        [
            InstId(2 * p),
            InstId(2 * p + 1),
            InstId(2 * q),
            InstId(2 * q + 1),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AccellmPolicy {
    cfg: AccellmConfig,
    queues: Vec<VecDeque<ReqId>>,
    groups: Vec<Group>,
    holding: Vec<bool>,
    /// Cross-pair moves waiting for their destination copy.
    migrations: BTreeMap<ReqId, InstId>,
    degraded_entries: u64,
}

fn partner(x: InstId) -> InstId {
    InstId(x.0 ^ 1)
}

fn pair_of(x: InstId) -> usize {
    x.0 / 2
}

fn members(p: usize) -> [InstId; 2] {
    [InstId(2 * p), InstId(2 * p + 1)]
}

/// Primary tokens of everything decoding on `x` (batched or waiting).
fn load(view: &ClusterView<'_>, x: InstId) -> u64 {
    view.batch_tokens(x) + view.ready(x).map(|r| view.kv_tokens(r)).sum::<u64>()
}

fn has_work(view: &ClusterView<'_>, x: InstId) -> bool {
    !view.batch(x).is_empty() || view.ready(x).next().is_some()
}

/// Requests whose primary is on `x` and that are between steps.
fn resident(view: &ClusterView<'_>, x: InstId) -> Vec<ReqId> {
    view.batch(x)
        .iter()
        .copied()
        .chain(view.ready(x))
        .filter(|&r| view.movable(r))
        .collect()
}

/// Residents of `x` that could not follow a handover to `y` right now.
fn stranded(view: &ClusterView<'_>, x: InstId, y: InstId) -> usize {
    resident(view, x)
        .into_iter()
        .filter(|&r| !view.usable_copy(r, y))
        .count()
}

/// True when a handover onto `x` is in flight.
fn expecting(view: &ClusterView<'_>, x: InstId) -> bool {
    view.hosted(x).any(|r| {
        view.request(r).in_transit && view.copy_on(r, x).is_some_and(|e| e.role == CopyRole::Redundant)
    })
}

impl AccellmPolicy {
    pub fn new(cfg: AccellmConfig) -> Self {
        Self {
            cfg,
            queues: Vec::new(),
            groups: Vec::new(),
            holding: Vec::new(),
            migrations: BTreeMap::new(),
            degraded_entries: 0,
        }
    }

    /// Times a group has switched into degraded mode.
    pub fn degraded_entries(&self) -> u64 {
        self.degraded_entries
    }

    fn group_of(&self, pair: usize) -> Option<usize> {
        let g = pair / 2;
        (g < self.groups.len()).then_some(g)
    }

    fn dual_of(&self, pair: usize) -> Option<(usize, InstId)> {
        let g = self.group_of(pair)?;
        match self.groups[g].mode {
            Mode::Degraded { dual } => Some((g, dual)),
            Mode::Normal => None,
        }
    }

    /// Queue a pair's arrivals land in; degraded groups share one.
    fn queue_index(&self, pair: usize) -> usize {
        match self.dual_of(pair) {
            Some((g, _)) => self.groups[g].pairs[0],
            None => pair,
        }
    }

    fn queued_tokens(&self, view: &ClusterView<'_>, q: usize) -> u64 {
        self.queues[q]
            .iter()
            .map(|&r| view.request(r).prefill_tokens)
            .sum()
    }

    /// Pair with the most free tokens once queued prompts (and their
    /// redundant copies) are accounted for; ties go to the lowest pair.
    fn route(&self, view: &ClusterView<'_>) -> usize {
        (0..self.queues.len())
            .max_by_key(|&p| {
                let [a, b] = members(p);
                let free = (view.free_tokens(a) + view.free_tokens(b)) as i64
                    - 2 * self.queued_tokens(view, p) as i64;
                (free, std::cmp::Reverse(p))
            })
            .expect("at least one pair")
    }

    fn kick(&mut self, ctx: &mut SchedCtx<'_>, x: InstId) -> Result<(), SimError> {
        if ctx.view().is_free(x) && !self.holding[x.0] {
            self.on_free(ctx, x)?;
        }
        Ok(())
    }

    fn on_free(&mut self, ctx: &mut SchedCtx<'_>, x: InstId) -> Result<(), SimError> {
        let p = pair_of(x);
        if let Some((g, dual)) = self.dual_of(p) {
            return self.degraded_free(ctx, g, dual, x);
        }
        let y = partner(x);
        let view = ctx.view();
        let Some(job) = view.job(y) else {
            return self.pair_boundary(ctx, p);
        };
        self.holding[x.0] = false;
        self.run_migrations(ctx, x)?;
        let queued = !self.queues[p].is_empty();
        match job.kind {
            JobKind::Prefill => {
                if has_work(&ctx.view(), x) {
                    decode_own(ctx, x)?;
                } else if queued && !expecting(&ctx.view(), x) {
                    // Neither member has decode work: both may prefill.
                    self.try_prefill(ctx, p, x, Some(y), Retain::Primary)?;
                }
            }
            JobKind::Decode | JobKind::CoBatched => {
                let now = ctx.now();
                if job.end - now <= self.cfg.sync_fraction * (job.end - job.start) {
                    self.holding[x.0] = true;
                    return Ok(());
                }
                // A resident without a fresh partner copy would stall for the
                // whole prefill; leave the prefill to the partner if it can.
                let view = ctx.view();
                let defer = stranded(&view, x, y) > 0 && stranded(&view, y, x) == 0;
                if queued && !defer {
                    self.migrate_all(ctx, x, y)?;
                    if self.try_prefill(ctx, p, x, Some(y), Retain::Redundant)? {
                        return Ok(());
                    }
                }
                if !decode_own(ctx, x)? {
                    // Nothing local: wait for the partner's boundary to share its load.
                    self.holding[x.0] = true;
                }
            }
        }
        Ok(())
    }

    fn pair_boundary(&mut self, ctx: &mut SchedCtx<'_>, p: usize) -> Result<(), SimError> {
        let [a, b] = members(p);
        self.holding[a.0] = false;
        self.holding[b.0] = false;
        self.run_migrations(ctx, a)?;
        self.run_migrations(ctx, b)?;
        if !self.queues[p].is_empty() {
            let view = ctx.view();
            let key = |x: InstId, y: InstId| (stranded(&view, x, y), load(&view, x));
            let (pre, dec) = if key(b, a) < key(a, b) { (b, a) } else { (a, b) };
            self.migrate_all(ctx, pre, dec)?;
            if self.try_prefill(ctx, p, pre, Some(dec), Retain::Redundant)? {
                decode_own(ctx, dec)?;
                return Ok(());
            }
        }
        self.rebalance(ctx, a, b)?;
        decode_own(ctx, a)?;
        decode_own(ctx, b)?;
        Ok(())
    }

    /// Hands every request with a usable copy on `to` over to `to`.
    fn migrate_all(&mut self, ctx: &mut SchedCtx<'_>, from: InstId, to: InstId) -> Result<(), SimError> {
        let view = ctx.view();
        let movable: Vec<ReqId> = resident(&view, from)
            .into_iter()
            .filter(|&r| view.usable_copy(r, to))
            .collect();
        for r in movable {
            ctx.apply(Decision::RebalanceMove {
                request: r,
                from,
                to,
            })?;
        }
        Ok(())
    }

    fn rebalance(&mut self, ctx: &mut SchedCtx<'_>, a: InstId, b: InstId) -> Result<(), SimError> {
        let view = ctx.view();
        let side = |x: InstId, other: InstId| -> Vec<Candidate> {
            view.batch(x)
                .iter()
                .copied()
                .chain(view.ready(x))
                .map(|r| Candidate {
                    id: r,
                    tokens: view.kv_tokens(r),
                    movable: view.movable(r) && view.usable_copy(r, other),
                })
                .collect()
        };
        let moves = rebalance_pair(&side(a, b), &side(b, a));
        for m in moves {
            let (from, to) = match m.from {
                Side::A => (a, b),
                Side::B => (b, a),
            };
            ctx.apply(Decision::RebalanceMove {
                request: m.request,
                from,
                to,
            })?;
        }
        Ok(())
    }

    /// Evicts redundant copies on `x`, largest first, until `need` tokens
    /// are free; true when that succeeded.
    fn make_room(&mut self, ctx: &mut SchedCtx<'_>, x: InstId, need: u64) -> Result<bool, SimError> {
        if ctx.view().free_tokens(x) >= need {
            return Ok(true);
        }
        let view = ctx.view();
        let mut copies: Vec<(u64, ReqId)> = view
            .hosted(x)
            .filter_map(|r| {
                let e = view.copy_on(r, x)?;
                (e.role == CopyRole::Redundant).then_some((e.tokens, r))
            })
            .collect();
        let evictable: u64 = copies.iter().map(|c| c.0).sum();
        if view.free_tokens(x) + evictable < need {
            return Ok(false);
        }
        copies.sort_by(|p, q| q.0.cmp(&p.0).then(p.1.cmp(&q.1)));
        for (_, r) in copies {
            if ctx.view().free_tokens(x) >= need {
                break;
            }
            ctx.apply(Decision::EvictRedundant { request: r, on: x })?;
            self.migrations.remove(&r);
        }
        Ok(true)
    }

    /// Growth the next few steps of `x` need.
    fn headroom(view: &ClusterView<'_>, x: InstId) -> u64 {
        view.batch(x).len() as u64 + view.ready(x).count() as u64 + 1
    }

    fn try_prefill(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        q: usize,
        x: InstId,
        target: Option<InstId>,
        retain: Retain,
    ) -> Result<bool, SimError> {
        let view = ctx.view();
        let mut batch = budgeted_prefix(&view, self.queues[q].iter(), self.cfg.prefill_token_budget);
        let tokens = |b: &[ReqId], v: &ClusterView<'_>| b.iter().map(|&r| v.request(r).prefill_tokens).sum::<u64>();
        let (mut target, mut retain) = (target, retain);
        while !batch.is_empty() {
            let need = tokens(&batch, &ctx.view());
            let hx = Self::headroom(&ctx.view(), x);
            if !self.make_room(ctx, x, need + hx)? {
                batch.pop();
                continue;
            }
            if let Some(t) = target {
                let ht = Self::headroom(&ctx.view(), t);
                if !self.make_room(ctx, t, need + ht)? {
                    // No room for the second copy: keep the cache local.
                    target = None;
                    retain = Retain::Primary;
                }
            }
            break;
        }
        if batch.is_empty() {
            return Ok(false);
        }
        self.queues[q].drain(..batch.len());
        ctx.apply(Decision::AssignPrefill {
            instance: x,
            requests: batch,
            kv_target: target,
            retain,
        })?;
        Ok(true)
    }

    /// Completes pending cross-pair moves of requests decoding on `x`.
    fn run_migrations(&mut self, ctx: &mut SchedCtx<'_>, x: InstId) -> Result<(), SimError> {
        let pending: Vec<(ReqId, InstId)> = self
            .migrations
            .iter()
            .filter(|(&r, _)| ctx.view().primary(r) == Some(x))
            .map(|(&r, &d)| (r, d))
            .collect();
        let mut arrived = Vec::new();
        for (r, dest) in pending {
            let view = ctx.view();
            if !view.movable(r) {
                continue;
            }
            if view.copy_on(r, dest).is_none() {
                self.migrations.remove(&r);
                continue;
            }
            if !view.usable_copy(r, dest) || view.job(dest).is_some_and(|j| j.kind == JobKind::Prefill) {
                continue;
            }
            self.migrations.remove(&r);
            ctx.apply(Decision::RebalanceMove { request: r, from: x, to: dest })?;
            let stale: Vec<InstId> = ctx
                .view()
                .request(r)
                .copies
                .iter()
                .filter(|e| e.role == CopyRole::Redundant)
                .map(|e| e.inst)
                .collect();
            for s in stale {
                ctx.apply(Decision::EvictRedundant { request: r, on: s })?;
            }
            let mate = partner(dest);
            let view = ctx.view();
            if view.free_tokens(mate) >= view.kv_tokens(r) + self.copy_reserve(&view) {
                ctx.apply(Decision::CreateRedundant { request: r, on: mate })?;
            }
            if !arrived.contains(&dest) {
                arrived.push(dest);
            }
        }
        // An idle destination would otherwise wait for the next timer tick.
        for d in arrived {
            self.kick(ctx, d)?;
        }
        Ok(())
    }

    fn copy_reserve(&self, view: &ClusterView<'_>) -> u64 {
        (self.cfg.copy_headroom_fraction * view.capacity() as f64) as u64
    }

    // ---- degraded mode -------------------------------------------------

    fn degraded_free(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        g: usize,
        dual: InstId,
        x: InstId,
    ) -> Result<(), SimError> {
        self.holding[x.0] = false;
        let q = self.groups[g].pairs[0];
        if x != dual {
            let view = ctx.view();
            let dual_idle = self.queues[q].is_empty()
                && view.job(dual).is_none_or(|j| j.kind != JobKind::Prefill);
            if dual_idle {
                // Hand the dual a share of this instance's load.
                let members = self.groups[g].members();
                let total: u64 = members.iter().map(|&m| load(&view, m)).sum();
                let fair = total / members.len() as u64;
                let mut dual_load = load(&view, dual);
                let mut cands: Vec<(u64, ReqId)> = resident(&view, x)
                    .into_iter()
                    .filter(|&r| view.usable_copy(r, dual))
                    .map(|r| (view.kv_tokens(r), r))
                    .collect();
                cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut moves = Vec::new();
                let mut x_load = load(&view, x);
                for (t, r) in cands {
                    if dual_load + t > fair || x_load < fair + t {
                        continue;
                    }
                    dual_load += t;
                    x_load -= t;
                    moves.push(r);
                }
                for r in moves {
                    ctx.apply(Decision::RebalanceMove { request: r, from: x, to: dual })?;
                }
                if ctx.view().is_free(dual) {
                    decode_own(ctx, dual)?;
                }
            }
            decode_own(ctx, x)?;
            return Ok(());
        }
        if !self.queues[q].is_empty() {
            let members = self.groups[g].members();
            let view = ctx.view();
            // Return decode work to the instances holding its copies.
            let mut back = Vec::new();
            for r in resident(&view, dual) {
                if let Some(&t) = members.iter().find(|&&m| m != dual && view.usable_copy(r, m)) {
                    back.push((r, t));
                }
            }
            for (r, t) in back {
                ctx.apply(Decision::RebalanceMove { request: r, from: dual, to: t })?;
            }
            let view = ctx.view();
            let target = members
                .iter()
                .copied()
                .filter(|&m| m != dual)
                .max_by_key(|&m| (view.free_tokens(m), std::cmp::Reverse(m)))
                .expect("three decode instances");
            let batch_tokens: u64 =
                budgeted_prefix(&view, self.queues[q].iter(), self.cfg.prefill_token_budget)
                    .iter()
                    .map(|&r| view.request(r).prefill_tokens)
                    .sum();
            let mirrored: u64 = view
                .hosted(dual)
                .filter(|&r| {
                    view.primary(r) == Some(target)
                        && view.copy_on(r, dual).is_some_and(|e| e.role == CopyRole::Redundant)
                })
                .map(|r| view.kv_tokens(r))
                .sum();
            let keep = (mirrored + batch_tokens) as f64
                <= self.cfg.dual_keep_fraction * (load(&view, target) + batch_tokens) as f64;
            let retain = if keep { Retain::Redundant } else { Retain::Nothing };
            if self.try_prefill(ctx, q, dual, Some(target), retain)? {
                for m in members {
                    if m != dual && ctx.view().is_free(m) {
                        decode_own(ctx, m)?;
                    }
                }
                return Ok(());
            }
        }
        decode_own(ctx, dual)?;
        Ok(())
    }

    fn group_stats(view: &ClusterView<'_>, g: &Group) -> (usize, usize, u64) {
        let mut decoding = 0;
        let mut covered = 0;
        let mut live_kv = 0;
        for m in g.members() {
            for r in view.batch(m).iter().copied().chain(view.ready(m)) {
                decoding += 1;
                let rv = view.request(r);
                live_kv += rv.kv_tokens;
                if rv
                    .copies
                    .iter()
                    .any(|e| e.role == CopyRole::Redundant && e.tokens == rv.kv_tokens)
                {
                    covered += 1;
                }
            }
        }
        (decoding, covered, live_kv)
    }

    fn update_modes(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        for gi in 0..self.groups.len() {
            let view = ctx.view();
            let (decoding, covered, live_kv) = Self::group_stats(&view, &self.groups[gi]);
            let capacity = 4 * view.capacity();
            let g = &mut self.groups[gi];
            match g.mode {
                Mode::Normal => {
                    let frac = if decoding == 0 { 1.0 } else { covered as f64 / decoding as f64 };
                    g.low_ticks = if frac < self.cfg.degraded_enter_fraction { g.low_ticks + 1 } else { 0 };
                    if g.low_ticks >= self.cfg.degraded_ticks {
                        let dual = g
                            .members()
                            .into_iter()
                            .min_by_key(|&m| (load(&view, m), m))
                            .expect("group members");
                        g.mode = Mode::Degraded { dual };
                        g.low_ticks = 0;
                        g.calm_ticks = 0;
                        self.degraded_entries += 1;
                        let [p0, p1] = g.pairs;
                        let moved: Vec<ReqId> = self.queues[p1].drain(..).collect();
                        let mut merged: Vec<ReqId> = self.queues[p0].drain(..).chain(moved).collect();
                        merged.sort_by(|a, b| {
                            view.request(*a).arrival.total_cmp(&view.request(*b).arrival).then(a.cmp(b))
                        });
                        self.queues[p0] = merged.into();
                        for m in self.groups[gi].members() {
                            self.holding[m.0] = false;
                        }
                    }
                }
                Mode::Degraded { .. } => {
                    let calm = 2.0 * live_kv as f64 <= self.cfg.degraded_exit_fill * capacity as f64;
                    g.calm_ticks = if calm { g.calm_ticks + 1 } else { 0 };
                    if g.calm_ticks >= self.cfg.degraded_ticks {
                        g.mode = Mode::Normal;
                        g.calm_ticks = 0;
                        g.low_ticks = 0;
                    }
                }
            }
        }
        Ok(())
    }

    // ---- background copies ---------------------------------------------

    fn background_copies(&mut self, ctx: &mut SchedCtx<'_>, period: f64) -> Result<(), SimError> {
        let view = ctx.view();
        let per_link = self.cfg.leveling_link_fraction * view.link_rate() * period;
        let kvb = view.kv_bytes_per_token() as f64;
        let reserve = self.copy_reserve(&view);
        let n = view.num_instances();
        let mut budget = vec![per_link; n * n];
        let normal: Vec<bool> = (0..self.queues.len()).map(|p| self.dual_of(p).is_none()).collect();

        // Repair: every request should also live on its partner.
        for p in 0..self.queues.len() {
            if !normal[p] {
                continue;
            }
            for x in members(p) {
                let y = partner(x);
                let view = ctx.view();
                let mut missing: Vec<(u64, ReqId)> = view
                    .batch(x)
                    .iter()
                    .copied()
                    .chain(view.ready(x))
                    .filter(|&r| view.copy_on(r, y).is_none() && !self.migrations.contains_key(&r))
                    .map(|r| (view.kv_tokens(r), r))
                    .collect();
                missing.sort();
                for (t, r) in missing {
                    let view = ctx.view();
                    let bytes = t as f64 * kvb;
                    let b = &mut budget[x.0 * n + y.0];
                    if bytes > *b || view.free_tokens(y) < t + reserve {
                        break;
                    }
                    *b -= bytes;
                    ctx.apply(Decision::CreateRedundant { request: r, on: y })?;
                }
            }
        }

        // Leveling: seed copies from the busiest pair on the idlest one.
        if normal.iter().filter(|&&v| v).count() < 2 {
            return Ok(());
        }
        let view = ctx.view();
        let loads: Vec<(usize, u64)> = (0..self.queues.len())
            .filter(|&p| normal[p])
            .map(|p| (p, members(p).iter().map(|&m| load(&view, m)).sum()))
            .collect();
        let mean = loads.iter().map(|l| l.1).sum::<u64>() as f64 / loads.len() as f64;
        let &(hi, hi_load) = loads.iter().max_by_key(|l| (l.1, std::cmp::Reverse(l.0))).expect("pairs");
        let &(lo, lo_load) = loads.iter().min_by_key(|l| (l.1, l.0)).expect("pairs");
        let in_flight: u64 = self.migrations.keys().map(|&r| view.kv_tokens(r)).sum();
        let mut gap = (hi_load - lo_load) as f64 / 2.0 - in_flight as f64;
        if mean <= 0.0 || (hi_load - lo_load) as f64 <= self.cfg.leveling_imbalance * mean {
            return Ok(());
        }
        let dest = members(lo)
            .into_iter()
            .min_by_key(|&m| (load(&view, m), m))
            .expect("pair members");
        let mut cands: Vec<(u64, ReqId, InstId)> = members(hi)
            .into_iter()
            .flat_map(|m| {
                view.batch(m)
                    .iter()
                    .copied()
                    .chain(view.ready(m))
                    .map(move |r| (r, m))
                    .collect::<Vec<_>>()
            })
            .filter(|&(r, _)| !self.migrations.contains_key(&r) && view.copy_on(r, dest).is_none())
            .map(|(r, m)| (view.kv_tokens(r), r, m))
            .collect();
        cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        for (t, r, src) in cands {
            if t as f64 > gap {
                continue;
            }
            let view = ctx.view();
            let bytes = t as f64 * kvb;
            let b = &mut budget[src.0 * n + dest.0];
            if bytes > *b || view.free_tokens(dest) < t + reserve {
                continue;
            }
            *b -= bytes;
            gap -= t as f64;
            ctx.apply(Decision::CreateRedundant { request: r, on: dest })?;
            self.migrations.insert(r, dest);
        }
        Ok(())
    }
}

impl Policy for AccellmPolicy {
    fn name(&self) -> &'static str {
        "accellm"
    }

    fn validate_cluster(&self, instances: usize) -> Result<(), SimError> {
        if instances % 2 != 0 {
            return Err(SimError::OddInstanceCount(instances));
        }
        self.cfg.validate().map_err(SimError::PolicyConfig)
    }

    fn init(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        let n = ctx.view().num_instances();
        let pairs = n / 2;
        self.queues = vec![VecDeque::new(); pairs];
        self.holding = vec![false; n];
        self.groups = if self.cfg.degraded_mode {
            (0..pairs / 2)
                .map(|g| Group {
                    pairs: [2 * g, 2 * g + 1],
                    mode: Mode::Normal,
                    low_ticks: 0,
                    calm_ticks: 0,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(())
    }

    fn on_arrival(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        let mut touched = Vec::new();
        for &r in requests {
            let p = self.route(&ctx.view());
            let q = self.queue_index(p);
            self.queues[q].push_back(r);
            if !touched.contains(&q) {
                touched.push(q);
            }
        }
        for q in touched {
            let insts: Vec<InstId> = match self.dual_of(q) {
                Some((g, _)) => self.groups[g].members().to_vec(),
                None => members(q).to_vec(),
            };
            for x in insts {
                self.kick(ctx, x)?;
            }
        }
        Ok(())
    }

    fn on_prefill_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        instance: InstId,
        _requests: &[ReqId],
    ) -> Result<(), SimError> {
        self.on_free(ctx, instance)
    }

    fn on_step_boundary(&mut self, ctx: &mut SchedCtx<'_>, instance: InstId) -> Result<(), SimError> {
        self.on_free(ctx, instance)
    }

    fn on_request_complete(&mut self, _ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        for r in requests {
            self.migrations.remove(r);
        }
        Ok(())
    }

    fn on_transfer_complete(
        &mut self,
        ctx: &mut SchedCtx<'_>,
        moved: &[(ReqId, InstId)],
    ) -> Result<(), SimError> {
        let mut targets: Vec<InstId> = Vec::new();
        for &(r, to) in moved {
            let rv = ctx.view().request(r);
            if rv.state == RequestState::Decoding && rv.batched_on.is_none() && !rv.in_job {
                ctx.apply(Decision::AddToBatch { instance: to, request: r })?;
            }
            if !targets.contains(&to) {
                targets.push(to);
            }
        }
        for t in targets {
            self.kick(ctx, t)?;
        }
        Ok(())
    }

    fn on_preempted(&mut self, ctx: &mut SchedCtx<'_>, requests: &[ReqId]) -> Result<(), SimError> {
        let mut touched = Vec::new();
        for &r in requests.iter().rev() {
            self.migrations.remove(&r);
            let q = self.queue_index(self.route(&ctx.view()));
            self.queues[q].push_front(r);
            touched.push(q);
        }
        for q in touched {
            for x in members(q) {
                self.kick(ctx, x)?;
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, ctx: &mut SchedCtx<'_>) -> Result<(), SimError> {
        self.update_modes(ctx)?;
        if self.cfg.leveling {
            let period = self.timer_period();
            self.background_copies(ctx, period)?;
        }
        for x in 0..self.holding.len() {
            self.kick(ctx, InstId(x))?;
        }
        Ok(())
    }

    fn may_prefill(&self, view: &ClusterView<'_>, instance: InstId) -> bool {
        let p = pair_of(instance);
        match self.dual_of(p) {
            Some((g, dual)) => instance == dual && !self.queues[self.groups[g].pairs[0]].is_empty(),
            None => {
                !self.queues[p].is_empty()
                    && view.job(partner(instance)).is_none_or(|j| j.kind != JobKind::Prefill)
            }
        }
    }

    fn holding(&self, view: &ClusterView<'_>, instance: InstId) -> bool {
        self.holding[instance.0] && view.is_free(instance)
    }
}
