//! Single runs, rate sweeps, resource sweeps and curve tables.
//!
//! Points run concurrently on the rayon pool; results are gathered in
//! (policy, rate) or (policy, value) order so outputs never depend on
//! scheduling.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ResolvedConfig, Resource};
use crate::engine::{self, RawResults, SimError};
use crate::metrics::{
    self, compute_report, fmt_value, metric_values, MetricsError, MetricsReport, SUMMARY_COLUMNS,
};
use crate::perfmodel::{throughput_curves, PerfError};
use crate::policy::{build_policy, PolicyKind};
use crate::workload::{generate_trace, load_trace, Trace, TraceError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub const TOOL: &str = "kvsim";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identifies the producer of every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn of(cfg: &ResolvedConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    /// Comment line heading every CSV file.
    pub fn preamble(&self) -> Vec<String> {
        vec![format!(
            "{} {} config={} seed={}",
            self.tool, self.version, self.config_hash, self.seed
        )]
    }
}

/// The trace for one rate: the configured file, or a generated one.
pub fn trace_for(cfg: &ResolvedConfig, rate: f64) -> Result<Trace, ExperimentError> {
    Ok(match &cfg.trace {
        Some(path) => load_trace(path)?,
        None => generate_trace(&cfg.workload, &cfg.arrival(rate))?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub policy: PolicyKind,
    pub rate: f64,
    pub report: MetricsReport,
    #[serde(skip)]
    pub raw: RawResults,
}

/// Simulates one policy on `trace` and computes its report.
pub fn run_trace(cfg: &ResolvedConfig, policy: PolicyKind, rate: f64, trace: &Trace) -> Result<PointResult, ExperimentError> {
    let cost = cfg.cost_model()?;
    let mut p = build_policy(policy, &cfg.policy_params);
    let raw = engine::run(trace, &cost, cfg.instances, p.as_mut(), &cfg.engine_config())?;
    log::debug!(
        "{} at {rate} req/s: {} requests, {} decode steps, ended at {:.3} s",
        policy.as_str(),
        trace.len(),
        raw.counters.decode_steps,
        raw.end_time_s
    );
    let report = compute_report(&raw, &cfg.metrics_window(), cfg.output.per_request);
    Ok(PointResult {
        policy,
        rate,
        report,
        raw,
    })
}

pub fn run_point(cfg: &ResolvedConfig, policy: PolicyKind, rate: f64) -> Result<PointResult, ExperimentError> {
    run_trace(cfg, policy, rate, &trace_for(cfg, rate)?)
}

/// Every configured policy at the first configured rate.
pub fn run(cfg: &ResolvedConfig) -> Result<Vec<PointResult>, ExperimentError> {
    let rate = cfg.rates[0];
    let trace = trace_for(cfg, rate)?;
    cfg.policies
        .par_iter()
        .map(|&p| run_trace(cfg, p, rate, &trace))
        .collect()
}

pub fn summary_csv(meta: &Meta, points: &[PointResult]) -> Result<String, MetricsError> {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| metrics::summary_row(&p.report, p.rate))
        .collect();
    metrics::to_csv(&meta.preamble(), &SUMMARY_COLUMNS, &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Saturation {
    pub policy: PolicyKind,
    pub rate: f64,
    pub cost_efficiency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub points: Vec<PointResult>,
    pub saturation: Vec<Saturation>,
}

/// Rate at which cost efficiency peaks; the lowest such rate on ties.
pub fn saturation_point(points: &[PointResult], policy: PolicyKind) -> Option<Saturation> {
    points
        .iter()
        .filter(|p| p.policy == policy)
        .fold(None, |best: Option<&PointResult>, p| match best {
            Some(b) if b.report.cost_efficiency >= p.report.cost_efficiency => Some(b),
            _ => Some(p),
        })
        .map(|p| Saturation {
            policy,
            rate: p.rate,
            cost_efficiency: p.report.cost_efficiency,
        })
}

/// Every (policy, rate) pair; policies at one rate share a trace.
pub fn sweep(cfg: &ResolvedConfig) -> Result<SweepResult, ExperimentError> {
    let traces: Vec<Trace> = cfg
        .rates
        .iter()
        .map(|&r| trace_for(cfg, r))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(PolicyKind, usize)> = cfg
        .policies
        .iter()
        .flat_map(|&p| (0..cfg.rates.len()).map(move |k| (p, k)))
        .collect();
    let points: Vec<PointResult> = jobs
        .par_iter()
        .map(|&(p, k)| run_trace(cfg, p, cfg.rates[k], &traces[k]))
        .collect::<Result<_, _>>()?;
    let saturation = cfg
        .policies
        .iter()
        .filter_map(|&p| saturation_point(&points, p))
        .collect();
    Ok(SweepResult { points, saturation })
}

impl SweepResult {
    /// Long form: one row per (policy, rate, metric), then one
    /// `saturation_rate` row per policy.
    pub fn long_csv(&self, meta: &Meta) -> Result<String, MetricsError> {
        let mut rows = Vec::new();
        for p in &self.points {
            for (name, v) in metric_values(&p.report) {
                rows.push(vec![p.policy.as_str().into(), format!("{}", p.rate), name.into(), fmt_value(v)]);
            }
        }
        for s in &self.saturation {
            rows.push(vec![
                s.policy.as_str().into(),
                format!("{}", s.rate),
                "saturation_rate".into(),
                format!("{}", s.rate),
            ]);
        }
        metrics::to_csv(&meta.preamble(), &["policy", "rate", "metric", "value"], &rows)
    }

    /// Per-rate comparison of every policy against the first, stacked.
    pub fn comparison_csv(&self, meta: &Meta) -> Result<Option<String>, MetricsError> {
        let mut policies: Vec<PolicyKind> = Vec::new();
        for p in &self.points {
            if !policies.contains(&p.policy) {
                policies.push(p.policy);
            }
        }
        if policies.len() < 2 {
            return Ok(None);
        }
        let mut rates: Vec<f64> = Vec::new();
        for p in &self.points {
            if !rates.contains(&p.rate) {
                rates.push(p.rate);
            }
        }
        let mut header = vec!["rate".to_string(), "metric".to_string()];
        header.extend(policies.iter().map(|p| p.as_str().to_string()));
        header.extend(policies.iter().map(|p| format!("{}_ratio", p.as_str())));
        let mut rows = Vec::new();
        for &rate in &rates {
            let named: Vec<(String, MetricsReport)> = policies
                .iter()
                .filter_map(|&pk| {
                    self.points
                        .iter()
                        .find(|p| p.policy == pk && p.rate == rate)
                        .map(|p| (pk.as_str().to_string(), p.report.clone()))
                })
                .collect();
            let table = metrics::compare(&named)?;
            for r in &table.rows {
                let mut row = vec![format!("{rate}"), r.metric.clone()];
                row.extend(r.values.iter().map(|&v| fmt_value(v)));
                row.extend(r.ratios.iter().map(|&v| fmt_value(v)));
                rows.push(row);
            }
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        metrics::to_csv(&meta.preamble(), &header, &rows).map(Some)
    }
}

/// Perf-model tables; no simulation.
pub fn curves_csv(cfg: &ResolvedConfig, meta: &Meta) -> Result<String, ExperimentError> {
    let mut rows = Vec::new();
    for &phase in &cfg.curves.phases {
        for pt in throughput_curves(
            &cfg.model,
            &cfg.instance,
            &cfg.efficiency,
            &cfg.curves.lengths,
            &cfg.curves.batches,
            phase,
        )? {
            rows.push(vec![
                phase.as_str().into(),
                pt.length.to_string(),
                pt.batch.to_string(),
                format!("{:.9e}", pt.latency),
                format!("{:.6}", pt.tokens_per_s),
            ]);
        }
    }
    Ok(metrics::to_csv(
        &meta.preamble(),
        &["phase", "length", "batch", "latency_s", "tokens_per_s"],
        &rows,
    )?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResourcePoint {
    pub policy: PolicyKind,
    pub value: f64,
    pub jct_mean: Option<f64>,
    pub cost_efficiency: Option<f64>,
    pub completed: Option<usize>,
    pub incomplete: Option<usize>,
    pub peak_kv_bytes: Option<u64>,
    /// Set when the point could not be simulated.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Knee {
    pub policy: PolicyKind,
    /// Smallest value whose mean JCT is within 1% of the policy's best.
    pub jct_knee: Option<f64>,
    /// Smallest value whose cost efficiency is within 1% of the best.
    pub cost_knee: Option<f64>,
    /// Smallest value meeting both.
    pub knee: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResourceSweepResult {
    pub resource: Resource,
    pub rate: f64,
    pub points: Vec<ResourcePoint>,
    pub knees: Vec<Knee>,
}

pub const KNEE_TOLERANCE: f64 = 0.01;

/// Knees over one policy's successful points.
pub fn knees(policy: PolicyKind, points: &[ResourcePoint]) -> Knee {
    let ok: Vec<&ResourcePoint> = points
        .iter()
        .filter(|p| p.policy == policy && p.error.is_none())
        .collect();
    let best_jct = ok.iter().filter_map(|p| p.jct_mean).fold(f64::INFINITY, f64::min);
    let best_cost = ok.iter().filter_map(|p| p.cost_efficiency).fold(0.0, f64::max);
    let jct_ok = |p: &ResourcePoint| p.jct_mean.is_some_and(|j| j <= best_jct * (1.0 + KNEE_TOLERANCE));
    let cost_ok = |p: &ResourcePoint| {
        p.cost_efficiency
            .is_some_and(|c| c >= best_cost * (1.0 - KNEE_TOLERANCE))
    };
    let min_where = |f: &dyn Fn(&ResourcePoint) -> bool| {
        ok.iter()
            .filter(|p| f(p))
            .map(|p| p.value)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
    };
    Knee {
        policy,
        jct_knee: min_where(&jct_ok),
        cost_knee: min_where(&cost_ok),
        knee: min_where(&|p| jct_ok(p) && cost_ok(p)),
    }
}

/// Varies one per-device resource; failed points are recorded, not fatal.
pub fn resource_sweep(cfg: &ResolvedConfig) -> Result<Option<ResourceSweepResult>, ExperimentError> {
    let Some(rs) = &cfg.resource_sweep else {
        return Ok(None);
    };
    let rate = rs.rate.unwrap_or(cfg.rates[0]);
    let trace = trace_for(cfg, rate)?;
    let jobs: Vec<(PolicyKind, f64)> = cfg
        .policies
        .iter()
        .flat_map(|&p| rs.values.iter().map(move |&v| (p, v)))
        .collect();
    let points: Vec<ResourcePoint> = jobs
        .par_iter()
        .map(|&(policy, value)| {
            let mut c = cfg.clone();
            match rs.resource {
                Resource::HbmCapacity => c.instance.device.hbm_capacity = value,
                Resource::LinkBandwidth => c.instance.device.link_bandwidth = value,
            }
            match run_trace(&c, policy, rate, &trace) {
                Ok(p) => ResourcePoint {
                    policy,
                    value,
                    jct_mean: p.report.jct.map(|s| s.mean),
                    cost_efficiency: Some(p.report.cost_efficiency),
                    completed: Some(p.report.completed),
                    incomplete: Some(p.report.incomplete),
                    peak_kv_bytes: p.report.per_instance.iter().map(|i| i.peak_kv_bytes).max(),
                    error: None,
                },
                Err(e) => ResourcePoint {
                    policy,
                    value,
                    jct_mean: None,
                    cost_efficiency: None,
                    completed: None,
                    incomplete: None,
                    peak_kv_bytes: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let knees = cfg.policies.iter().map(|&p| knees(p, &points)).collect();
    Ok(Some(ResourceSweepResult {
        resource: rs.resource,
        rate,
        points,
        knees,
    }))
}

impl ResourceSweepResult {
    pub fn points_csv(&self, meta: &Meta) -> Result<String, MetricsError> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| {
                vec![
                    p.policy.as_str().into(),
                    self.resource.as_str().into(),
                    format!("{}", p.value),
                    fmt_value(p.jct_mean),
                    fmt_value(p.cost_efficiency),
                    opt(p.completed.map(|v| v.to_string())),
                    opt(p.incomplete.map(|v| v.to_string())),
                    opt(p.peak_kv_bytes.map(|v| v.to_string())),
                    opt(p.error.clone()),
                ]
            })
            .collect();
        metrics::to_csv(
            &meta.preamble(),
            &[
                "policy",
                "resource",
                "value",
                "jct_mean",
                "cost_eff",
                "completed",
                "incomplete",
                "peak_kv_bytes",
                "error",
            ],
            &rows,
        )
    }

    pub fn knees_csv(&self, meta: &Meta) -> Result<String, MetricsError> {
        let rows: Vec<Vec<String>> = self
            .knees
            .iter()
            .map(|k| {
                vec![
                    k.policy.as_str().into(),
                    self.resource.as_str().into(),
                    fmt_value(k.jct_knee),
                    fmt_value(k.cost_knee),
                    fmt_value(k.knee),
                ]
            })
            .collect();
        metrics::to_csv(
            &meta.preamble(),
            &["policy", "resource", "jct_knee", "cost_knee", "knee"],
            &rows,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small(json: &str) -> ResolvedConfig {
        ExperimentConfig::from_json(json).unwrap().resolve().unwrap()
    }

    #[test]
    fn one_point_sweep_matches_run() {
        let cfg = small(r#"{"instances": 2, "rates": [1.0], "duration_s": 20, "warmup_s": 2, "drain_s": 30}"#);
        let a = run(&cfg).unwrap();
        let b = sweep(&cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].report, b.points[0].report);
        assert_eq!(b.saturation[0].rate, 1.0);
    }

    #[test]
    fn sweep_order_is_policy_major() {
        let cfg = small(
            r#"{"instances": 2, "rates": [0.5, 1.0], "duration_s": 10, "warmup_s": 0, "drain_s": 20,
                "policies": ["unified", "accellm"]}"#,
        );
        let s = sweep(&cfg).unwrap();
        let order: Vec<(PolicyKind, f64)> = s.points.iter().map(|p| (p.policy, p.rate)).collect();
        assert_eq!(
            order,
            vec![
                (PolicyKind::Unified, 0.5),
                (PolicyKind::Unified, 1.0),
                (PolicyKind::Accellm, 0.5),
                (PolicyKind::Accellm, 1.0)
            ]
        );
        let meta = Meta::of(&cfg);
        let csv = s.comparison_csv(&meta).unwrap().unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("rate,metric,unified,accellm"));
    }

    #[test]
    fn knee_is_smallest_value_within_tolerance() {
        let pt = |value: f64, jct: f64, cost: f64| ResourcePoint {
            policy: PolicyKind::Accellm,
            value,
            jct_mean: Some(jct),
            cost_efficiency: Some(cost),
            completed: Some(1),
            incomplete: Some(0),
            peak_kv_bytes: Some(0),
            error: None,
        };
        let mut pts = vec![pt(1.0, 3.0, 50.0), pt(2.0, 1.005, 99.5), pt(4.0, 1.0, 100.0)];
        pts.push(ResourcePoint {
            error: Some("capacity".into()),
            jct_mean: None,
            ..pt(0.5, 0.0, 0.0)
        });
        let k = knees(PolicyKind::Accellm, &pts);
        assert_eq!(k.jct_knee, Some(2.0));
        assert_eq!(k.cost_knee, Some(2.0));
        assert_eq!(k.knee, Some(2.0));
    }

    #[test]
    fn capacity_below_weights_is_recorded_per_point() {
        let cfg = small(
            r#"{"instances": 2, "rates": [0.5], "duration_s": 5, "warmup_s": 0, "drain_s": 10,
                "policies": ["unified"],
                "resource_sweep": {"resource": "hbm_capacity", "values": [1e9, 80e9]}}"#,
        );
        let r = resource_sweep(&cfg).unwrap().unwrap();
        assert!(r.points[0].error.is_some());
        assert!(r.points[1].error.is_none());
        assert_eq!(r.knees[0].knee, Some(80e9));
    }

    #[test]
    fn curves_single_batch_matches_decode_latency() {
        let cfg = small(r#"{"curves": {"phases": ["decode"], "lengths": [500], "batches": [1]}}"#);
        let csv = curves_csv(&cfg, &Meta::of(&cfg)).unwrap();
        let row = csv.lines().nth(2).unwrap();
        let lat: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        let want = cfg.cost_model().unwrap().decode_step_latency(&[500]).unwrap();
        assert!(((lat - want) / want).abs() < 1e-8);
    }
}
