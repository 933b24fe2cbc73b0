//! Latency, efficiency and resource statistics over a finished run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Activity, QueueSample, RawResults, RequestState, TrafficTotals};

pub const REPORT_SCHEMA: &str = "kvsim.report/1";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("comparison needs at least two reports")]
    TooFewReports,
    #[error("report {name:?} was produced from a different trace")]
    FingerprintMismatch { name: String },
    #[error("csv output: {0}")]
    Csv(String),
}

/// Nearest-rank percentile of an ascending slice; `p` in [0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl Stats {
    /// Absent for an empty sample.
    pub fn of(samples: &[f64]) -> Option<Stats> {
        if samples.is_empty() {
            return None;
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Stats {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: percentile(&v, 50.0)?,
            p95: percentile(&v, 95.0)?,
            max: *v.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub ttft: f64,
    /// Arrival until the first prefill started.
    pub queue_wait: f64,
    pub jct: f64,
    pub tbt: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsWindow {
    /// Requests arriving before this are left out of latency statistics.
    pub warmup_s: f64,
    /// End of the throughput window; the run's end when absent.
    pub end_s: Option<f64>,
}

impl Default for MetricsWindow {
    fn default() -> Self {
        Self {
            warmup_s: 0.0,
            end_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: usize,
    /// Share of the window spent not computing.
    pub idle_fraction: f64,
    /// Free time while local or queued work it could start existed.
    pub idle_runnable_s: f64,
    /// Free time spent waiting for a partner's step boundary.
    pub sync_wait_s: f64,
    pub peak_kv_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub policy: String,
    pub trace_fingerprint: String,
    pub instances: usize,
    pub window: MetricsWindow,
    pub window_s: f64,
    pub completed: usize,
    /// Arrived before the horizon but unfinished.
    pub incomplete: usize,
    pub ttft: Option<Stats>,
    pub queue_wait: Option<Stats>,
    pub tbt: Option<Stats>,
    pub jct: Option<Stats>,
    pub tokens_in_window: u64,
    /// Tokens per second per instance.
    pub cost_efficiency: f64,
    pub mean_idle_fraction: f64,
    pub per_instance: Vec<InstanceMetrics>,
    pub traffic: TrafficTotals,
    pub peak_mirror_bytes_per_s: f64,
    pub queue_depth: Vec<QueueSample>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_request: Option<Vec<RequestMetrics>>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Pure function of the raw results.
pub fn compute_report(raw: &RawResults, window: &MetricsWindow, per_request: bool) -> MetricsReport {
    let w0 = window.warmup_s;
    let w1 = window.end_s.unwrap_or(raw.end_time_s).max(w0);
    let span = w1 - w0;

    let mut reqs = Vec::new();
    let mut incomplete = 0;
    for r in &raw.requests {
        if r.state != RequestState::Complete {
            if r.arrival_s <= raw.end_time_s {
                incomplete += 1;
            }
            continue;
        }
        if r.arrival_s < w0 {
            continue;
        }
        let (Some(first), Some(done)) = (r.first_token_s, r.completion_s) else {
            continue;
        };
        reqs.push(RequestMetrics {
            id: r.id,
            ttft: first - r.arrival_s,
            queue_wait: r.prefill_start_s.map_or(0.0, |s| s - r.arrival_s),
            jct: done - r.arrival_s,
            tbt: r.token_times_s.windows(2).map(|w| w[1] - w[0]).collect(),
        });
    }
    let collect = |f: &dyn Fn(&RequestMetrics) -> f64| reqs.iter().map(f).collect::<Vec<f64>>();
    let tbt_all: Vec<f64> = reqs.iter().flat_map(|m| m.tbt.iter().copied()).collect();

    let tokens_in_window: u64 = raw
        .requests
        .iter()
        .map(|r| r.token_times_s.iter().filter(|&&t| t >= w0 && t <= w1).count() as u64)
        .sum();
    let cost_efficiency = if span > 0.0 && raw.instances > 0 {
        tokens_in_window as f64 / (span * raw.instances as f64)
    } else {
        0.0
    };

    let per_instance: Vec<InstanceMetrics> = raw
        .instance_records
        .iter()
        .map(|i| {
            let mut idle = span;
            let mut runnable = 0.0;
            let mut sync = 0.0;
            for s in &i.activity {
                let o = overlap(s.start, s.end, w0, w1);
                match s.activity {
                    a if a.is_busy() => idle -= o,
                    Activity::IdleRunnable => runnable += o,
                    Activity::SyncWait => sync += o,
                    _ => {}
                }
            }
            InstanceMetrics {
                id: i.id,
                idle_fraction: if span > 0.0 { (idle / span).clamp(0.0, 1.0) } else { 0.0 },
                idle_runnable_s: runnable,
                sync_wait_s: sync,
                peak_kv_bytes: i.peak_kv_tokens * raw.kv_bytes_per_token,
            }
        })
        .collect();
    let mean_idle_fraction = if per_instance.is_empty() {
        0.0
    } else {
        per_instance.iter().map(|i| i.idle_fraction).sum::<f64>() / per_instance.len() as f64
    };

    MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        policy: raw.policy.clone(),
        trace_fingerprint: raw.trace_fingerprint.clone(),
        instances: raw.instances,
        window: *window,
        window_s: span,
        completed: reqs.len(),
        incomplete,
        ttft: Stats::of(&collect(&|m| m.ttft)),
        queue_wait: Stats::of(&collect(&|m| m.queue_wait)),
        tbt: Stats::of(&tbt_all),
        jct: Stats::of(&collect(&|m| m.jct)),
        tokens_in_window,
        cost_efficiency,
        mean_idle_fraction,
        per_instance,
        traffic: raw.traffic,
        peak_mirror_bytes_per_s: raw
            .links
            .iter()
            .map(|l| l.peak_mirror_bytes_per_s)
            .fold(0.0, f64::max),
        queue_depth: raw.queue_depth.clone(),
        per_request: per_request.then_some(reqs),
    }
}

/// Column order of `summary.csv`.
pub const SUMMARY_COLUMNS: [&str; 13] = [
    "policy",
    "rate",
    "ttft_mean",
    "ttft_p95",
    "tbt_mean",
    "tbt_max",
    "jct_mean",
    "jct_p95",
    "cost_eff",
    "idle_frac",
    "peak_kv_gb",
    "link_prefill_gb",
    "link_mirror_gb",
];

/// Comparable scalar metrics, in `SUMMARY_COLUMNS` order after `rate`.
pub fn metric_values(r: &MetricsReport) -> Vec<(&'static str, Option<f64>)> {
    let gb = |b: u64| b as f64 / 1e9;
    let peak = r.per_instance.iter().map(|i| i.peak_kv_bytes).max().unwrap_or(0);
    vec![
        ("ttft_mean", r.ttft.map(|s| s.mean)),
        ("ttft_p95", r.ttft.map(|s| s.p95)),
        ("tbt_mean", r.tbt.map(|s| s.mean)),
        ("tbt_max", r.tbt.map(|s| s.max)),
        ("jct_mean", r.jct.map(|s| s.mean)),
        ("jct_p95", r.jct.map(|s| s.p95)),
        ("cost_eff", Some(r.cost_efficiency)),
        ("idle_frac", Some(r.mean_idle_fraction)),
        ("peak_kv_gb", Some(gb(peak))),
        ("link_prefill_gb", Some(gb(r.traffic.prefill_transfer))),
        ("link_mirror_gb", Some(gb(r.traffic.mirror))),
    ]
}

/// Absent values render as empty cells.
pub fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.9}"))
}

pub fn summary_row(r: &MetricsReport, rate: f64) -> Vec<String> {
    let mut row = vec![r.policy.clone(), format!("{rate}")];
    row.extend(metric_values(r).into_iter().map(|(_, v)| fmt_value(v)));
    row
}

/// Renders rows as CSV, preceded by `preamble` comment lines.
pub fn to_csv(preamble: &[String], header: &[&str], rows: &[Vec<String>]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| MetricsError::Csv(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| MetricsError::Csv(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| MetricsError::Csv(e.to_string()))?;
    let mut out: String = preamble.iter().map(|l| format!("# {l}\n")).collect();
    out.push_str(&String::from_utf8(body).map_err(|e| MetricsError::Csv(e.to_string()))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub values: Vec<Option<f64>>,
    /// Each value divided by the first report's.
    pub ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_csv(&self, preamble: &[String]) -> Result<String, MetricsError> {
        let mut header = vec!["metric".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(self.names.iter().map(|n| format!("{n}_ratio")));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.metric.clone()];
                row.extend(r.values.iter().map(|&v| fmt_value(v)));
                row.extend(r.ratios.iter().map(|&v| fmt_value(v)));
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        to_csv(preamble, &header, &rows)
    }
}

/// Side-by-side metrics with ratios against the first report.
pub fn compare(reports: &[(String, MetricsReport)]) -> Result<Comparison, MetricsError> {
    let Some((_, first)) = reports.first() else {
        return Err(MetricsError::TooFewReports);
    };
    if reports.len() < 2 {
        return Err(MetricsError::TooFewReports);
    }
    for (name, r) in reports {
        if r.trace_fingerprint != first.trace_fingerprint {
            return Err(MetricsError::FingerprintMismatch { name: name.clone() });
        }
    }
    let columns: Vec<Vec<(&'static str, Option<f64>)>> =
        reports.iter().map(|(_, r)| metric_values(r)).collect();
    let rows = (0..columns[0].len())
        .map(|k| {
            let values: Vec<Option<f64>> = columns.iter().map(|c| c[k].1).collect();
            let base = values[0];
            let ratios = values
                .iter()
                .map(|v| match (v, base) {
                    (Some(v), Some(b)) if b != 0.0 => Some(v / b),
                    _ => None,
                })
                .collect();
            ComparisonRow {
                metric: columns[0][k].0.to_string(),
                values,
                ratios,
            }
        })
        .collect();
    Ok(Comparison {
        names: reports.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{
        Counters, FirstTokenMode, InstanceRecord, RequestRecord, Segment, RAW_SCHEMA,
    };

    fn raw(requests: Vec<RequestRecord>, instances: usize, end: f64) -> RawResults {
        RawResults {
            schema: RAW_SCHEMA.into(),
            policy: "test".into(),
            instances,
            kv_capacity_tokens: 1000,
            kv_bytes_per_token: 10,
            trace_fingerprint: "abc".into(),
            first_token: FirstTokenMode::Prefill,
            horizon_s: None,
            end_time_s: end,
            requests,
            instance_records: (0..instances)
                .map(|k| InstanceRecord {
                    id: k,
                    peak_kv_tokens: 100,
                    busy_s: end / 2.0,
                    prefill_jobs: 0,
                    decode_steps: 0,
                    activity: vec![Segment {
                        start: 0.0,
                        end: end / 2.0,
                        activity: Activity::Decode,
                    }],
                })
                .collect(),
            traffic: TrafficTotals::default(),
            links: Vec::new(),
            queue_depth: Vec::new(),
            counters: Counters::default(),
            events: None,
        }
    }

    fn request(id: u64, arrival: f64, times: Vec<f64>) -> RequestRecord {
        RequestRecord {
            id,
            arrival_s: arrival,
            prompt_len: 10,
            decode_len: times.len() as u64,
            tokens_emitted: times.len() as u64,
            state: RequestState::Complete,
            prefill_start_s: Some(arrival),
            first_token_s: times.first().copied(),
            completion_s: times.last().copied(),
            token_times_s: times,
            preemptions: 0,
        }
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(10.0));
        assert_eq!(percentile(&v, 95.0), Some(19.0));
        assert_eq!(percentile(&v, 100.0), Some(20.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn single_token_request_has_no_gaps() {
        let r = compute_report(&raw(vec![request(0, 0.0, vec![0.5])], 1, 1.0), &MetricsWindow::default(), true);
        let m = &r.per_request.unwrap()[0];
        assert!(m.tbt.is_empty());
        assert_eq!(m.jct, m.ttft);
        assert!(r.tbt.is_none());
    }

    #[test]
    fn cost_efficiency_arithmetic() {
        let times: Vec<f64> = (0..3000).map(|k| k as f64 / 3000.0).collect();
        let r = compute_report(&raw(vec![request(0, 0.0, times)], 2, 1.0), &MetricsWindow::default(), false);
        assert!((r.cost_efficiency - 1500.0).abs() < 1e-9);
    }

    #[test]
    fn zero_completed_marks_aggregates_absent() {
        let mut q = request(0, 0.0, vec![]);
        q.state = RequestState::Queued;
        let r = compute_report(&raw(vec![q], 1, 1.0), &MetricsWindow::default(), false);
        assert_eq!(r.completed, 0);
        assert_eq!(r.incomplete, 1);
        assert!(r.ttft.is_none() && r.jct.is_none() && r.tbt.is_none());
        let row = summary_row(&r, 1.0);
        assert_eq!(row[2], "");
    }

    #[test]
    fn warmup_excludes_early_arrivals() {
        let reqs = vec![request(0, 0.1, vec![0.2, 0.3]), request(1, 2.0, vec![2.5, 2.6])];
        let w = MetricsWindow { warmup_s: 1.0, end_s: Some(3.0) };
        let r = compute_report(&raw(reqs, 1, 3.0), &w, false);
        assert_eq!(r.completed, 1);
        assert!((r.ttft.unwrap().mean - 0.5).abs() < 1e-12);
        assert_eq!(r.tokens_in_window, 2);
        assert!((r.per_instance[0].idle_fraction - 0.75).abs() < 1e-12);
    }

    #[test]
    fn report_is_idempotent() {
        let x = raw(vec![request(0, 0.0, vec![0.1, 0.2, 0.4])], 1, 1.0);
        let a = compute_report(&x, &MetricsWindow::default(), true);
        let b = compute_report(&x, &MetricsWindow::default(), true);
        assert_eq!(a, b);
    }

    #[test]
    fn identical_reports_compare_to_one() {
        let r = compute_report(&raw(vec![request(0, 0.0, vec![0.1, 0.2])], 1, 1.0), &MetricsWindow::default(), false);
        let c = compare(&[("a".into(), r.clone()), ("b".into(), r)]).unwrap();
        for row in &c.rows {
            if let Some(x) = row.ratios[1] {
                assert!((x - 1.0).abs() < 1e-12, "{}", row.metric);
            }
        }
    }

    #[test]
    fn ratio_is_exact_quotient() {
        let base = compute_report(&raw(vec![request(0, 0.0, vec![0.1])], 1, 1.0), &MetricsWindow::default(), false);
        let mut hi = base.clone();
        let mut lo = base;
        hi.cost_efficiency = 1300.0;
        lo.cost_efficiency = 1000.0;
        let c = compare(&[("lo".into(), lo), ("hi".into(), hi)]).unwrap();
        assert!((c.row("cost_eff").unwrap().ratios[1].unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let a = compute_report(&raw(vec![request(0, 0.0, vec![0.1])], 1, 1.0), &MetricsWindow::default(), false);
        let mut b = a.clone();
        b.trace_fingerprint = "other".into();
        assert_eq!(
            compare(&[("a".into(), a.clone()), ("b".into(), b)]),
            Err(MetricsError::FingerprintMismatch { name: "b".into() })
        );
        assert_eq!(compare(&[("a".into(), a)]), Err(MetricsError::TooFewReports));
    }

    #[test]
    fn csv_has_preamble_and_header() {
        let out = to_csv(&["kvsim 0.1.0".into()], &["a", "b"], &[vec!["x,y".into(), "1".into()]]).unwrap();
        assert_eq!(out, "# kvsim 0.1.0\na,b\n\"x,y\",1\n");
    }
}
