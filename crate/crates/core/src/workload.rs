//! Request traces: synthetic generation and the on-disk trace format.
//!
//! Generation is reproducible across implementations. The generator is
//! PCG-XSL-RR 128/64 (`Pcg64`) seeded with state `PCG_STATE ^ seed` and stream
//! `PCG_STREAM`. Each 64-bit output is turned into a unit float as
//! `(x >> 11) * 2^-53`. Per request, three draws are taken in order:
//! the inter-arrival gap (Poisson only, `-ln(1 - u) / rate`), the prompt
//! length and the decode length (`min + floor(u * (max - min + 1))`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_core::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TRACE_MAGIC: &str = "#kvsim-trace v1";

const PCG_STATE: u128 = 0xcafe_f00d_d15e_a5e5_a02b_dbf7_bb3c_0a7a;
const PCG_STREAM: u128 = 0x0a02_bdbf_7bb3_c0a7_ac28_fa16_a64a_bf96;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: arrival time decreases")]
    NonMonotonic { line: usize },
    #[error("line {line}: duplicate request id {id}")]
    DuplicateId { line: usize, id: u64 },
    #[error("line {line}: {field} {value} outside declared range {min}-{max}")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: u64,
        min: u64,
        max: u64,
    },
    #[error("missing `{TRACE_MAGIC}` header")]
    MissingHeader,
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Inclusive token-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: u64,
    pub max: u64,
}

impl LengthRange {
    pub const fn new(min: u64, max: u64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: u64) -> bool {
        (self.min..=self.max).contains(&v)
    }

    pub fn mean(&self) -> f64 {
        (self.min + self.max) as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthDistribution {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub prompt_range: LengthRange,
    pub decode_range: LengthRange,
    #[serde(default)]
    pub distribution: LengthDistribution,
}

impl WorkloadSpec {
    pub fn light() -> Self {
        Self::uniform("light", 20, 500)
    }

    pub fn mixed() -> Self {
        Self::uniform("mixed", 20, 1000)
    }

    pub fn heavy() -> Self {
        Self::uniform("heavy", 500, 1000)
    }

    fn uniform(name: &str, min: u64, max: u64) -> Self {
        Self {
            name: name.into(),
            prompt_range: LengthRange::new(min, max),
            decode_range: LengthRange::new(min, max),
            distribution: LengthDistribution::Uniform,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "light" => Some(Self::light()),
            "mixed" => Some(Self::mixed()),
            "heavy" => Some(Self::heavy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        for (field, r) in [("prompt_range", self.prompt_range), ("decode_range", self.decode_range)] {
            if r.min < 1 || r.min > r.max {
                return Err(TraceError::InvalidSpec(format!(
                    "{field} must satisfy 1 <= min <= max"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    FixedInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    /// Requests per second.
    pub rate: f64,
    pub process: ArrivalProcess,
    /// Arrivals are generated over `[0, duration)` seconds.
    pub duration: f64,
    pub seed: u64,
}

impl ArrivalSpec {
    pub fn poisson(rate: f64, duration: f64, seed: u64) -> Self {
        Self {
            rate,
            process: ArrivalProcess::Poisson,
            duration,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(TraceError::InvalidSpec("rate must be >= 0".into()));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(TraceError::InvalidSpec("duration must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: u64,
    pub arrival_s: f64,
    pub prompt_len: u64,
    pub decode_len: u64,
}

/// Requests ordered by arrival. `bounds` carries the generating workload's
/// ranges when known; loading enforces them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub requests: Vec<TraceRequest>,
    pub bounds: Option<(LengthRange, LengthRange)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Serialized trace file contents.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(TRACE_MAGIC);
        if let Some((p, d)) = self.bounds {
            let _ = write!(out, " prompt={}-{} decode={}-{}", p.min, p.max, d.min, d.max);
        }
        out.push('\n');
        for r in &self.requests {
            let _ = writeln!(out, "{},{},{},{}", r.id, r.arrival_s, r.prompt_len, r.decode_len);
        }
        out
    }

    /// SHA-256 of the serialized form; identifies a trace across runs.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        fs::write(path, self.to_file_string()).map_err(|e| TraceError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TraceError::MissingHeader)?;
        let rest = header.strip_prefix(TRACE_MAGIC).ok_or(TraceError::MissingHeader)?;
        let bounds = parse_header_bounds(rest)?;

        let mut requests: Vec<TraceRequest> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let row = raw.trim();
            if row.is_empty() || row.starts_with('#') || row == "id,arrival_s,prompt_len,decode_len" {
                continue;
            }
            let req = parse_row(row, line)?;
            if req.prompt_len == 0 || req.decode_len == 0 {
                return Err(TraceError::Parse {
                    line,
                    msg: "lengths must be at least one token".into(),
                });
            }
            if let Some((p, d)) = bounds {
                for (field, value, range) in [("prompt_len", req.prompt_len, p), ("decode_len", req.decode_len, d)] {
                    if !range.contains(value) {
                        return Err(TraceError::OutOfRange {
                            line,
                            field,
                            value,
                            min: range.min,
                            max: range.max,
                        });
                    }
                }
            }
            if let Some(prev) = requests.last() {
                if req.arrival_s < prev.arrival_s {
                    return Err(TraceError::NonMonotonic { line });
                }
            }
            if !seen.insert(req.id) {
                return Err(TraceError::DuplicateId { line, id: req.id });
            }
            requests.push(req);
        }
        Ok(Self { requests, bounds })
    }
}

fn parse_header_bounds(rest: &str) -> Result<Option<(LengthRange, LengthRange)>, TraceError> {
    let mut prompt = None;
    let mut decode = None;
    for tok in rest.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| header_err(tok))?;
        let (lo, hi) = val.split_once('-').ok_or_else(|| header_err(tok))?;
        let range = LengthRange::new(
            lo.parse().map_err(|_| header_err(tok))?,
            hi.parse().map_err(|_| header_err(tok))?,
        );
        match key {
            "prompt" => prompt = Some(range),
            "decode" => decode = Some(range),
            _ => return Err(header_err(tok)),
        }
    }
    match (prompt, decode) {
        (Some(p), Some(d)) => Ok(Some((p, d))),
        (None, None) => Ok(None),
        _ => Err(TraceError::Parse {
            line: 1,
            msg: "header must declare both prompt and decode ranges".into(),
        }),
    }
}

fn header_err(tok: &str) -> TraceError {
    TraceError::Parse {
        line: 1,
        msg: format!("bad header field `{tok}`"),
    }
}

fn parse_row(row: &str, line: usize) -> Result<TraceRequest, TraceError> {
    let fields: Vec<&str> = row.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(TraceError::Parse {
            line,
            msg: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let bad = |name: &str| TraceError::Parse {
        line,
        msg: format!("invalid {name}"),
    };
    let arrival_s: f64 = fields[1].parse().map_err(|_| bad("arrival_s"))?;
    if !arrival_s.is_finite() || arrival_s < 0.0 {
        return Err(bad("arrival_s"));
    }
    Ok(TraceRequest {
        id: fields[0].parse().map_err(|_| bad("id"))?,
        arrival_s,
        prompt_len: fields[2].parse().map_err(|_| bad("prompt_len"))?,
        decode_len: fields[3].parse().map_err(|_| bad("decode_len"))?,
    })
}

pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| TraceError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Trace::parse(&text)
}

/// Seeded sampler behind trace generation.
pub struct TraceRng {
    inner: Pcg64,
}

impl TraceRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg64::new(PCG_STATE ^ seed as u128, PCG_STREAM),
        }
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_int(&mut self, range: LengthRange) -> u64 {
        let span = (range.max - range.min + 1) as f64;
        let offset = (self.unit() * span).floor() as u64;
        range.min + offset.min(range.max - range.min)
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.unit()).ln() / rate
    }
}

pub fn generate_trace(workload: &WorkloadSpec, arrival: &ArrivalSpec) -> Result<Trace, TraceError> {
    workload.validate()?;
    arrival.validate()?;
    let mut trace = Trace {
        requests: Vec::new(),
        bounds: Some((workload.prompt_range, workload.decode_range)),
    };
    if arrival.rate == 0.0 {
        return Ok(trace);
    }
    let mut rng = TraceRng::new(arrival.seed);
    let mut t = 0.0;
    let mut k: u64 = 0;
    loop {
        let arrival_s = match arrival.process {
            ArrivalProcess::Poisson => {
                t += rng.exponential(arrival.rate);
                t
            }
            ArrivalProcess::FixedInterval => k as f64 / arrival.rate,
        };
        if arrival_s >= arrival.duration {
            break;
        }
        let prompt_len = rng.uniform_int(workload.prompt_range);
        let decode_len = rng.uniform_int(workload.decode_range);
        trace.requests.push(TraceRequest {
            id: k,
            arrival_s,
            prompt_len,
            decode_len,
        });
        k += 1;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_prompt_mean_near_500() {
        let t = generate_trace(&WorkloadSpec::mixed(), &ArrivalSpec::poisson(8.0, 1000.0, 3)).unwrap();
        assert!(t.len() >= 7600, "{}", t.len());
        let mean = t.requests.iter().map(|r| r.prompt_len as f64).sum::<f64>() / t.len() as f64;
        assert!((475.0..=525.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn zero_rate_is_empty() {
        let t = generate_trace(&WorkloadSpec::mixed(), &ArrivalSpec::poisson(0.0, 10.0, 1)).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let a = generate_trace(&WorkloadSpec::light(), &ArrivalSpec::poisson(5.0, 30.0, 42)).unwrap();
        let b = generate_trace(&WorkloadSpec::light(), &ArrivalSpec::poisson(5.0, 30.0, 42)).unwrap();
        let c = generate_trace(&WorkloadSpec::light(), &ArrivalSpec::poisson(5.0, 30.0, 43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_interval_spacing() {
        let spec = ArrivalSpec {
            rate: 4.0,
            process: ArrivalProcess::FixedInterval,
            duration: 2.0,
            seed: 0,
        };
        let t = generate_trace(&WorkloadSpec::heavy(), &spec).unwrap();
        let times: Vec<f64> = t.requests.iter().map(|r| r.arrival_s).collect();
        assert_eq!(times, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75]);
    }

    #[test]
    fn parses_small_file() {
        let text = "#kvsim-trace v1\n0,0.0,10,5\n1,0.5,20,6\n2,0.5,30,7\n";
        let t = Trace::parse(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.requests[2].prompt_len, 30);
        assert_eq!(t.bounds, None);
    }

    #[test]
    fn decreasing_arrival_names_line() {
        let text = "#kvsim-trace v1\n0,1.0,10,5\n1,0.5,20,6\n";
        let err = Trace::parse(text).unwrap_err();
        assert_eq!(err, TraceError::NonMonotonic { line: 3 });
        assert!(err.to_string().starts_with("line 3"));

        // Without the header the first data row is line 2.
        let text = "#kvsim-trace v1\n0,1.0,10,5\n";
        assert!(Trace::parse(text).is_ok());
    }

    #[test]
    fn rejects_out_of_range_when_bounds_declared() {
        let text = "#kvsim-trace v1 prompt=20-500 decode=20-500\n0,0.0,10,50\n";
        let err = Trace::parse(text).unwrap_err();
        assert!(matches!(err, TraceError::OutOfRange { line: 2, field: "prompt_len", .. }));
    }

    #[test]
    fn rejects_garbage_and_missing_header() {
        assert_eq!(Trace::parse("0,0.0,1,1\n").unwrap_err(), TraceError::MissingHeader);
        let err = Trace::parse("#kvsim-trace v1\n0,abc,1,1\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
        let err = Trace::parse("#kvsim-trace v1\n0,0,1,1\n0,1,1,1\n").unwrap_err();
        assert_eq!(err, TraceError::DuplicateId { line: 3, id: 0 });
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = generate_trace(&WorkloadSpec::mixed(), &ArrivalSpec::poisson(3.0, 20.0, 9)).unwrap();
        t.save(&path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), t);
    }
}
