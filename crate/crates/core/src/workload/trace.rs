//! Poisson request traces and their JSON Lines form.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::types::Nanos;

pub const PRESET_BUCKETS: usize = 20;

/// Mask-ratio distribution of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDist {
    /// Every request has this ratio.
    Point(f64),
    /// `probs[i]` is the mass of the bucket `(i/n, (i+1)/n]`; ratios are
    /// uniform within a bucket.
    Buckets(Vec<f64>),
    /// Named geometric preset; see [`MaskDist::preset`].
    Preset(MaskPreset),
}

/// Stand-in histograms for production mask-ratio traces: most edits touch a
/// small fraction of the image, with a thin tail up to full masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPreset {
    /// Mean ratio 0.11.
    Light,
    /// Mean ratio 0.19.
    Heavy,
}

impl MaskPreset {
    pub fn target_mean(self) -> f64 {
        match self {
            MaskPreset::Light => 0.11,
            MaskPreset::Heavy => 0.19,
        }
    }
}

fn geometric_buckets(decay: f64, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| decay.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

fn buckets_mean(probs: &[f64]) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * (i as f64 + 0.5) / n)
        .sum()
}

impl MaskDist {
    /// Bucket probabilities `p_i ∝ r^i` with `r` chosen by bisection so the
    /// distribution mean equals the preset's target.
    pub fn preset(preset: MaskPreset) -> Vec<f64> {
        let target = preset.target_mean();
        let (mut lo, mut hi) = (1e-9, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if buckets_mean(&geometric_buckets(mid, PRESET_BUCKETS)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        geometric_buckets(0.5 * (lo + hi), PRESET_BUCKETS)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MaskDist::Point(r) => {
                if !(0.0..=1.0).contains(r) {
                    return Err(Error::Workload(format!(
                        "point mask ratio {r} outside [0, 1]"
                    )));
                }
            }
            MaskDist::Buckets(p) => {
                if p.is_empty() {
                    return Err(Error::Workload("mask histogram has no buckets".into()));
                }
                if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::Workload(
                        "mask histogram has a negative or non-finite mass".into(),
                    ));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Workload(format!(
                        "mask histogram sums to {total}, not 1"
                    )));
                }
            }
            MaskDist::Preset(_) => {}
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            MaskDist::Point(r) => *r,
            MaskDist::Buckets(p) => buckets_mean(p),
            MaskDist::Preset(p) => buckets_mean(&MaskDist::preset(*p)),
        }
    }

    fn sampler(&self) -> Result<MaskSampler> {
        self.validate()?;
        Ok(match self {
            MaskDist::Point(r) => MaskSampler::Point(*r),
            MaskDist::Buckets(p) => MaskSampler::buckets(p)?,
            MaskDist::Preset(k) => MaskSampler::buckets(&MaskDist::preset(*k))?,
        })
    }
}

enum MaskSampler {
    Point(f64),
    Buckets { index: WeightedIndex<f64>, n: usize },
}

impl MaskSampler {
    fn buckets(p: &[f64]) -> Result<MaskSampler> {
        let index =
            WeightedIndex::new(p).map_err(|e| Error::Workload(format!("mask histogram: {e}")))?;
        Ok(MaskSampler::Buckets { index, n: p.len() })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            MaskSampler::Point(r) => *r,
            MaskSampler::Buckets { index, n } => {
                let i = index.sample(rng);
                let width = 1.0 / *n as f64;
                let hi = (i + 1) as f64 * width;
                // Upper-inclusive bucket: never a zero ratio.
                hi - rng.random::<f64>() * width
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub rps: f64,
    pub duration_s: f64,
    pub mask_dist: MaskDist,
    pub template_pool: usize,
    /// Zipf exponent of template popularity.
    pub zipf_s: f64,
    pub steps_total: u32,
    pub seed: u64,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rps.is_finite() && self.rps > 0.0) {
            return Err(Error::Workload(format!(
                "rps must be > 0, got {}",
                self.rps
            )));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(Error::Workload(format!(
                "duration must be >= 0, got {}",
                self.duration_s
            )));
        }
        if self.template_pool == 0 {
            return Err(Error::Workload(
                "template pool must hold at least one template".into(),
            ));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(Error::Workload(format!(
                "zipf exponent must be >= 0, got {}",
                self.zipf_s
            )));
        }
        if self.steps_total == 0 {
            return Err(Error::Workload("steps_total must be >= 1".into()));
        }
        self.mask_dist.validate()
    }

    pub fn horizon(&self) -> Nanos {
        Nanos::from_secs_f64(self.duration_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ns: Nanos,
    pub template_id: String,
    pub mask_ratio: f64,
    pub steps_total: u32,
}

pub fn template_name(rank: usize) -> String {
    format!("tmpl-{rank}")
}

/// Poisson arrivals over `[0, duration)` with sampled masks and templates.
pub fn generate(spec: &TraceSpec) -> Result<Vec<TraceRecord>> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let mut arrivals = streams.substream("trace-arrivals");
    let mut masks = streams.substream("trace-masks");
    let mut templates = streams.substream("trace-templates");
    let gaps = Exp::new(spec.rps).map_err(|e| Error::Workload(format!("arrival rate: {e}")))?;
    let sampler = spec.mask_dist.sampler()?;
    let zipf = Zipf::new(spec.template_pool as f64, spec.zipf_s)
        .map_err(|e| Error::Workload(format!("template popularity: {e}")))?;
    let mut out = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gaps.sample(&mut arrivals);
        if t >= spec.duration_s {
            break;
        }
        let rank = zipf.sample(&mut templates) as usize;
        out.push(TraceRecord {
            arrival_ns: Nanos::from_secs_f64(t),
            template_id: template_name(rank - 1),
            mask_ratio: sampler.sample(&mut masks),
            steps_total: spec.steps_total,
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::State(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

/// Parses one trace line; `line` is 1-based and only used in errors.
pub fn parse_trace_line(text: &str, line: usize) -> Result<TraceRecord> {
    let rec: TraceRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Parse { line, message };
    if !(0.0..=1.0).contains(&rec.mask_ratio) {
        return Err(bad(format!("mask_ratio {} outside [0, 1]", rec.mask_ratio)));
    }
    if rec.steps_total == 0 {
        return Err(bad("steps_total must be >= 1".into()));
    }
    if rec.template_id.is_empty() {
        return Err(bad("empty template_id".into()));
    }
    Ok(rec)
}

/// Reads a JSON Lines trace. Blank lines are skipped; arrivals must be
/// non-decreasing.
pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = parse_trace_line(&text, line_no)?;
        if let Some(prev) = out.last() {
            if rec.arrival_ns < prev.arrival_ns {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "arrival {} precedes previous {}",
                        rec.arrival_ns, prev.arrival_ns
                    ),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Hex SHA-256 of the trace's canonical JSON Lines form.
pub fn trace_digest(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(records, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}
