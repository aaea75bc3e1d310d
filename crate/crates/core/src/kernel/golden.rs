//! Reference digests of seeded kernel runs, stored as CSV
//! `seed,batch,tokens,hidden,mask_ratio,checksum`.

use std::io::{Read, Write};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::block::{forward_full, forward_masked_ycache, BlockWeights};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::types::{MaskSpec, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenRow {
    pub seed: u64,
    pub batch: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub mask_ratio: f64,
    pub checksum: f64,
}

/// Position-weighted sum of the output, accumulated in `f64`. Weighting by
/// position makes the digest sensitive to row permutations.
pub fn checksum(y: &Tensor3) -> f64 {
    y.data
        .iter()
        .enumerate()
        .map(|(i, v)| f64::from(*v) * (1.0 + (i % 7) as f64 / 7.0))
        .sum()
}

/// Deterministic input drawn from `uniform(-1, 1)` on the labelled substream.
pub fn seeded_input(seed: u64, label: &str, grid: TokenGrid) -> Tensor3 {
    let mut rng = SeedStreams::new(seed).substream(label);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let data = (0..grid.elements())
        .map(|_| dist.sample(&mut rng))
        .collect();
    Tensor3::from_vec(grid, data).expect("sized from grid")
}

pub fn seeded_weights(seed: u64, hidden: usize) -> BlockWeights {
    let mut rng = SeedStreams::new(seed).substream("kernel-weights");
    BlockWeights::random(hidden, &mut rng)
}

/// Runs one golden case. `mask_ratio == 1` is a dense pass; otherwise the
/// leading `mask_ratio * tokens` tokens are recomputed against a cache
/// produced from a different input.
pub fn run_case(seed: u64, grid: TokenGrid, mask_ratio: f64) -> Result<f64> {
    let masked = (mask_ratio * grid.tokens as f64).round() as usize;
    if (masked as f64 / grid.tokens as f64 - mask_ratio).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "mask ratio {mask_ratio} is not a whole number of {} tokens",
            grid.tokens
        )));
    }
    let w = seeded_weights(seed, grid.hidden);
    let x = seeded_input(seed, "kernel-input", grid);
    if masked == grid.tokens {
        return Ok(checksum(&forward_full(&x, &w)?.0));
    }
    let template = seeded_input(seed, "kernel-template", grid);
    let (_, acts) = forward_full(&template, &w)?;
    let mask = MaskSpec::leading(grid.tokens, masked)?;
    Ok(checksum(&forward_masked_ycache(&x, &mask, &acts, &w)?))
}

pub fn default_cases() -> Vec<(u64, TokenGrid, f64)> {
    let g = |b, l, h| TokenGrid::new(b, l, h).expect("non-zero");
    vec![
        (7, g(1, 16, 8), 1.0),
        (7, g(1, 16, 8), 0.25),
        (11, g(2, 32, 16), 0.5),
        (3, g(1, 64, 32), 0.125),
        (3, g(2, 64, 32), 1.0),
    ]
}

pub fn generate(cases: &[(u64, TokenGrid, f64)]) -> Result<Vec<GoldenRow>> {
    cases
        .iter()
        .map(|&(seed, grid, m)| {
            Ok(GoldenRow {
                seed,
                batch: grid.batch,
                tokens: grid.tokens,
                hidden: grid.hidden,
                mask_ratio: m,
                checksum: run_case(seed, grid, m)?,
            })
        })
        .collect()
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<GoldenRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: GoldenRow = rec.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if row.batch == 0 || row.tokens == 0 || row.hidden == 0 {
            return Err(Error::Parse {
                line: i + 2,
                message: "dimensions must be >= 1".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(writer: W, rows: &[GoldenRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv write: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::invalid(format!("csv flush: {e}")))?;
    Ok(())
}

/// Recomputes every row and returns the largest absolute checksum drift.
pub fn verify(rows: &[GoldenRow]) -> Result<f64> {
    let mut worst = 0.0f64;
    for r in rows {
        let grid = TokenGrid::new(r.batch, r.tokens, r.hidden)?;
        let got = run_case(r.seed, grid, r.mask_ratio)?;
        worst = worst.max((got - r.checksum).abs());
    }
    Ok(worst)
}
