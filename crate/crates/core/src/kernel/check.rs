//! Masked-row equivalence sweep used by `kernel-check`.

use rand::seq::index::sample;
use serde::Serialize;

use super::block::{cached_bytes, forward_full, forward_masked_kvcache, forward_masked_ycache};
use super::golden::{seeded_input, seeded_weights};
use super::tensor::Tensor3;
use crate::error::Result;
use crate::rng::SeedStreams;
use crate::types::{MaskSpec, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Y,
    Kv,
}

#[derive(Debug, Clone)]
pub struct GridCase {
    pub seed: u64,
    pub grid: TokenGrid,
    pub mask: MaskSpec,
}

/// Cases over `B <= 2`, `L <= 64`, `H <= 32` with random bitmaps. Small `L`
/// sweeps every masked count; larger `L` samples a spread from `1` to `L`.
pub fn default_grid(seed: u64) -> Vec<GridCase> {
    let streams = SeedStreams::new(seed);
    let mut rng = streams.substream("kernel-grid");
    let mut cases = Vec::new();
    let mut case_seed = seed;
    for batch in [1, 2] {
        for tokens in [4usize, 8, 16, 32, 64] {
            for hidden in [4usize, 8, 16, 32] {
                let counts: Vec<usize> = if tokens <= 8 {
                    (1..=tokens).collect()
                } else {
                    let mut c = vec![
                        1,
                        2,
                        tokens / 4,
                        tokens / 2,
                        3 * tokens / 4,
                        tokens - 1,
                        tokens,
                    ];
                    c.dedup();
                    c
                };
                for k in counts {
                    let mut bits = vec![false; tokens];
                    for i in sample(&mut rng, tokens, k) {
                        bits[i] = true;
                    }
                    case_seed = case_seed.wrapping_add(1);
                    cases.push(GridCase {
                        seed: case_seed,
                        grid: TokenGrid {
                            batch,
                            tokens,
                            hidden,
                        },
                        mask: MaskSpec::from_bitmap(bits).expect("non-empty"),
                    });
                }
            }
        }
    }
    cases
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GridReport {
    pub cases: usize,
    pub max_rel_err_y: f64,
    pub max_rel_err_kv: f64,
    /// Unmasked rows of the Y-cache output equal the cache bit for bit.
    pub unmasked_rows_exact: bool,
    pub ycache_bytes: usize,
    pub kvcache_bytes: usize,
}

impl GridReport {
    pub fn max_rel_err(&self, mode: Option<CacheMode>) -> f64 {
        match mode {
            Some(CacheMode::Y) => self.max_rel_err_y,
            Some(CacheMode::Kv) => self.max_rel_err_kv,
            None => self.max_rel_err_y.max(self.max_rel_err_kv),
        }
    }
}

/// Largest `|got - want|` over masked rows, relative to the largest `|want|`.
pub fn masked_rel_err(got: &Tensor3, want: &Tensor3, mask: &MaskSpec) -> f64 {
    let rows = mask.masked_indices().unwrap_or_default();
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for b in 0..want.batch {
        for &t in &rows {
            for (g, w) in got.row(b, t).iter().zip(want.row(b, t)) {
                diff = diff.max(f64::from((g - w).abs()));
                scale = scale.max(f64::from(w.abs()));
            }
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Runs both cached modes against the dense pass. With `corrupt_cache`, the
/// cached keys of one unmasked token are perturbed before the K/V pass, which
/// must then show up as an error.
pub fn run_grid(cases: &[GridCase], corrupt_cache: bool) -> Result<GridReport> {
    let mut report = GridReport {
        unmasked_rows_exact: true,
        ..GridReport::default()
    };
    for case in cases {
        let w = seeded_weights(case.seed, case.grid.hidden);
        let x = seeded_input(case.seed, "kernel-input", case.grid);
        let (dense, mut acts) = forward_full(&x, &w)?;

        let y = forward_masked_ycache(&x, &case.mask, &acts, &w)?;
        report.max_rel_err_y = report
            .max_rel_err_y
            .max(masked_rel_err(&y, &dense, &case.mask));
        let bits = case.mask.bitmap().unwrap_or_default();
        for b in 0..x.batch {
            for (t, masked) in bits.iter().enumerate() {
                if !masked && y.row(b, t) != acts.y_full.row(b, t) {
                    report.unmasked_rows_exact = false;
                }
            }
        }

        if corrupt_cache {
            if let Some(t) = bits.iter().position(|m| !m) {
                for v in acts.k_full.row_mut(0, t) {
                    *v += 10.0;
                }
            }
        }
        let kv = forward_masked_kvcache(&x, &case.mask, &acts, &w)?;
        report.max_rel_err_kv = report
            .max_rel_err_kv
            .max(masked_rel_err(&kv, &dense, &case.mask));
        report.ycache_bytes += cached_bytes(&x, &case.mask, false);
        report.kvcache_bytes += cached_bytes(&x, &case.mask, true);
        report.cases += 1;
    }
    Ok(report)
}
