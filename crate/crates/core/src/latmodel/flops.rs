use serde::{Deserialize, Serialize};

use crate::types::{masked_tokens_for_ratio, TokenGrid};

/// Activations are cached at compute precision.
pub const BYTES_PER_ELEM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheVariant {
    /// Block output `Y` for unmasked tokens.
    Y,
    /// Keys and values for unmasked tokens.
    Kv,
}

/// Multiply-add counts (2 FLOPs each) for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// `(X W_1) W_2`
    pub ff_flops: u64,
    /// Query projection `X W_q`.
    pub q_proj_flops: u64,
    /// Key and value projections; always over every token.
    pub kv_proj_flops: u64,
    pub out_proj_flops: u64,
    /// Sum of the four projections.
    pub proj_flops: u64,
    /// `Q Kᵀ / √H`
    pub score_flops: u64,
    /// `A V`
    pub av_flops: u64,
    /// Scores plus `A V`.
    pub attn_flops: u64,
    pub total_flops: u64,
    pub cache_elems: u64,
    pub cache_bytes: u64,
}

/// FLOPs of one block for a batch whose every item masks a fraction `m` of
/// its tokens. With `cached`, only masked rows are projected into queries,
/// attended and fed forward; without it every token is.
pub fn flops_block(grid: TokenGrid, m: f64, cached: bool) -> FlopReport {
    let b = grid.batch as u64;
    let l = grid.tokens as u64;
    let h = grid.hidden as u64;
    let masked = masked_tokens_for_ratio(m, grid.tokens) as u64;
    let rows = if cached { masked } else { l };

    let ff_flops = 16 * b * rows * h * h;
    let q_proj_flops = 2 * b * rows * h * h;
    let kv_proj_flops = 4 * b * l * h * h;
    let out_proj_flops = 2 * b * rows * h * h;
    let proj_flops = q_proj_flops + kv_proj_flops + out_proj_flops;
    let score_flops = 2 * b * rows * l * h;
    let av_flops = 2 * b * rows * l * h;
    let attn_flops = score_flops + av_flops;
    let cache_elems = b * (l - masked) * h;
    FlopReport {
        ff_flops,
        q_proj_flops,
        kv_proj_flops,
        out_proj_flops,
        proj_flops,
        score_flops,
        av_flops,
        attn_flops,
        total_flops: ff_flops + proj_flops + attn_flops,
        cache_elems,
        cache_bytes: cache_elems * BYTES_PER_ELEM,
    }
}

/// Bytes a request masking `m` loads per block for the given cache variant.
pub fn cache_bytes(grid: TokenGrid, m: f64, variant: CacheVariant) -> u64 {
    let y = flops_block(grid, m, true).cache_bytes;
    match variant {
        CacheVariant::Y => y,
        CacheVariant::Kv => 2 * y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(b: usize, l: usize, h: usize) -> TokenGrid {
        TokenGrid::new(b, l, h).unwrap()
    }

    #[test]
    fn full_mask_matches_uncached() {
        let g = grid(2, 64, 16);
        assert_eq!(flops_block(g, 1.0, true), flops_block(g, 1.0, false));
    }

    #[test]
    fn ff_speedup_is_one_over_m() {
        let g = grid(1, 4096, 1024);
        let c = flops_block(g, 0.25, true);
        let u = flops_block(g, 0.25, false);
        assert_eq!(c.ff_flops as f64 / u.ff_flops as f64, 0.25);
        assert_eq!(u.ff_flops / c.ff_flops, 4);
    }

    #[test]
    fn cache_shape_counts_unmasked_tokens() {
        let r = flops_block(grid(1, 4096, 1024), 0.25, true);
        assert_eq!(r.cache_elems, 3072 * 1024);
        assert_eq!(r.cache_bytes, 3072 * 1024 * 4);
        assert_eq!(
            cache_bytes(grid(1, 4096, 1024), 0.25, CacheVariant::Kv),
            2 * r.cache_bytes
        );
    }

    #[test]
    fn totals_add_up() {
        let r = flops_block(grid(3, 100, 12), 0.37, true);
        assert_eq!(r.total_flops, r.ff_flops + r.proj_flops + r.attn_flops);
        assert_eq!(
            r.proj_flops,
            r.q_proj_flops + r.kv_proj_flops + r.out_proj_flops
        );
        let u = flops_block(grid(3, 100, 12), 0.37, false);
        assert_eq!(u.proj_flops, 8 * 3 * 100 * 144);
    }
}
