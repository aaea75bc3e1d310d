//! One transformer block: single-head attention, output projection and a
//! two-layer feed-forward, with no residuals or normalisation.
//!
//! `Y = ((softmax(Q Kᵀ / √H) V) W_o W_1) W_2` with `Q = X W_q`, `K = X W_k`,
//! `V = X W_v`. Apart from the attention mixing, every operation is
//! row-local, which is what lets masked tokens be recomputed alone.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::{matmul, Matrix, Tensor3};
use crate::error::{Error, Result};
use crate::types::MaskSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `H x 4H`
    pub w_ff1: Matrix,
    /// `4H x H`
    pub w_ff2: Matrix,
}

impl BlockWeights {
    /// Weights drawn from `uniform(-1/√H, 1/√H)`.
    pub fn random<R: Rng>(hidden: usize, rng: &mut R) -> BlockWeights {
        let bound = 1.0 / (hidden as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut draw = |rows: usize, cols: usize| Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        };
        BlockWeights {
            w_q: draw(hidden, hidden),
            w_k: draw(hidden, hidden),
            w_v: draw(hidden, hidden),
            w_o: draw(hidden, hidden),
            w_ff1: draw(hidden, 4 * hidden),
            w_ff2: draw(4 * hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let square = [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ];
        for (name, m) in square {
            if m.rows != h || m.cols != h {
                return Err(Error::invalid(format!(
                    "{name} is {}x{}, expected {h}x{h}",
                    m.rows, m.cols
                )));
            }
        }
        if self.w_ff1.rows != h || self.w_ff1.cols != 4 * h {
            return Err(Error::invalid("w_ff1 must be H x 4H"));
        }
        if self.w_ff2.rows != 4 * h || self.w_ff2.cols != h {
            return Err(Error::invalid("w_ff2 must be 4H x H"));
        }
        let all = [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_ff1,
            &self.w_ff2,
        ];
        if !all.iter().all(|m| m.is_finite()) {
            return Err(Error::invalid("weights contain non-finite entries"));
        }
        Ok(())
    }
}

/// Per-block activations kept for reuse by later requests on the same
/// template: the block output `Y` and the attention keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations {
    pub y_full: Tensor3,
    pub k_full: Tensor3,
    pub v_full: Tensor3,
    pub step: u32,
    pub block_index: usize,
}

impl BlockActivations {
    pub fn at(mut self, step: u32, block_index: usize) -> BlockActivations {
        self.step = step;
        self.block_index = block_index;
        self
    }
}

fn check_input(x: &Tensor3, w: &BlockWeights) -> Result<()> {
    w.validate()?;
    if x.hidden != w.hidden() {
        return Err(Error::invalid(format!(
            "input hidden size {} does not match weights {}",
            x.hidden,
            w.hidden()
        )));
    }
    if x.data.len() != x.batch * x.tokens * x.hidden || x.data.is_empty() {
        return Err(Error::invalid("input tensor has inconsistent shape"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("input contains non-finite values"));
    }
    Ok(())
}

fn gather_rows(item: &[f32], hidden: usize, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * hidden);
    for &r in rows {
        out.extend_from_slice(&item[r * hidden..(r + 1) * hidden]);
    }
    out
}

/// Attention output `softmax(q kᵀ/√H) v` for each query row.
fn attend(q: &[f32], n_q: usize, k: &[f32], v: &[f32], n_kv: usize, hidden: usize) -> Vec<f32> {
    let scale = 1.0 / (hidden as f32).sqrt();
    let mut out = vec![0.0f32; n_q * hidden];
    let mut scores = vec![0.0f32; n_kv];
    for i in 0..n_q {
        let qi = &q[i * hidden..(i + 1) * hidden];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * hidden..(j + 1) * hidden];
            let mut dot = 0.0f32;
            for (a, b) in qi.iter().zip(kj) {
                dot += a * b;
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += f64::from(*s);
        }
        let oi = &mut out[i * hidden..(i + 1) * hidden];
        for (j, s) in scores.iter().enumerate() {
            let a = (f64::from(*s) / sum) as f32;
            let vj = &v[j * hidden..(j + 1) * hidden];
            for (o, vv) in oi.iter_mut().zip(vj) {
                *o += a * vv;
            }
        }
    }
    out
}

/// Output projection and feed-forward for `n` attention rows.
fn project_out(o: &[f32], n: usize, w: &BlockWeights) -> Vec<f32> {
    let p = matmul(o, n, &w.w_o);
    let h1 = matmul(&p, n, &w.w_ff1);
    matmul(&h1, n, &w.w_ff2)
}

fn finite_or_err(t: &Tensor3) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("block output is not finite".into()))
    }
}

/// Dense forward over every token. Returns the output and the activations a
/// later masked request would reuse.
pub fn forward_full(x: &Tensor3, w: &BlockWeights) -> Result<(Tensor3, BlockActivations)> {
    check_input(x, w)?;
    let grid = x.grid();
    let (l, h) = (grid.tokens, grid.hidden);
    let mut y = Tensor3::zeros(grid);
    let mut k_all = Tensor3::zeros(grid);
    let mut v_all = Tensor3::zeros(grid);
    for b in 0..grid.batch {
        let xb = x.item(b);
        let q = matmul(xb, l, &w.w_q);
        let k = matmul(xb, l, &w.w_k);
        let v = matmul(xb, l, &w.w_v);
        let o = attend(&q, l, &k, &v, l, h);
        let yb = project_out(&o, l, w);
        let n = l * h;
        y.data[b * n..(b + 1) * n].copy_from_slice(&yb);
        k_all.data[b * n..(b + 1) * n].copy_from_slice(&k);
        v_all.data[b * n..(b + 1) * n].copy_from_slice(&v);
    }
    finite_or_err(&y)?;
    let acts = BlockActivations {
        y_full: y.clone(),
        k_full: k_all,
        v_full: v_all,
        step: 0,
        block_index: 0,
    };
    Ok((y, acts))
}

fn masked_rows(x: &Tensor3, mask: &MaskSpec) -> Result<Vec<usize>> {
    let bits = mask
        .bitmap()
        .ok_or_else(|| Error::invalid("mask-aware forward needs a token bitmap"))?;
    if bits.len() != x.tokens {
        return Err(Error::invalid(format!(
            "mask covers {} tokens, input has {}",
            bits.len(),
            x.tokens
        )));
    }
    Ok((0..bits.len()).filter(|&i| bits[i]).collect())
}

fn check_cache_shape(name: &str, cached: &Tensor3, x: &Tensor3) -> Result<()> {
    if cached.grid() != x.grid() || cached.data.len() != x.data.len() {
        return Err(Error::CacheIncompatible(format!(
            "cached {name} is {:?}, input is {:?}",
            cached.grid(),
            x.grid()
        )));
    }
    Ok(())
}

/// Mask-aware forward reusing cached block outputs.
///
/// Queries are projected only for masked tokens; keys and values come from
/// the full input. Unmasked output rows are copied from `cached.y_full`.
pub fn forward_masked_ycache(
    x: &Tensor3,
    mask: &MaskSpec,
    cached: &BlockActivations,
    w: &BlockWeights,
) -> Result<Tensor3> {
    check_input(x, w)?;
    let rows = masked_rows(x, mask)?;
    check_cache_shape("y", &cached.y_full, x)?;
    let mut y = cached.y_full.clone();
    if rows.is_empty() {
        return Ok(y);
    }
    let (l, h) = (x.tokens, x.hidden);
    for b in 0..x.batch {
        let xb = x.item(b);
        let xm = gather_rows(xb, h, &rows);
        let q = matmul(&xm, rows.len(), &w.w_q);
        let k = matmul(xb, l, &w.w_k);
        let v = matmul(xb, l, &w.w_v);
        let o = attend(&q, rows.len(), &k, &v, l, h);
        let ym = project_out(&o, rows.len(), w);
        for (i, &t) in rows.iter().enumerate() {
            y.row_mut(b, t).copy_from_slice(&ym[i * h..(i + 1) * h]);
        }
    }
    finite_or_err(&y)?;
    Ok(y)
}

/// Mask-aware forward reusing cached keys and values.
///
/// Only masked tokens are projected (Q, K and V); unmasked K/V rows come
/// from the cache, as do unmasked output rows.
pub fn forward_masked_kvcache(
    x: &Tensor3,
    mask: &MaskSpec,
    cached: &BlockActivations,
    w: &BlockWeights,
) -> Result<Tensor3> {
    check_input(x, w)?;
    let rows = masked_rows(x, mask)?;
    check_cache_shape("y", &cached.y_full, x)?;
    check_cache_shape("k", &cached.k_full, x)?;
    check_cache_shape("v", &cached.v_full, x)?;
    let mut y = cached.y_full.clone();
    if rows.is_empty() {
        return Ok(y);
    }
    let (l, h) = (x.tokens, x.hidden);
    for b in 0..x.batch {
        let xm = gather_rows(x.item(b), h, &rows);
        let q = matmul(&xm, rows.len(), &w.w_q);
        let km = matmul(&xm, rows.len(), &w.w_k);
        let vm = matmul(&xm, rows.len(), &w.w_v);
        let mut k = cached.k_full.item(b).to_vec();
        let mut v = cached.v_full.item(b).to_vec();
        for (i, &t) in rows.iter().enumerate() {
            k[t * h..(t + 1) * h].copy_from_slice(&km[i * h..(i + 1) * h]);
            v[t * h..(t + 1) * h].copy_from_slice(&vm[i * h..(i + 1) * h]);
        }
        let o = attend(&q, rows.len(), &k, &v, l, h);
        let ym = project_out(&o, rows.len(), w);
        for (i, &t) in rows.iter().enumerate() {
            y.row_mut(b, t).copy_from_slice(&ym[i * h..(i + 1) * h]);
        }
    }
    finite_or_err(&y)?;
    Ok(y)
}

/// Bytes of cached activations a masked request loads for one block: the
/// unmasked rows of `Y`, or of both `K` and `V` for the K/V variant.
pub fn cached_bytes(x: &Tensor3, mask: &MaskSpec, kv: bool) -> usize {
    let unmasked = x.tokens - mask.masked_tokens(x.tokens);
    let per = x.batch * unmasked * x.hidden * std::mem::size_of::<f32>();
    if kv {
        2 * per
    } else {
        per
    }
}
