use super::block::{forward_full, forward_masked_ycache, BlockActivations, BlockWeights};
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::planner::BlockPlan;
use crate::types::MaskSpec;

/// Runs the blocks in sequence, using the Y-cache mask-aware path for every
/// block the plan marks as cached and the dense path otherwise.
pub fn model_forward(
    x: &Tensor3,
    mask: &MaskSpec,
    weights: &[BlockWeights],
    plan: &BlockPlan,
    cache: &[Option<BlockActivations>],
) -> Result<Tensor3> {
    let n = weights.len();
    if plan.use_cache.len() != n {
        return Err(Error::invalid(format!(
            "plan covers {} blocks, model has {n}",
            plan.use_cache.len()
        )));
    }
    if cache.len() != n {
        return Err(Error::invalid(format!(
            "cache covers {} blocks, model has {n}",
            cache.len()
        )));
    }
    let mut h = x.clone();
    for (i, w) in weights.iter().enumerate() {
        h = if plan.use_cache[i] {
            let acts = cache[i]
                .as_ref()
                .ok_or_else(|| Error::CacheMiss(format!("no cached activations for block {i}")))?;
            forward_masked_ycache(&h, mask, acts, w)?
        } else {
            forward_full(&h, w)?.0
        };
    }
    Ok(h)
}

/// Dense pass over all blocks, returning each block's activations tagged
/// with `step` for later reuse.
pub fn model_forward_full_with_cache(
    x: &Tensor3,
    weights: &[BlockWeights],
    step: u32,
) -> Result<(Tensor3, Vec<BlockActivations>)> {
    let mut h = x.clone();
    let mut acts = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let (y, a) = forward_full(&h, w)?;
        acts.push(a.at(step, i));
        h = y;
    }
    Ok((h, acts))
}
