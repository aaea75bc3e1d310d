//! Value types shared by every module.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer nanoseconds. All simulated time and every planned duration uses
/// this so that replays are bit-exact.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub u64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);

    pub fn from_secs_f64(secs: f64) -> Nanos {
        if !secs.is_finite() || secs <= 0.0 {
            return Nanos::ZERO;
        }
        Nanos((secs * 1e9).round() as u64)
    }

    pub fn from_millis(ms: u64) -> Nanos {
        Nanos(ms * 1_000_000)
    }

    pub fn from_micros(us: u64) -> Nanos {
        Nanos(us * 1_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn saturating_sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0.saturating_sub(rhs.0))
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl Mul<u64> for Nanos {
    type Output = Nanos;
    fn mul(self, rhs: u64) -> Nanos {
        Nanos(self.0 * rhs)
    }
}

impl Sum for Nanos {
    fn sum<I: Iterator<Item = Nanos>>(iter: I) -> Nanos {
        iter.fold(Nanos::ZERO, Add::add)
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl From<std::time::Duration> for Nanos {
    fn from(d: std::time::Duration) -> Nanos {
        Nanos(d.as_nanos() as u64)
    }
}

/// Shape of the latent token tensor fed to a transformer block: batch,
/// tokens (latent height x width) and hidden size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub batch: usize,
    pub tokens: usize,
    pub hidden: usize,
}

impl TokenGrid {
    pub fn new(batch: usize, tokens: usize, hidden: usize) -> Result<TokenGrid> {
        if batch == 0 || tokens == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "token grid dimensions must be >= 1, got ({batch}, {tokens}, {hidden})"
            )));
        }
        Ok(TokenGrid {
            batch,
            tokens,
            hidden,
        })
    }

    /// Grid for a latent of `height x width` spatial positions.
    pub fn from_latent(
        batch: usize,
        height: usize,
        width: usize,
        hidden: usize,
    ) -> Result<TokenGrid> {
        TokenGrid::new(batch, height * width, hidden)
    }

    pub fn with_batch(self, batch: usize) -> TokenGrid {
        TokenGrid { batch, ..self }
    }

    pub fn elements(&self) -> usize {
        self.batch * self.tokens * self.hidden
    }
}

/// Which tokens of the latent a request edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bitmap: Option<Vec<bool>>,
}

impl MaskSpec {
    pub fn from_bitmap(bits: Vec<bool>) -> Result<MaskSpec> {
        if bits.is_empty() {
            return Err(Error::invalid("mask bitmap must not be empty"));
        }
        let masked = bits.iter().filter(|b| **b).count();
        Ok(MaskSpec {
            ratio: masked as f64 / bits.len() as f64,
            bitmap: Some(bits),
        })
    }

    /// Ratio-only mask, as carried by traces.
    pub fn from_ratio(ratio: f64) -> Result<MaskSpec> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
        }
        Ok(MaskSpec {
            ratio,
            bitmap: None,
        })
    }

    /// Bitmap masking the first `masked` of `tokens` positions.
    pub fn leading(tokens: usize, masked: usize) -> Result<MaskSpec> {
        if masked > tokens {
            return Err(Error::invalid(format!(
                "cannot mask {masked} of {tokens} tokens"
            )));
        }
        MaskSpec::from_bitmap((0..tokens).map(|i| i < masked).collect())
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn bitmap(&self) -> Option<&[bool]> {
        self.bitmap.as_deref()
    }

    /// Number of masked tokens out of `tokens`. Ratio-only masks are rounded
    /// to whole tokens.
    pub fn masked_tokens(&self, tokens: usize) -> usize {
        match &self.bitmap {
            Some(bits) if bits.len() == tokens => bits.iter().filter(|b| **b).count(),
            _ => masked_tokens_for_ratio(self.ratio, tokens),
        }
    }

    pub fn masked_indices(&self) -> Option<Vec<usize>> {
        self.bitmap
            .as_ref()
            .map(|bits| (0..bits.len()).filter(|&i| bits[i]).collect())
    }
}

pub(crate) fn masked_tokens_for_ratio(ratio: f64, tokens: usize) -> usize {
    ((ratio.clamp(0.0, 1.0) * tokens as f64).round() as usize).min(tokens)
}

pub type RequestId = u64;

/// Request lifecycle stages, in the order their timestamps must appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Enqueue,
    PreStart,
    PreEnd,
    DenoiseStart,
    DenoiseEnd,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub template_id: String,
    pub mask: MaskSpec,
    pub steps_total: u32,
    pub arrival: Nanos,
    pub t_enqueue: Option<Nanos>,
    pub t_prestart: Option<Nanos>,
    pub t_pre_end: Option<Nanos>,
    pub t_denoise_start: Option<Nanos>,
    pub t_denoise_end: Option<Nanos>,
    pub t_done: Option<Nanos>,
    pub steps_done: u32,
}

impl RequestRecord {
    pub fn new(
        id: RequestId,
        template_id: impl Into<String>,
        mask: MaskSpec,
        steps_total: u32,
        arrival: Nanos,
    ) -> Result<RequestRecord> {
        if steps_total == 0 {
            return Err(Error::invalid("steps_total must be >= 1"));
        }
        Ok(RequestRecord {
            id,
            template_id: template_id.into(),
            mask,
            steps_total,
            arrival,
            t_enqueue: None,
            t_prestart: None,
            t_pre_end: None,
            t_denoise_start: None,
            t_denoise_end: None,
            t_done: None,
            steps_done: 0,
        })
    }

    fn slot(&mut self, phase: Phase) -> &mut Option<Nanos> {
        match phase {
            Phase::Enqueue => &mut self.t_enqueue,
            Phase::PreStart => &mut self.t_prestart,
            Phase::PreEnd => &mut self.t_pre_end,
            Phase::DenoiseStart => &mut self.t_denoise_start,
            Phase::DenoiseEnd => &mut self.t_denoise_end,
            Phase::Done => &mut self.t_done,
        }
    }

    pub fn stamp_of(&self, phase: Phase) -> Option<Nanos> {
        match phase {
            Phase::Enqueue => self.t_enqueue,
            Phase::PreStart => self.t_prestart,
            Phase::PreEnd => self.t_pre_end,
            Phase::DenoiseStart => self.t_denoise_start,
            Phase::DenoiseEnd => self.t_denoise_end,
            Phase::Done => self.t_done,
        }
    }

    /// Records `phase` at `t`. Fails if the stamp is already set or would
    /// precede an earlier phase.
    pub fn stamp(&mut self, phase: Phase, t: Nanos) -> Result<()> {
        let floor = [
            Phase::Enqueue,
            Phase::PreStart,
            Phase::PreEnd,
            Phase::DenoiseStart,
            Phase::DenoiseEnd,
        ]
        .into_iter()
        .filter(|p| *p < phase)
        .filter_map(|p| self.stamp_of(p))
        .max()
        .unwrap_or(self.arrival);
        if t < floor {
            return Err(Error::State(format!(
                "request {}: {phase:?} at {t} precedes earlier phase at {floor}",
                self.id
            )));
        }
        let slot = self.slot(phase);
        if slot.is_some() {
            return Err(Error::State(format!("{phase:?} already stamped")));
        }
        *slot = Some(t);
        Ok(())
    }

    pub fn advance_step(&mut self) -> Result<()> {
        if self.steps_done >= self.steps_total {
            return Err(Error::State(format!(
                "request {} already finished {} steps",
                self.id, self.steps_total
            )));
        }
        self.steps_done += 1;
        Ok(())
    }

    pub fn remaining_steps(&self) -> u32 {
        self.steps_total - self.steps_done
    }

    pub fn is_finished(&self) -> bool {
        self.steps_done == self.steps_total
    }
}
