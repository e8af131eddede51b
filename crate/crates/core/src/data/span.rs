//! Span-masking corruption for denoising pre-training.

use serde::{Deserialize, Serialize};

use super::vocab::{MASK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpanMaskSpec {
    pub window: usize,
    pub mask_frac: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
}

impl Default for SpanMaskSpec {
    fn default() -> Self {
        SpanMaskSpec {
            window: 64,
            mask_frac: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
        }
    }
}

impl SpanMaskSpec {
    /// `floor(mask_frac × window)`: 9 for the default 64-token window.
    pub fn span_len(&self) -> usize {
        (self.mask_frac * self.window as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_frac, self.replace_mask, self.replace_random, self.keep];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Spec("fractions must lie in [0, 1]".into()));
        }
        let sum = self.replace_mask + self.replace_random + self.keep;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("replacement fractions sum to {sum}, not 1")));
        }
        let span = self.span_len();
        if span == 0 {
            return Err(Error::Spec("span length is zero; nothing would be masked".into()));
        }
        if self.window < span {
            return Err(Error::Spec(format!(
                "window {} shorter than span {span}",
                self.window
            )));
        }
        Ok(())
    }
}

/// What happened to one masked source token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanMasked {
    pub source: Vec<usize>,
    /// Masked spans concatenated in source order.
    pub target: Vec<usize>,
    /// Start index of each span in the source.
    pub offsets: Vec<usize>,
    /// One entry per target token.
    pub replacements: Vec<Replacement>,
}

/// Masks one contiguous span in every full window of `tokens`. A trailing
/// partial window is left untouched. Random replacements draw uniformly from
/// the non-special ids below `vocab_size`.
pub fn apply_span_mask(
    tokens: &[usize],
    spec: &SpanMaskSpec,
    vocab_size: usize,
    rng: &mut RngStream,
) -> Result<SpanMasked> {
    spec.validate()?;
    if tokens.len() < spec.window {
        return Err(Error::Spec(format!(
            "{} tokens do not fill a window of {}",
            tokens.len(),
            spec.window
        )));
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::Spec("no regular tokens to draw replacements from".into()));
    }
    let span = spec.span_len();
    let mut out = SpanMasked {
        source: tokens.to_vec(),
        target: Vec::new(),
        offsets: Vec::new(),
        replacements: Vec::new(),
    };
    for w in 0..tokens.len() / spec.window {
        let start = w * spec.window + rng.below((spec.window - span + 1) as u64) as usize;
        out.offsets.push(start);
        for i in start..start + span {
            out.target.push(tokens[i]);
            let r = rng.uniform();
            let rep = if r < spec.replace_mask {
                out.source[i] = MASK;
                Replacement::Mask
            } else if r < spec.replace_mask + spec.replace_random {
                out.source[i] = NUM_SPECIALS + rng.below((vocab_size - NUM_SPECIALS) as u64) as usize;
                Replacement::Random
            } else {
                Replacement::Keep
            };
            out.replacements.push(rep);
        }
    }
    Ok(out)
}

/// Splices the target spans back into `source` at `offsets`.
pub fn reconstruct(masked: &SpanMasked, span_len: usize) -> Vec<usize> {
    let mut out = masked.source.clone();
    for (k, &off) in masked.offsets.iter().enumerate() {
        out[off..off + span_len].copy_from_slice(&masked.target[k * span_len..(k + 1) * span_len]);
    }
    out
}
