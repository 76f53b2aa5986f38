//! SpecAugment-style feature masking and inverted-scaling dropout masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng;

/// Masking policy over a T x F feature matrix. Mask widths are sampled
/// uniformly in `0..=max_*_width` unless `fixed_width` is set, in which case
/// the maximum width is always used. Widths are clamped to the actual tensor
/// dimensions at apply time; time-mask width is additionally capped at T/2 so
/// short utterances keep a majority of frames visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub fixed_width: bool,
}

impl AugmentPolicy {
    /// No-op policy.
    pub fn zero() -> Self {
        AugmentPolicy {
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 0,
            max_time_width: 0,
            fixed_width: false,
        }
    }

    /// Default policy for feature dimension `f`: one frequency mask covering
    /// the same fraction of bins as 13-of-80, two time masks of up to 12
    /// frames.
    pub fn default_for_dims(f: usize) -> Self {
        AugmentPolicy {
            n_freq_masks: 1,
            max_freq_width: ((f as f64) * 13.0 / 80.0).round() as usize,
            n_time_masks: 2,
            max_time_width: 12,
            fixed_width: false,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.n_freq_masks == 0 && self.n_time_masks == 0
    }
}

/// Which activation blocks a dropout mask applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutScope {
    pub encoder: bool,
    pub prediction: bool,
    pub joint: bool,
}

impl DropoutScope {
    pub fn all() -> Self {
        DropoutScope {
            encoder: true,
            prediction: true,
            joint: true,
        }
    }

    pub fn encoder_only() -> Self {
        DropoutScope {
            encoder: true,
            prediction: false,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    /// Drop probability in [0, 1).
    pub rate: f64,
    pub scope: DropoutScope,
}

impl DropoutPolicy {
    pub fn new(rate: f64, scope: DropoutScope) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        DropoutPolicy { rate, scope }
    }
}

/// Apply frequency and time masks to a T x F feature matrix. Unmasked cells
/// are bit-identical to the input; masked cells are exactly zero. Fully
/// deterministic given `seed`.
pub fn spec_augment(features: &Tensor, policy: &AugmentPolicy, seed: u64) -> Tensor {
    let (t_len, f_len) = (features.rows(), features.cols());
    let mut out = features.clone();
    if policy.is_zero() || t_len == 0 || f_len == 0 {
        return out;
    }
    let mut rng = rng::from_seed_word(seed);

    let max_f = policy.max_freq_width.min(f_len);
    for _ in 0..policy.n_freq_masks {
        let w = sample_width(&mut rng, max_f, policy.fixed_width);
        let start = if w >= f_len {
            0
        } else {
            rng.gen_range(0..=f_len - w)
        };
        for r in 0..t_len {
            for c in start..start + w {
                out.row_mut(r)[c] = 0.0;
            }
        }
    }

    let max_t = policy.max_time_width.min(t_len / 2).min(t_len);
    for _ in 0..policy.n_time_masks {
        let w = sample_width(&mut rng, max_t, policy.fixed_width);
        let start = if w >= t_len {
            0
        } else {
            rng.gen_range(0..=t_len - w)
        };
        for r in start..start + w {
            for c in 0..f_len {
                out.row_mut(r)[c] = 0.0;
            }
        }
    }
    out
}

/// Inverted-scaling dropout mask: cells are 0 with probability `rate`, else
/// 1/(1-rate), so the mask has unit expectation. Deterministic given `seed`.
pub fn dropout_mask(shape: &[usize], policy: &DropoutPolicy, seed: u64) -> Tensor {
    let mut out = Tensor::zeros(shape);
    if policy.rate == 0.0 {
        return Tensor::full(shape, 1.0);
    }
    let keep_scale = 1.0 / (1.0 - policy.rate);
    let mut rng = rng::from_seed_word(seed);
    for v in out.data_mut() {
        *v = if rng.gen::<f64>() < policy.rate {
            0.0
        } else {
            keep_scale
        };
    }
    out
}

fn sample_width(rng: &mut impl Rng, max: usize, fixed: bool) -> usize {
    if max == 0 {
        0
    } else if fixed {
        max
    } else {
        rng.gen_range(0..=max)
    }
}
