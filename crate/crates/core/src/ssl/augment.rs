use rand::Rng;

use crate::nn::Tensor;

/// Weak augmentation for feature vectors: bounded additive uniform noise,
/// optionally followed by a one-position circular shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakAugment {
    /// Noise half-width `s`: every coordinate moves by at most `s`.
    pub strength: f64,
    /// Probability of rotating a row right by one position.
    pub shift_prob: f64,
}

impl WeakAugment {
    pub const IDENTITY: WeakAugment = WeakAugment {
        strength: 0.0,
        shift_prob: 0.0,
    };

    pub fn noise(strength: f64) -> Self {
        Self {
            strength,
            shift_prob: 0.0,
        }
    }
}

/// Applies [`WeakAugment`] row by row. With zero strength and zero shift
/// probability it returns the input unchanged and draws nothing from `rng`.
pub fn weak_augment<R: Rng + ?Sized>(x: &Tensor, aug: &WeakAugment, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    if aug.strength <= 0.0 && aug.shift_prob <= 0.0 {
        return out;
    }
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if aug.strength > 0.0 {
            for v in row.iter_mut() {
                *v += rng.random_range(-aug.strength..=aug.strength);
            }
        }
        if aug.shift_prob > 0.0 && rng.random_bool(aug.shift_prob.min(1.0)) {
            row.rotate_right(1);
        }
    }
    out
}
