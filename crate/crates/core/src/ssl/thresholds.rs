//! Per-satellite, per-class adaptive pseudo-label thresholds.
//!
//! With `theta_i(m)` the labelled plus pseudo-labelled count of class `m` on
//! satellite `i`:
//!
//! ```text
//! q(m)    = sum_i theta_i(m) / sum_i sum_m theta_i(m)     global class distribution
//! r_i     = sum_m theta_i(m) / sum_i sum_m theta_i(m)     satellite's share of the data
//! tau_i(m) = r_i * (q(m) + tau - std_m(q)),  capped at tau_h
//! ```
//!
//! `std_m` is the population standard deviation over classes. Results are
//! also floored at [`THRESHOLD_FLOOR`] so a class can always reject a sample.

use crate::{Error, Result};

/// Lower clamp applied to every emitted threshold.
pub const THRESHOLD_FLOOR: f64 = 0.01;

/// Labelled and pseudo-labelled sample counts per class on one satellite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    pub labeled: Vec<u64>,
    pub pseudo: Vec<u64>,
}

impl ClassCounts {
    pub fn zeros(classes: usize) -> Self {
        Self {
            labeled: vec![0; classes],
            pseudo: vec![0; classes],
        }
    }

    pub fn new(labeled: Vec<u64>, pseudo: Vec<u64>) -> Result<Self> {
        if labeled.len() != pseudo.len() {
            return Err(Error::dim(
                "labelled and pseudo counts cover different class sets",
            ));
        }
        Ok(Self { labeled, pseudo })
    }

    pub fn classes(&self) -> usize {
        self.labeled.len()
    }

    /// `theta(m) = labelled(m) + pseudo(m)`.
    pub fn total(&self) -> Vec<u64> {
        self.labeled
            .iter()
            .zip(&self.pseudo)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Bytes needed to report these counts (4 bytes per class).
    pub fn wire_bytes(&self) -> u64 {
        4 * self.classes() as u64
    }
}

/// Thresholds for every satellite (outer) and class (inner).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub tau: Vec<Vec<f64>>,
    pub base: f64,
    pub cap: f64,
}

impl ThresholdTable {
    /// Every threshold equal to `base`, clipped into `[floor, cap]`.
    pub fn constant(satellites: usize, classes: usize, base: f64, cap: f64) -> Self {
        Self {
            tau: vec![vec![clamp(base, cap); classes]; satellites],
            base,
            cap,
        }
    }

    pub fn for_satellite(&self, i: usize) -> &[f64] {
        &self.tau[i]
    }
}

/// Which terms of the threshold formula are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdPolicy {
    /// The full class- and quantity-aware formula.
    Adaptive,
    /// Constant `tau` for every satellite and class.
    Fixed,
    /// Quantity term only: `r_i * tau`.
    NoClassTerm,
    /// Class term only: `q(m) + tau - std`.
    NoQuantityTerm,
}

fn clamp(raw: f64, cap: f64) -> f64 {
    raw.min(cap).max(THRESHOLD_FLOOR)
}

fn validate(all_counts: &[ClassCounts], base: f64, cap: f64) -> Result<usize> {
    let classes = all_counts
        .first()
        .ok_or_else(|| Error::invalid("no satellites reported counts"))?
        .classes();
    if classes == 0 {
        return Err(Error::invalid("at least one class is required"));
    }
    if all_counts
        .iter()
        .any(|c| c.classes() != classes || c.pseudo.len() != classes)
    {
        return Err(Error::dim("satellites report different class counts"));
    }
    if !(base > 0.0) || !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::invalid(format!(
            "base {base} / cap {cap} out of range"
        )));
    }
    Ok(classes)
}

/// Empirical class distribution `q(m)` pooled over all satellites.
pub fn class_distribution(all_counts: &[ClassCounts]) -> Result<Vec<f64>> {
    let classes = all_counts
        .first()
        .ok_or_else(|| Error::invalid("no satellites reported counts"))?
        .classes();
    let mut per_class = vec![0u64; classes];
    for c in all_counts {
        if c.classes() != classes {
            return Err(Error::dim("satellites report different class counts"));
        }
        for (acc, v) in per_class.iter_mut().zip(c.total()) {
            *acc += v;
        }
    }
    let grand: u64 = per_class.iter().sum();
    if grand == 0 {
        return Err(Error::invalid(
            "all class counts are zero; distribution undefined",
        ));
    }
    Ok(per_class.iter().map(|&v| v as f64 / grand as f64).collect())
}

/// Each satellite's share `r_i` of the pooled data.
pub fn size_ratios(all_counts: &[ClassCounts]) -> Result<Vec<f64>> {
    let sizes: Vec<u64> = all_counts.iter().map(|c| c.total().iter().sum()).collect();
    let grand: u64 = sizes.iter().sum();
    if grand == 0 {
        return Err(Error::invalid(
            "all class counts are zero; distribution undefined",
        ));
    }
    Ok(sizes.iter().map(|&s| s as f64 / grand as f64).collect())
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// The adaptive thresholds for every satellite and class.
pub fn compute_thresholds(
    all_counts: &[ClassCounts],
    base: f64,
    cap: f64,
) -> Result<ThresholdTable> {
    ThresholdPolicy::Adaptive.compute(all_counts, base, cap)
}

impl ThresholdPolicy {
    pub fn compute(
        self,
        all_counts: &[ClassCounts],
        base: f64,
        cap: f64,
    ) -> Result<ThresholdTable> {
        let classes = validate(all_counts, base, cap)?;
        if self == ThresholdPolicy::Fixed {
            return Ok(ThresholdTable::constant(
                all_counts.len(),
                classes,
                base,
                cap,
            ));
        }
        let q = class_distribution(all_counts)?;
        let r = size_ratios(all_counts)?;
        let std = population_std(&q);
        let tau = r
            .iter()
            .map(|&ri| {
                q.iter()
                    .map(|&qm| {
                        let raw = match self {
                            ThresholdPolicy::Adaptive => ri * (qm + base - std),
                            ThresholdPolicy::NoClassTerm => ri * base,
                            ThresholdPolicy::NoQuantityTerm => qm + base - std,
                            ThresholdPolicy::Fixed => unreachable!(),
                        };
                        clamp(raw, cap)
                    })
                    .collect()
            })
            .collect();
        Ok(ThresholdTable { tau, base, cap })
    }
}
