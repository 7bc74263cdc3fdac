//! Server-side activation interpolation that grows the downloaded activation
//! set while pulling its class distribution toward the clients' distribution.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::link::ActivationRecord;
use crate::nn::{check_distribution, DISTRIBUTION_TOL};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct InterpConfig {
    /// Number of interpolated records to append.
    pub j: usize,
    /// Both shape parameters of the symmetric Beta the mixing weight is drawn from.
    pub beta: f64,
    /// Class distribution to steer toward.
    pub target_dist: Vec<f64>,
}

impl InterpConfig {
    pub fn new(j: usize, beta: f64, target_dist: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            j,
            beta,
            target_dist,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if self.target_dist.is_empty() {
            return Err(Error::invalid("target distribution is empty"));
        }
        check_distribution(&self.target_dist)
    }
}

/// Per-class record mass; soft labels count fractionally.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalCounts {
    pub gamma: Vec<f64>,
}

impl FractionalCounts {
    pub fn total(&self) -> f64 {
        self.gamma.iter().sum()
    }
}

pub fn fractional_counts(records: &[ActivationRecord], classes: usize) -> Result<FractionalCounts> {
    let mut gamma = vec![0.0; classes];
    for r in records {
        if r.classes() != classes {
            return Err(Error::dim(format!(
                "record has {} classes, expected {classes}",
                r.classes()
            )));
        }
        for (g, l) in gamma.iter_mut().zip(&r.label) {
            *g += l;
        }
    }
    Ok(FractionalCounts { gamma })
}

/// Mean squared difference between two per-class vectors.
pub fn class_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!(
            "class vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Source of the random choices made at each interpolation step.
pub trait MixSampler {
    /// Anchor index in `0..len` and mixing weight in `[0, 1]`.
    fn draw(&mut self, len: usize) -> (usize, f64);
}

/// Uniform anchor, Beta(beta, beta) mixing weight.
pub struct BetaMixSampler<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    beta: Beta<f64>,
}

impl<'a, R: Rng + ?Sized> BetaMixSampler<'a, R> {
    pub fn new(beta: f64, rng: &'a mut R) -> Result<Self> {
        let beta = Beta::new(beta, beta).map_err(|e| Error::invalid(format!("beta: {e}")))?;
        Ok(Self { rng, beta })
    }
}

impl<R: Rng + ?Sized> MixSampler for BetaMixSampler<'_, R> {
    fn draw(&mut self, len: usize) -> (usize, f64) {
        let anchor = self.rng.random_range(0..len);
        (anchor, self.beta.sample(self.rng).clamp(0.0, 1.0))
    }
}

/// Convex combination `alpha * a + (1 - alpha) * b`, kept inside the
/// coordinatewise hull of its parents.
pub fn mix_features(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (alpha * x + (1.0 - alpha) * y).clamp(x.min(y), x.max(y)))
        .collect()
}

pub fn mix_labels(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| alpha * x + (1.0 - alpha) * y)
        .collect()
}

/// Appends `cfg.j` interpolated records to `selected`, drawing randomness from
/// `rng`.
pub fn interpolate_round<R: Rng + ?Sized>(
    selected: &[ActivationRecord],
    cfg: &InterpConfig,
    rng: &mut R,
) -> Result<Vec<ActivationRecord>> {
    cfg.validate()?;
    if cfg.j == 0 {
        return Ok(selected.to_vec());
    }
    let mut sampler = BetaMixSampler::new(cfg.beta, rng)?;
    interpolate_with(selected, cfg, &mut sampler)
}

/// Same as [`interpolate_round`] with an explicit sampler.
///
/// Each step mixes a sampled anchor with the partner whose inclusion brings
/// the set's class distribution closest (in MSE) to the target; ties go to the
/// lowest index. New records join the set and can be picked in later steps.
pub fn interpolate_with<S: MixSampler + ?Sized>(
    selected: &[ActivationRecord],
    cfg: &InterpConfig,
    sampler: &mut S,
) -> Result<Vec<ActivationRecord>> {
    let classes = cfg.target_dist.len();
    let mut set = selected.to_vec();
    if cfg.j == 0 {
        return Ok(set);
    }
    if set.len() < 2 {
        return Err(Error::invalid(format!(
            "interpolation needs at least two records, got {}",
            set.len()
        )));
    }
    let mut hypo = vec![0.0; classes];
    for _ in 0..cfg.j {
        let base = fractional_counts(&set, classes)?;
        let mass = base.total() + 1.0;
        let (k1, alpha) = sampler.draw(set.len());
        let anchor = &set[k1];

        let mut best: Option<(usize, f64)> = None;
        for (k2, cand) in set.iter().enumerate() {
            if k2 == k1 {
                continue;
            }
            for (m, h) in hypo.iter_mut().enumerate() {
                *h = (base.gamma[m] + alpha * anchor.label[m] + (1.0 - alpha) * cand.label[m])
                    / mass;
            }
            let err = class_mse(&hypo, &cfg.target_dist)?;
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((k2, err));
            }
        }
        let (k2, _) = best.expect("at least two records");
        let partner = &set[k2];
        let mut label = mix_labels(&anchor.label, &partner.label, alpha);
        let sum: f64 = label.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::invalid("interpolated label left the simplex"));
        }
        label.iter_mut().for_each(|v| *v /= sum);
        let record = ActivationRecord::new(
            mix_features(&anchor.features, &partner.features, alpha),
            label,
            anchor.source_satellite,
            anchor.origin,
        )?;
        set.push(record);
    }
    Ok(set)
}
