use super::ClientStack;
use crate::nn::Tensor;
use crate::{Error, Result};

/// An unlabelled sample admitted with a pseudo-label. `index` points into the
/// satellite's unlabelled pool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabeled {
    pub index: usize,
    pub pseudo_label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PseudoOutcome {
    Labeled { class: usize, confidence: f64 },
    LowConfidence,
}

/// Index and value of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Admission rule on one probability vector: keep the argmax class when its
/// probability reaches that class's threshold.
pub fn admit(probs: &[f64], thresholds: &[f64]) -> PseudoOutcome {
    let (class, confidence) = argmax(probs);
    if confidence >= thresholds[class] {
        PseudoOutcome::Labeled { class, confidence }
    } else {
        PseudoOutcome::LowConfidence
    }
}

fn check_thresholds(thresholds: &[f64], classes: usize) -> Result<()> {
    if thresholds.len() != classes {
        return Err(Error::dim(format!(
            "{} thresholds for {classes} classes",
            thresholds.len()
        )));
    }
    if thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::invalid("thresholds must lie in (0, 1]"));
    }
    Ok(())
}

/// Pseudo-labels a single sample with the teacher stack.
pub fn pseudo_label(
    teacher: &ClientStack,
    x: &Tensor,
    thresholds: &[f64],
) -> Result<PseudoOutcome> {
    check_thresholds(thresholds, teacher.classes())?;
    let probs = teacher.predict_proba(x)?;
    Ok(admit(probs.row(0), thresholds))
}

/// Pseudo-labels every row of `xs`.
pub fn pseudo_label_batch(
    teacher: &ClientStack,
    xs: &Tensor,
    thresholds: &[f64],
) -> Result<Vec<PseudoOutcome>> {
    check_thresholds(thresholds, teacher.classes())?;
    let probs = teacher.predict_proba(xs)?;
    Ok((0..probs.rows())
        .map(|r| admit(probs.row(r), thresholds))
        .collect())
}
