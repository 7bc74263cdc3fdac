//! Byte budgets for contact windows and selection of which activations a
//! satellite sends down within them.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::{check_distribution, one_hot};
use crate::orbit::ContactWindow;
use crate::ssl::argmax;
use crate::{Error, Result};

/// Fixed per-record framing overhead.
pub const RECORD_HEADER_BYTES: u64 = 64;
/// Bytes per transmitted `f64` element.
pub const ELEMENT_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Labeled,
    Pseudo,
}

/// One cut-layer activation with its label: the unit of satellite-to-ground
/// transfer and of interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub features: Vec<f64>,
    /// Class distribution: one-hot for real and pseudo labels, soft after
    /// interpolation.
    pub label: Vec<f64>,
    pub class_hint: usize,
    /// L2 norm of `features`.
    pub magnitude: f64,
    pub source_satellite: usize,
    pub origin: Origin,
}

impl ActivationRecord {
    pub fn new(
        features: Vec<f64>,
        label: Vec<f64>,
        source_satellite: usize,
        origin: Origin,
    ) -> Result<Self> {
        if features.is_empty() || label.is_empty() {
            return Err(Error::invalid(
                "activation record needs features and a label",
            ));
        }
        check_distribution(&label)?;
        let magnitude = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        let class_hint = argmax(&label).0;
        Ok(Self {
            features,
            label,
            class_hint,
            magnitude,
            source_satellite,
            origin,
        })
    }

    pub fn hard(
        features: Vec<f64>,
        class: usize,
        classes: usize,
        source_satellite: usize,
        origin: Origin,
    ) -> Result<Self> {
        if class >= classes {
            return Err(Error::invalid(format!(
                "class {class} outside {classes} classes"
            )));
        }
        Self::new(features, one_hot(class, classes), source_satellite, origin)
    }

    pub fn classes(&self) -> usize {
        self.label.len()
    }

    pub fn size_bytes(&self) -> u64 {
        record_bytes(self.features.len())
    }
}

/// Wire size of a record carrying `elements` features.
pub fn record_bytes(elements: usize) -> u64 {
    elements as u64 * ELEMENT_BYTES + RECORD_HEADER_BYTES
}

/// `floor(rate * duration / 8)` bytes in each direction: `(down, up)`.
pub fn budget_bytes(window: &ContactWindow) -> (u64, u64) {
    let d = window.duration_s();
    (
        (window.downlink_bps * d / 8.0).floor() as u64,
        (window.uplink_bps * d / 8.0).floor() as u64,
    )
}

/// Running byte accounting for one contact window.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferBudget {
    pub window: ContactWindow,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub used_down: u64,
    pub used_up: u64,
}

impl TransferBudget {
    pub fn new(window: ContactWindow) -> Self {
        let (bytes_down, bytes_up) = budget_bytes(&window);
        Self::with_bytes(window, bytes_down, bytes_up)
    }

    pub fn with_bytes(window: ContactWindow, bytes_down: u64, bytes_up: u64) -> Self {
        Self {
            window,
            bytes_down,
            bytes_up,
            used_down: 0,
            used_up: 0,
        }
    }

    pub fn remaining_down(&self) -> u64 {
        self.bytes_down.saturating_sub(self.used_down)
    }

    pub fn remaining_up(&self) -> u64 {
        self.bytes_up.saturating_sub(self.used_up)
    }

    /// Charges `bytes` satellite-to-ground if they fit.
    pub fn try_down(&mut self, bytes: u64) -> bool {
        if bytes <= self.remaining_down() {
            self.used_down += bytes;
            true
        } else {
            false
        }
    }

    /// Charges `bytes` ground-to-satellite if they fit.
    pub fn try_up(&mut self, bytes: u64) -> bool {
        if bytes <= self.remaining_up() {
            self.used_up += bytes;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// Uniformly shuffled order.
    Random,
    /// Visit classes 0..M in turn, each time taking that class's largest
    /// remaining activation; exhausted classes are skipped.
    ClassCyclingLargest,
}

/// Order in which class-cycling visits the pool, ignoring any budget.
fn class_cycling_order(pool: &[ActivationRecord]) -> Vec<usize> {
    let classes = pool.iter().map(|r| r.classes()).max().unwrap_or(0);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, r) in pool.iter().enumerate() {
        per_class[r.class_hint].push(i);
    }
    for members in &mut per_class {
        // Largest magnitude first; stable sort keeps lower indices first on ties.
        members.sort_by(|&a, &b| pool[b].magnitude.total_cmp(&pool[a].magnitude));
        members.reverse();
    }
    let mut order = Vec::with_capacity(pool.len());
    while order.len() < pool.len() {
        for members in per_class.iter_mut() {
            if let Some(i) = members.pop() {
                order.push(i);
            }
        }
    }
    order
}

/// Greedily fills `budget_bytes` following `policy`, stopping at the first
/// record that would overflow. Returns pool indices in transmission order.
pub fn select_for_upload<R: Rng + ?Sized>(
    pool: &[ActivationRecord],
    budget_bytes: u64,
    policy: SelectionPolicy,
    rng: &mut R,
) -> Vec<usize> {
    let order = match policy {
        SelectionPolicy::Random => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            idx
        }
        SelectionPolicy::ClassCyclingLargest => class_cycling_order(pool),
    };
    let mut used = 0u64;
    let mut selected = Vec::new();
    for i in order {
        let size = pool[i].size_bytes();
        if used + size > budget_bytes {
            break;
        }
        used += size;
        selected.push(i);
    }
    selected
}
