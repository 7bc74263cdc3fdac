//! Client-side semi-supervised machinery: weak augmentation, the EMA
//! teacher, the auxiliary / pseudo-label / contrastive losses, and the
//! per-class adaptive thresholds that gate pseudo-labels.

mod augment;
mod losses;
mod pseudo;
mod stack;
mod teacher;
mod thresholds;

pub use augment::{weak_augment, WeakAugment};
pub use losses::{
    auxiliary_loss, class_loss, client_loss, contrastive_loss, unsupervised_loss, SslHyper,
};
pub use pseudo::{admit, argmax, pseudo_label, pseudo_label_batch, PseudoLabeled, PseudoOutcome};
pub use stack::{ClientStack, StackCache, StackGrads};
pub use teacher::{ema_update, ema_update_stack};
pub use thresholds::{
    class_distribution, compute_thresholds, population_std, size_ratios, ClassCounts,
    ThresholdPolicy, ThresholdTable, THRESHOLD_FLOOR,
};
