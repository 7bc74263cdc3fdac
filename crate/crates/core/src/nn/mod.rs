//! Minimal dense-tensor and MLP substrate with manual backprop.
//!
//! All arithmetic is `f64`. A [`SubModel`] is a chain of dense layers; it
//! plays every role in the split network (client body, auxiliary head,
//! server tail, or the unsplit global model).

mod loss;
mod model;
mod tensor;

pub use loss::{
    batch_cross_entropy, check_distribution, log_sum_exp, one_hot, softmax, softmax_cross_entropy,
    softmax_rows, DISTRIBUTION_TOL,
};
pub use model::{
    CutRole, ForwardCache, LayerGrads, LayerKind, LayerParams, SubModel, SubModelGrads,
};
pub use tensor::{dot, Tensor};
