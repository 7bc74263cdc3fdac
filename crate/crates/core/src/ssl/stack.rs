use crate::nn::{softmax_rows, CutRole, ForwardCache, SubModel, SubModelGrads, Tensor};
use crate::{Error, Result};

/// Client-side sub-model with its auxiliary head stacked on top: the
/// satellite-resident network that can produce class scores on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStack {
    pub body: SubModel,
    pub head: SubModel,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    body: ForwardCache,
    head: ForwardCache,
}

impl StackCache {
    /// Cut-layer activations produced during the forward pass.
    pub fn features(&self) -> &Tensor {
        self.body.output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub body: SubModelGrads,
    pub head: SubModelGrads,
}

impl StackGrads {
    pub fn zeros_like(stack: &ClientStack) -> Self {
        Self {
            body: SubModelGrads::zeros_like(&stack.body),
            head: SubModelGrads::zeros_like(&stack.head),
        }
    }

    pub fn add_scaled(&mut self, other: &StackGrads, scale: f64) -> Result<()> {
        self.body.add_scaled(&other.body, scale)?;
        self.head.add_scaled(&other.head, scale)
    }
}

impl ClientStack {
    pub fn new(body: SubModel, head: SubModel) -> Result<Self> {
        if body.out_dim() != head.in_dim() {
            return Err(Error::dim(format!(
                "auxiliary head expects width {} but the client sub-model emits {}",
                head.in_dim(),
                body.out_dim()
            )));
        }
        Ok(Self {
            body: body.with_role(CutRole::Client),
            head: head.with_role(CutRole::AuxiliaryHead),
        })
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, StackCache)> {
        let (z, body) = self.body.forward(input)?;
        let (logits, head) = self.head.forward(&z)?;
        Ok((logits, StackCache { body, head }))
    }

    pub fn backward(&self, cache: &StackCache, logit_grad: &Tensor) -> Result<StackGrads> {
        let (head, dz) = self.head.backward(&cache.head, logit_grad)?;
        let (body, _) = self.body.backward(&cache.body, &dz)?;
        Ok(StackGrads { body, head })
    }

    /// Class probabilities for each input row.
    pub fn predict_proba(&self, input: &Tensor) -> Result<Tensor> {
        let z = self.body.predict(input)?;
        Ok(softmax_rows(&self.head.predict(&z)?))
    }

    /// Cut-layer activations (what would be sent to the ground station).
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        self.body.predict(input)
    }

    pub fn sgd_step(&mut self, grads: &StackGrads, learning_rate: f64) -> Result<()> {
        self.body.sgd_step(&grads.body, learning_rate)?;
        self.head.sgd_step(&grads.head, learning_rate)
    }
}
