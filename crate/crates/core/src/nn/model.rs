//! Dense layers and layer chains with hand-written backprop.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::{dot, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    DenseRelu,
    DenseLinear,
}

/// One dense layer: `y = act(W x + b)` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub kind: LayerKind,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Tensor, kind: LayerKind) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || bias.len() != weights.shape()[0] {
            return Err(Error::dim(format!(
                "weights {:?} and bias {:?} are inconsistent",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weights,
            bias,
            kind,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` init for weights and bias.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        kind: LayerKind,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        let bias = (0..out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            weights: Tensor::matrix(out_dim, in_dim, weights).expect("sized above"),
            bias: Tensor::vector(bias).expect("sized above"),
            kind,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    fn forward_into(&self, input: &Tensor, out: &mut Tensor) {
        let (w, b) = (self.weights.data(), self.bias.data());
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        for r in 0..input.rows() {
            let x = input.row(r);
            let y = out.row_mut(r);
            for o in 0..out_dim {
                let z = dot(&w[o * in_dim..(o + 1) * in_dim], x) + b[o];
                y[o] = match self.kind {
                    LayerKind::DenseRelu => z.max(0.0),
                    LayerKind::DenseLinear => z,
                };
            }
        }
    }
}

/// Which side of the cut a chain of layers lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutRole {
    /// The unsplit network.
    Global,
    Client,
    AuxiliaryHead,
    Server,
}

/// An ordered chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    layers: Vec<LayerParams>,
    role: CutRole,
}

/// Everything `backward` needs from the matching `forward` call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    vector_input: bool,
    // activations[0] is the input, activations[l + 1] the output of layer l.
    activations: Vec<Tensor>,
}

impl ForwardCache {
    /// The output of layer `l`.
    pub fn layer_output(&self, l: usize) -> &Tensor {
        &self.activations[l + 1]
    }

    /// Output of the last layer, always as a `[batch, out]` matrix.
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Parameter gradients, laid out exactly like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl SubModelGrads {
    pub fn zeros_like(model: &SubModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Tensor::zeros(l.weights.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &SubModelGrads, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("gradient sets have different layer counts"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, scale)?;
            a.bias.add_scaled(&b.bias, scale)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.scale(factor);
            l.bias.scale(factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights
                .data()
                .iter()
                .chain(l.bias.data())
                .all(|&v| v == 0.0)
        })
    }
}

impl SubModel {
    pub fn new(role: CutRole, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("a sub-model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, role })
    }

    /// Randomly initialised MLP over `dims` (`dims.len() - 1` layers). Hidden
    /// layers use ReLU; the last uses `last`.
    pub fn mlp<R: Rng + ?Sized>(
        role: CutRole,
        dims: &[usize],
        last: LayerKind,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::dim(format!("bad layer sizes {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let kind = if i + 1 == n {
                    last
                } else {
                    LayerKind::DenseRelu
                };
                LayerParams::init(dims[i], dims[i + 1], kind, rng)
            })
            .collect();
        Self::new(role, layers)
    }

    pub fn role(&self) -> CutRole {
        self.role
    }

    pub fn with_role(mut self, role: CutRole) -> Self {
        self.role = role;
        self
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<LayerParams> {
        self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// True when both chains have the same layer shapes and kinds.
    pub fn same_architecture(&self, other: &SubModel) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.kind == b.kind && a.weights.same_shape(&b.weights) && a.bias.same_shape(&b.bias)
            })
    }

    /// Hash of the exact parameter bits; ties a forward cache to the model state.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weights.data().iter().chain(l.bias.data()) {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() > 2 || input.cols() != self.in_dim() {
            return Err(Error::dim(format!(
                "input {:?} does not fit a model with input width {}",
                input.shape(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn as_matrix(input: &Tensor) -> Tensor {
        if input.rank() == 1 {
            Tensor::matrix(1, input.len(), input.data().to_vec())
                .expect("vector reshapes to one row")
        } else {
            input.clone()
        }
    }

    fn shape_output(out: Tensor, vector_input: bool) -> Tensor {
        if vector_input {
            Tensor::vector(out.into_data()).expect("non-empty output")
        } else {
            out
        }
    }

    /// Forward pass over a `[batch, in]` matrix or a single `[in]` vector.
    /// The output keeps the input's rank.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let vector_input = input.rank() == 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(Self::as_matrix(input));
        for layer in &self.layers {
            let x = activations.last().expect("seeded with the input");
            let mut y = Tensor::zeros(&[x.rows(), layer.out_dim()]);
            layer.forward_into(x, &mut y);
            activations.push(y);
        }
        let out = activations.last().expect("at least one layer").clone();
        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            vector_input,
            activations,
        };
        Ok((Self::shape_output(out, vector_input), cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let vector_input = input.rank() == 1;
        let mut x = Self::as_matrix(input);
        for layer in &self.layers {
            let mut y = Tensor::zeros(&[x.rows(), layer.out_dim()]);
            layer.forward_into(&x, &mut y);
            x = y;
        }
        Ok(Self::shape_output(x, vector_input))
    }

    /// Backpropagates `output_grad` (dL/d output, same shape as the forward
    /// output) through the chain.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &Tensor,
    ) -> Result<(SubModelGrads, Tensor)> {
        if cache.activations.len() != self.layers.len() + 1
            || cache.fingerprint != self.fingerprint()
        {
            return Err(Error::StaleCache);
        }
        let out = cache.activations.last().expect("non-empty");
        let mut grad = Self::as_matrix(output_grad);
        if grad.shape() != out.shape() {
            return Err(Error::dim(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }

        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.activations[l];
            let y = &cache.activations[l + 1];
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            if layer.kind == LayerKind::DenseRelu {
                for (g, &v) in grad.data_mut().iter_mut().zip(y.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let mut dw = vec![0.0; out_dim * in_dim];
            let mut db = vec![0.0; out_dim];
            let mut dx = Tensor::zeros(&[x.rows(), in_dim]);
            let w = layer.weights.data();
            for r in 0..x.rows() {
                let xr = x.row(r);
                let gr = grad.row(r);
                let dxr = dx.row_mut(r);
                for o in 0..out_dim {
                    let g = gr[o];
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let w_row = &w[o * in_dim..(o + 1) * in_dim];
                    let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        dw_row[i] += g * xr[i];
                        dxr[i] += g * w_row[i];
                    }
                }
            }
            layer_grads.push(LayerGrads {
                weights: Tensor::matrix(out_dim, in_dim, dw)?,
                bias: Tensor::vector(db)?,
            });
            grad = dx;
        }
        layer_grads.reverse();
        Ok((
            SubModelGrads {
                layers: layer_grads,
            },
            Self::shape_output(grad, cache.vector_input),
        ))
    }

    /// Plain SGD: `theta -= learning_rate * grad`.
    pub fn sgd_step(&mut self, grads: &SubModelGrads, learning_rate: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("gradient layer count does not match model"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.add_scaled(&g.weights, -learning_rate)?;
            layer.bias.add_scaled(&g.bias, -learning_rate)?;
        }
        Ok(())
    }

    /// Appends `other`'s layers after this chain.
    pub fn compose(&self, other: &SubModel, role: CutRole) -> Result<SubModel> {
        let layers = self.layers.iter().chain(&other.layers).cloned().collect();
        SubModel::new(role, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_for;

    fn identity_layer(n: usize) -> LayerParams {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        LayerParams::new(
            Tensor::matrix(n, n, w).unwrap(),
            Tensor::zeros(&[n]),
            LayerKind::DenseLinear,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model = SubModel::new(CutRole::Global, vec![identity_layer(3)]).unwrap();
        let v = Tensor::vector(vec![0.5, -2.0, 7.0]).unwrap();
        let (out, _) = model.forward(&v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let layer = LayerParams::new(
            Tensor::zeros(&[4, 3]),
            Tensor::zeros(&[4]),
            LayerKind::DenseRelu,
        )
        .unwrap();
        let model = SubModel::new(CutRole::Client, vec![layer]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -3.0, 2.0, 9.0, 0.1, 5.0]).unwrap();
        let (out, _) = model.forward(&x).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = rng_for(1, 0);
        let model = SubModel::mlp(
            CutRole::Global,
            &[3, 4, 2],
            LayerKind::DenseLinear,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            model.forward(&Tensor::zeros(&[2, 5])),
            Err(Error::Dimension(_))
        ));
        let bad = vec![
            LayerParams::init(3, 4, LayerKind::DenseRelu, &mut rng),
            LayerParams::init(5, 2, LayerKind::DenseLinear, &mut rng),
        ];
        assert!(SubModel::new(CutRole::Global, bad).is_err());
        assert!(LayerParams::new(
            Tensor::zeros(&[2, 3]),
            Tensor::zeros(&[3]),
            LayerKind::DenseRelu
        )
        .is_err());
    }

    #[test]
    fn linear_sum_loss_gradient_is_outer_product() {
        // y = W x, L = sum(y)  =>  dL/dW = ones * x^T, dL/db = ones.
        let mut rng = rng_for(2, 0);
        let model =
            SubModel::mlp(CutRole::Global, &[3, 2], LayerKind::DenseLinear, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.3, -1.5, 2.0]).unwrap();
        let (out, cache) = model.forward(&x).unwrap();
        let ones = Tensor::vector(vec![1.0; out.len()]).unwrap();
        let (grads, dx) = model.backward(&cache, &ones).unwrap();
        assert_eq!(
            grads.layers[0].weights.data(),
            &[0.3, -1.5, 2.0, 0.3, -1.5, 2.0]
        );
        assert_eq!(grads.layers[0].bias.data(), &[1.0, 1.0]);
        let w = model.layers()[0].weights.data();
        for i in 0..3 {
            assert!((dx.data()[i] - (w[i] + w[3 + i])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_grads() {
        let mut rng = rng_for(3, 0);
        let model = SubModel::mlp(
            CutRole::Global,
            &[4, 6, 3],
            LayerKind::DenseLinear,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let (out, cache) = model.forward(&x).unwrap();
        let (grads, dx) = model.backward(&cache, &Tensor::zeros(out.shape())).unwrap();
        assert!(grads.is_zero());
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = rng_for(4, 0);
        let mut model =
            SubModel::mlp(CutRole::Global, &[2, 2], LayerKind::DenseLinear, &mut rng).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let (out, cache) = model.forward(&x).unwrap();
        let (grads, _) = model.backward(&cache, &out).unwrap();
        model.sgd_step(&grads, 0.1).unwrap();
        assert!(matches!(
            model.backward(&cache, &out),
            Err(Error::StaleCache)
        ));

        let other = SubModel::mlp(
            CutRole::Global,
            &[2, 3, 2],
            LayerKind::DenseLinear,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            other.backward(&cache, &out),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let layer = LayerParams::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::vector(vec![1.0]).unwrap(),
            LayerKind::DenseLinear,
        )
        .unwrap();
        let mut model = SubModel::new(CutRole::Global, vec![layer]).unwrap();
        let mut grads = SubModelGrads::zeros_like(&model);
        grads.layers[0].weights.data_mut()[0] = 1.0;
        grads.layers[0].bias.data_mut()[0] = 1.0;

        let before = model.clone();
        model.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(model, before);

        model.sgd_step(&grads, 0.005).unwrap();
        assert_eq!(model.layers()[0].weights.data()[0], 0.995);
        assert_eq!(model.layers()[0].bias.data()[0], 0.995);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut rng = rng_for(5, 0);
        let model = SubModel::mlp(
            CutRole::Global,
            &[3, 4, 2],
            LayerKind::DenseLinear,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::matrix(2, 3, vec![0.5, -0.2, 1.0, 0.3, 0.9, -1.1]).unwrap();
        let (out, cache) = model.forward(&x).unwrap();
        let (g1, _) = model.backward(&cache, &out).unwrap();
        let mut g2 = g1.clone();
        g2.scale(-0.5);

        let mut twice = model.clone();
        twice.sgd_step(&g1, 0.1).unwrap();
        twice.sgd_step(&g2, 0.1).unwrap();
        let mut summed = g1.clone();
        summed.add_scaled(&g2, 1.0).unwrap();
        let mut once = model.clone();
        once.sgd_step(&summed, 0.1).unwrap();
        for (a, b) in twice.layers().iter().zip(once.layers()) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = rng_for(99, 7);
            SubModel::mlp(
                CutRole::Global,
                &[5, 8, 3],
                LayerKind::DenseLinear,
                &mut rng,
            )
            .unwrap()
        };
        let x = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
        let a = build().predict(&x).unwrap();
        let b = build().predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
