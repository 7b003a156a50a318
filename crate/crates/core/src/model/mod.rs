//! Layers, models and their training loop.

mod data;
mod forward;
mod optim;
mod train;

pub use data::{Dataset, Split};
pub use forward::{forward, loss_and_grads, softmax_cross_entropy, Grads, LayerGrads};
pub use optim::SgdMomentum;
pub use train::{
    evaluate, mean_loss, EarlyStopping, EpochObserver, TrainConfig, TrainSummary, Trainer,
};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{FactorPair, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    /// Marks the output layer: its outputs are logits for softmax
    /// cross-entropy. No nonlinearity is applied in the forward pass.
    SoftmaxOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    FactorizedDense,
}

/// Geometry of a stride-1, unpadded 2-D convolution.
///
/// Activations are laid out channel-major: `[channel][row][col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.in_h + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 1 - self.kernel_w
    }

    /// Length of one unrolled receptive field, `in_channels·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
            self.in_h,
            self.in_w,
        ];
        if dims.contains(&0) || self.kernel_h > self.in_h || self.kernel_w > self.in_w {
            return Err(Error::InvalidModel(format!("bad convolution geometry {self:?}")));
        }
        Ok(())
    }
}

/// Weight storage of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    /// out×in matrix; the layer computes `x · Wᵀ + b`.
    Dense(Matrix),
    /// Kernel stored as `out_channels × (in_channels·kh·kw)`.
    Conv2d { shape: ConvShape, kernel: Matrix },
    /// `W ≈ u_fold · v_t`, applied as `(x · v_tᵀ) · u_foldᵀ`.
    Factorized(FactorPair),
}

/// Keep-bit per weight. A cleared bit forces the weight to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    words: Vec<u64>,
}

impl Mask {
    pub fn all_kept(len: usize) -> Self {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        Self { len, words }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::all_kept(bits.len());
        for (i, &keep) in bits.iter().enumerate() {
            m.set(i, keep);
        }
        m
    }

    /// Unpacks `ceil(len/8)` bytes, least-significant bit first.
    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::DataLength {
                expected: len.div_ceil(8),
                actual: bytes.len(),
            });
        }
        let mut m = Self::all_kept(len);
        for i in 0..len {
            m.set(i, bytes[i / 8] >> (i % 8) & 1 == 1);
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in 0..self.len {
            if self.get(i) {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, keep: bool) {
        let bit = 1u64 << (i % 64);
        if keep {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn kept(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn removed(&self) -> usize {
        self.len - self.kept()
    }

    /// Zeroes every entry of `values` whose bit is cleared.
    pub fn apply(&self, values: &mut [f32]) {
        debug_assert_eq!(values.len(), self.len);
        for (i, v) in values.iter_mut().enumerate() {
            if !self.get(i) {
                *v = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: LayerWeights,
    bias: Vec<f32>,
    mask: Option<Mask>,
    activation: Activation,
}

impl Layer {
    pub fn new(weights: LayerWeights, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        let layer = Self {
            weights,
            bias,
            mask: None,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn dense(weights: Matrix, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        Self::new(LayerWeights::Dense(weights), bias, activation)
    }

    pub fn conv2d(shape: ConvShape, kernel: Matrix, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        Self::new(LayerWeights::Conv2d { shape, kernel }, bias, activation)
    }

    pub fn factorized(factor: FactorPair, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        Self::new(LayerWeights::Factorized(factor), bias, activation)
    }

    fn validate(&self) -> Result<()> {
        match &self.weights {
            LayerWeights::Conv2d { shape, kernel } => {
                shape.validate()?;
                if kernel.shape() != (shape.out_channels, shape.patch_len()) {
                    return Err(Error::InvalidModel(format!(
                        "conv kernel is {}x{}, geometry needs {}x{}",
                        kernel.rows(),
                        kernel.cols(),
                        shape.out_channels,
                        shape.patch_len()
                    )));
                }
            }
            LayerWeights::Dense(_) | LayerWeights::Factorized(_) => {}
        }
        if self.bias.len() != self.bias_len() {
            return Err(Error::InvalidModel(format!(
                "bias has {} entries, layer needs {}",
                self.bias.len(),
                self.bias_len()
            )));
        }
        if let Some(mask) = &self.mask {
            if self.kind() == LayerKind::FactorizedDense {
                return Err(Error::InvalidModel("factorized layers cannot carry a prune mask".into()));
            }
            if mask.len() != self.weight_count() {
                return Err(Error::InvalidModel(format!(
                    "mask has {} bits for {} weights",
                    mask.len(),
                    self.weight_count()
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> LayerKind {
        match self.weights {
            LayerWeights::Dense(_) => LayerKind::Dense,
            LayerWeights::Conv2d { .. } => LayerKind::Conv2d,
            LayerWeights::Factorized(_) => LayerKind::FactorizedDense,
        }
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Installs `mask` and zeroes the weights it removes. `None` clears it.
    pub fn set_mask(&mut self, mask: Option<Mask>) -> Result<()> {
        let prev = core::mem::replace(&mut self.mask, mask);
        if let Err(e) = self.validate() {
            self.mask = prev;
            return Err(e);
        }
        self.enforce_mask();
        Ok(())
    }

    pub(crate) fn enforce_mask(&mut self) {
        if let Some(mask) = &self.mask {
            if let Some(w) = self.weights.prunable_mut() {
                mask.apply(w);
            }
        }
    }

    /// Flattened input length.
    pub fn in_len(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.cols(),
            LayerWeights::Conv2d { shape, .. } => shape.in_len(),
            LayerWeights::Factorized(f) => f.dims().1,
        }
    }

    /// Flattened output length.
    pub fn out_len(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.rows(),
            LayerWeights::Conv2d { shape, .. } => shape.out_len(),
            LayerWeights::Factorized(f) => f.dims().0,
        }
    }

    fn bias_len(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.rows(),
            LayerWeights::Conv2d { shape, .. } => shape.out_channels,
            LayerWeights::Factorized(f) => f.dims().0,
        }
    }

    /// Matrix view `(m, n)` of the weight: out×in for dense layers and
    /// `out_channels × patch_len` for convolutions.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match &self.weights {
            LayerWeights::Dense(w) => w.shape(),
            LayerWeights::Conv2d { kernel, .. } => kernel.shape(),
            LayerWeights::Factorized(f) => f.dims(),
        }
    }

    /// Stored weight entries, excluding biases. For factorized layers this is
    /// `r·(m+n)`.
    pub fn weight_count(&self) -> usize {
        match &self.weights {
            LayerWeights::Dense(w) => w.len(),
            LayerWeights::Conv2d { kernel, .. } => kernel.len(),
            LayerWeights::Factorized(f) => f.param_count(),
        }
    }

    /// Weight tensors in a fixed order: `[W]`, `[kernel]` or `[u_fold, v_t]`.
    pub fn tensors(&self) -> Vec<&[f32]> {
        match &self.weights {
            LayerWeights::Dense(w) => vec![w.data()],
            LayerWeights::Conv2d { kernel, .. } => vec![kernel.data()],
            LayerWeights::Factorized(f) => vec![f.u_fold().data(), f.v_t().data()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut params = self.params_mut();
        params.pop();
        params
    }

    /// Weight tensors followed by the bias.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut params = match &mut self.weights {
            LayerWeights::Dense(w) => vec![w.data_mut()],
            LayerWeights::Conv2d { kernel, .. } => vec![kernel.data_mut()],
            LayerWeights::Factorized(f) => {
                let (u, v) = f.parts_mut();
                vec![u.data_mut(), v.data_mut()]
            }
        };
        params.push(&mut self.bias);
        params
    }

    /// Weights subject to pruning (dense matrix or conv kernel).
    pub fn prunable(&self) -> Option<&[f32]> {
        self.weights.prunable()
    }

    /// Applies `f` to every stored parameter: weight tensors, then the bias.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f32)) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(&mut f);
        }
        self.bias.iter_mut().for_each(f);
    }
}

impl LayerWeights {
    fn prunable(&self) -> Option<&[f32]> {
        match self {
            LayerWeights::Dense(w) => Some(w.data()),
            LayerWeights::Conv2d { kernel, .. } => Some(kernel.data()),
            LayerWeights::Factorized(_) => None,
        }
    }

    fn prunable_mut(&mut self) -> Option<&mut [f32]> {
        match self {
            LayerWeights::Dense(w) => Some(w.data_mut()),
            LayerWeights::Conv2d { kernel, .. } => Some(kernel.data_mut()),
            LayerWeights::Factorized(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    class_count: usize,
}

impl Model {
    /// Validates that layer shapes compose and that the output has at
    /// least two classes.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidModel("model has no layers".into()))?;
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_len() != pair[1].in_len() {
                return Err(Error::InvalidModel(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].out_len(),
                    i + 1,
                    pair[1].in_len()
                )));
            }
        }
        let input_shape = match first.weights() {
            LayerWeights::Conv2d { shape, .. } => vec![shape.in_channels, shape.in_h, shape.in_w],
            _ => vec![first.in_len()],
        };
        let class_count = layers.last().map_or(0, Layer::out_len);
        if class_count < 2 {
            return Err(Error::InvalidModel(format!(
                "model must emit at least 2 classes, got {class_count}"
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            class_count,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> Result<&Layer> {
        self.layers.get(idx).ok_or(Error::LayerIndex {
            layer: idx,
            count: self.layers.len(),
        })
    }

    pub fn layer_mut(&mut self, idx: usize) -> Result<&mut Layer> {
        let count = self.layers.len();
        self.layers
            .get_mut(idx)
            .ok_or(Error::LayerIndex { layer: idx, count })
    }

    /// Swaps layer `idx` for `layer`, which must keep the same in/out sizes.
    pub fn replace_layer(&mut self, idx: usize, layer: Layer) -> Result<Layer> {
        let current = self.layer(idx)?;
        if current.in_len() != layer.in_len() || current.out_len() != layer.out_len() {
            return Err(Error::InvalidModel(format!(
                "replacement for layer {idx} changes its shape"
            )));
        }
        Ok(core::mem::replace(&mut self.layers[idx], layer))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Stored weight entries across all layers (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Layer::weight_count).sum()
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f32)) {
        for layer in &mut self.layers {
            layer.for_each_param_mut(&mut f);
        }
    }

    /// Multi-layer perceptron with ReLU hidden layers, e.g. `[784, 256, 128, 10]`.
    pub fn mlp(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidModel("an MLP needs at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let activation = if i == last {
                    Activation::SoftmaxOut
                } else {
                    Activation::Relu
                };
                let weights = kaiming_uniform(&mut rng, w[1], w[0])?;
                Layer::dense(weights, vec![0.0; w[1]], activation)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// The reference MLP, 784-256-128-10.
    pub fn reference_mlp(seed: u64) -> Result<Self> {
        Self::mlp(&[784, 256, 128, 10], seed)
    }

    /// conv3×3×16 → ReLU → conv3×3×32 → ReLU → flatten → dense(classes).
    pub fn reference_cnn(in_channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = ConvShape {
            out_channels: 16,
            in_channels,
            kernel_h: 3,
            kernel_w: 3,
            in_h: height,
            in_w: width,
        };
        c1.validate()?;
        let c2 = ConvShape {
            out_channels: 32,
            in_channels: 16,
            kernel_h: 3,
            kernel_w: 3,
            in_h: c1.out_h(),
            in_w: c1.out_w(),
        };
        c2.validate()?;
        let conv = |rng: &mut ChaCha8Rng, s: ConvShape| -> Result<Layer> {
            let kernel = kaiming_uniform(rng, s.out_channels, s.patch_len())?;
            Layer::conv2d(s, kernel, vec![0.0; s.out_channels], Activation::Relu)
        };
        let l1 = conv(&mut rng, c1)?;
        let l2 = conv(&mut rng, c2)?;
        let head = kaiming_uniform(&mut rng, classes, c2.out_len())?;
        let l3 = Layer::dense(head, vec![0.0; classes], Activation::SoftmaxOut)?;
        Self::new(vec![l1, l2, l3])
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
fn kaiming_uniform(rng: &mut ChaCha8Rng, rows: usize, fan_in: usize) -> Result<Matrix> {
    let bound = libm::sqrtf(6.0 / fan_in as f32);
    let data = (0..rows * fan_in)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, fan_in, data)
}
