//! Forward pass, softmax cross-entropy and backpropagation.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use super::{Activation, ConvShape, Layer, LayerWeights, Model};
use crate::numerics::{gemm, gemm_at_b, matmul, matmul_a_bt, matmul_at_b, Matrix};
use crate::{Error, Result};

/// Gradients for one layer, shaped like [`Layer::tensors`] and the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub tensors: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

struct Cache {
    input: Matrix,
    pre: Matrix,
    /// `x · v_tᵀ` for factorized layers.
    hidden: Option<Matrix>,
}

/// Logits of shape `(batch, class_count)`.
pub fn forward(model: &Model, batch: &Matrix) -> Result<Matrix> {
    check_input(model, batch)?;
    let mut x = Cow::Borrowed(batch);
    for layer in model.layers() {
        let (pre, _) = layer_forward(layer, &x)?;
        x = Cow::Owned(activate(layer.activation(), pre));
    }
    Ok(x.into_owned())
}

/// Mean softmax cross-entropy over the batch and its gradients.
///
/// Gradients of weights removed by a prune mask are exactly zero.
pub fn loss_and_grads(model: &Model, batch: &Matrix, labels: &[u32]) -> Result<(f32, Grads)> {
    check_input(model, batch)?;
    check_labels(model, batch, labels)?;

    let mut caches = Vec::with_capacity(model.layers().len());
    let mut x = batch.clone();
    for layer in model.layers() {
        let (pre, hidden) = layer_forward(layer, &x)?;
        let out = activate(layer.activation(), pre.clone());
        caches.push(Cache {
            input: x,
            pre,
            hidden,
        });
        x = out;
    }
    let (loss, mut grad) = softmax_cross_entropy(&x, labels);

    let mut layer_grads = Vec::with_capacity(model.layers().len());
    for (idx, (layer, cache)) in model.layers().iter().zip(&caches).enumerate().rev() {
        if layer.activation() == Activation::Relu {
            for (g, &p) in grad.data_mut().iter_mut().zip(cache.pre.data()) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let need_input_grad = idx > 0;
        let (lg, dx) = layer_backward(layer, cache, &grad, need_input_grad)?;
        layer_grads.push(lg);
        if let Some(dx) = dx {
            grad = dx;
        }
    }
    layer_grads.reverse();
    Ok((loss, Grads { layers: layer_grads }))
}

/// Mean cross-entropy of `logits` against `labels` and `dL/dlogits`, using a
/// max-shifted log-sum-exp.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u32]) -> (f32, Matrix) {
    let b = logits.rows();
    let c = logits.cols();
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0f64;
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let max = f64::from(max);
        let sum: f64 = row.iter().map(|&v| libm::exp(f64::from(v) - max)).sum();
        let lse = max + libm::log(sum);
        total += lse - f64::from(row[label as usize]);
        for (j, &v) in row.iter().enumerate() {
            let p = libm::exp(f64::from(v) - lse);
            let target = if j == label as usize { 1.0 } else { 0.0 };
            grad.set(i, j, ((p - target) * scale) as f32);
        }
    }
    ((total * scale) as f32, grad)
}

fn check_input(model: &Model, batch: &Matrix) -> Result<()> {
    if batch.cols() != model.input_len() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: batch.shape(),
            right: (model.input_len(), model.layers()[0].out_len()),
        });
    }
    Ok(())
}

fn check_labels(model: &Model, batch: &Matrix, labels: &[u32]) -> Result<()> {
    if labels.len() != batch.rows() {
        return Err(Error::DataLength {
            expected: batch.rows(),
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= model.class_count()) {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: model.class_count(),
        });
    }
    Ok(())
}

fn activate(activation: Activation, mut pre: Matrix) -> Matrix {
    if activation == Activation::Relu {
        pre.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    }
    pre
}

fn add_bias_rows(m: &mut Matrix, bias: &[f32]) {
    let cols = m.cols();
    for row in m.data_mut().chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// The weight matrix with the prune mask applied.
fn effective<'a>(weights: &'a Matrix, layer: &Layer) -> Cow<'a, Matrix> {
    match layer.mask() {
        None => Cow::Borrowed(weights),
        Some(mask) => {
            let mut w = weights.clone();
            mask.apply(w.data_mut());
            Cow::Owned(w)
        }
    }
}

fn layer_forward(layer: &Layer, x: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
    match layer.weights() {
        LayerWeights::Dense(w) => {
            let w = effective(w, layer);
            let mut pre = matmul_a_bt(x, &w)?;
            add_bias_rows(&mut pre, layer.bias());
            Ok((pre, None))
        }
        LayerWeights::Factorized(f) => {
            let hidden = matmul_a_bt(x, f.v_t())?;
            let mut pre = matmul_a_bt(&hidden, f.u_fold())?;
            add_bias_rows(&mut pre, layer.bias());
            Ok((pre, Some(hidden)))
        }
        LayerWeights::Conv2d { shape, kernel } => {
            let kernel = effective(kernel, layer);
            Ok((conv_forward(shape, &kernel, layer.bias(), x), None))
        }
    }
}

/// Unrolls one sample into a `patch_len × positions` matrix.
fn im2col(shape: &ConvShape, input: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let positions = oh * ow;
    let mut row = 0;
    for c in 0..shape.in_channels {
        let plane = &input[c * shape.in_h * shape.in_w..(c + 1) * shape.in_h * shape.in_w];
        for i in 0..shape.kernel_h {
            for j in 0..shape.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for y in 0..oh {
                    let src = &plane[(y + i) * shape.in_w + j..(y + i) * shape.in_w + j + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn conv_forward(shape: &ConvShape, kernel: &Matrix, bias: &[f32], x: &Matrix) -> Matrix {
    let positions = shape.out_h() * shape.out_w();
    let k = shape.patch_len();
    let mut out = Matrix::zeros(x.rows(), shape.out_len());
    let mut cols = vec![0.0f32; k * positions];
    for s in 0..x.rows() {
        im2col(shape, x.row(s), &mut cols);
        let dst = &mut out.data_mut()[s * shape.out_len()..(s + 1) * shape.out_len()];
        gemm(shape.out_channels, k, positions, kernel.data(), &cols, dst);
        for (ch, b) in bias.iter().enumerate() {
            dst[ch * positions..(ch + 1) * positions]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
    out
}

fn layer_backward(
    layer: &Layer,
    cache: &Cache,
    grad: &Matrix,
    need_input_grad: bool,
) -> Result<(LayerGrads, Option<Matrix>)> {
    let bias = column_sums(grad);
    match layer.weights() {
        LayerWeights::Dense(w) => {
            let mut dw = matmul_at_b(grad, &cache.input)?.into_vec();
            if let Some(mask) = layer.mask() {
                mask.apply(&mut dw);
            }
            let dx = if need_input_grad {
                Some(matmul(grad, &effective(w, layer))?)
            } else {
                None
            };
            Ok((LayerGrads { tensors: vec![dw], bias }, dx))
        }
        LayerWeights::Factorized(f) => {
            let hidden = cache.hidden.as_ref().expect("factorized forward caches its hidden product");
            let du = matmul_at_b(grad, hidden)?;
            let dh = matmul(grad, f.u_fold())?;
            let dv = matmul_at_b(&dh, &cache.input)?;
            let dx = if need_input_grad {
                Some(matmul(&dh, f.v_t())?)
            } else {
                None
            };
            Ok((
                LayerGrads {
                    tensors: vec![du.into_vec(), dv.into_vec()],
                    bias,
                },
                dx,
            ))
        }
        LayerWeights::Conv2d { shape, kernel } => {
            let kernel = effective(kernel, layer);
            let (dk, dx, db) = conv_backward(shape, &kernel, &cache.input, grad, need_input_grad);
            let mut dk = dk;
            if let Some(mask) = layer.mask() {
                mask.apply(&mut dk);
            }
            Ok((LayerGrads { tensors: vec![dk], bias: db }, dx))
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut acc = vec![0.0f64; m.cols()];
    for r in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += f64::from(v);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn conv_backward(
    shape: &ConvShape,
    kernel: &Matrix,
    input: &Matrix,
    grad: &Matrix,
    need_input_grad: bool,
) -> (Vec<f32>, Option<Matrix>, Vec<f32>) {
    let positions = shape.out_h() * shape.out_w();
    let k = shape.patch_len();
    let (oh, ow) = (shape.out_h(), shape.out_w());
    let mut dk_acc = vec![0.0f64; shape.out_channels * k];
    let mut db_acc = vec![0.0f64; shape.out_channels];
    let mut dx = need_input_grad.then(|| Matrix::zeros(input.rows(), shape.in_len()));

    let mut cols = vec![0.0f32; k * positions];
    let mut patches = vec![0.0f32; positions * k];
    let mut dk_s = vec![0.0f32; shape.out_channels * k];
    let mut dpatches = vec![0.0f32; positions * k];
    for s in 0..input.rows() {
        let g = grad.row(s);
        for (ch, acc) in db_acc.iter_mut().enumerate() {
            *acc += g[ch * positions..(ch + 1) * positions]
                .iter()
                .map(|&v| f64::from(v))
                .sum::<f64>();
        }
        im2col(shape, input.row(s), &mut cols);
        for r in 0..k {
            for p in 0..positions {
                patches[p * k + r] = cols[r * positions + p];
            }
        }
        gemm(shape.out_channels, positions, k, g, &patches, &mut dk_s);
        for (a, &v) in dk_acc.iter_mut().zip(&dk_s) {
            *a += f64::from(v);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_at_b(shape.out_channels, positions, k, g, kernel.data(), &mut dpatches);
            let dst = &mut dx.data_mut()[s * shape.in_len()..(s + 1) * shape.in_len()];
            for c in 0..shape.in_channels {
                for i in 0..shape.kernel_h {
                    for j in 0..shape.kernel_w {
                        let r = (c * shape.kernel_h + i) * shape.kernel_w + j;
                        for y in 0..oh {
                            for x in 0..ow {
                                dst[c * shape.in_h * shape.in_w + (y + i) * shape.in_w + x + j] +=
                                    dpatches[(y * ow + x) * k + r];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        dk_acc.into_iter().map(|v| v as f32).collect(),
        dx,
        db_acc.into_iter().map(|v| v as f32).collect(),
    )
}
