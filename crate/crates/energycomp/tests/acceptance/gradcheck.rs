//! f64 reference forward pass for central-difference gradient checks.

use energycomp_core::model::{loss_and_grads, Activation, ConvShape, LayerWeights, Model};
use energycomp_core::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

#[derive(Clone)]
enum Kind {
    Dense { out: usize, inp: usize },
    Conv(ConvShape),
    Factor { m: usize, n: usize, r: usize },
}

#[derive(Clone)]
struct RefLayer {
    kind: Kind,
    /// Weight tensors in `Layer::tensors` order, then the bias.
    params: Vec<Vec<f64>>,
    relu: bool,
}

fn to_ref(model: &Model) -> Vec<RefLayer> {
    model
        .layers()
        .iter()
        .map(|l| {
            let kind = match l.weights() {
                LayerWeights::Dense(w) => Kind::Dense { out: w.rows(), inp: w.cols() },
                LayerWeights::Conv2d { shape, .. } => Kind::Conv(*shape),
                LayerWeights::Factorized(f) => Kind::Factor { m: f.dims().0, n: f.dims().1, r: f.rank() },
            };
            let widen = |t: &[f32]| t.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
            let mut params: Vec<Vec<f64>> = l.tensors().iter().map(|t| widen(t)).collect();
            params.push(widen(l.bias()));
            RefLayer { kind, params, relu: l.activation() == Activation::Relu }
        })
        .collect()
}

fn apply(layer: &RefLayer, x: &[f64]) -> Vec<f64> {
    let bias = layer.params.last().unwrap();
    let mut y: Vec<f64> = match &layer.kind {
        Kind::Dense { out, inp } => {
            let w = &layer.params[0];
            (0..*out).map(|o| bias[o] + (0..*inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>()).collect()
        }
        Kind::Factor { m, n, r } => {
            let (u, vt) = (&layer.params[0], &layer.params[1]);
            let h: Vec<f64> = (0..*r).map(|k| (0..*n).map(|i| vt[k * n + i] * x[i]).sum()).collect();
            (0..*m).map(|o| bias[o] + (0..*r).map(|k| u[o * r + k] * h[k]).sum::<f64>()).collect()
        }
        Kind::Conv(s) => {
            let k = &layer.params[0];
            let (oh, ow) = (s.in_h - s.kernel_h + 1, s.in_w - s.kernel_w + 1);
            let mut out = vec![0.0; s.out_channels * oh * ow];
            for o in 0..s.out_channels {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..s.in_channels {
                            for i in 0..s.kernel_h {
                                for j in 0..s.kernel_w {
                                    let kv = k[((o * s.in_channels + c) * s.kernel_h + i) * s.kernel_w + j];
                                    acc += kv * x[(c * s.in_h + y + i) * s.in_w + xx + j];
                                }
                            }
                        }
                        out[(o * oh + y) * ow + xx] = acc;
                    }
                }
            }
            out
        }
    };
    if layer.relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

fn loss(layers: &[RefLayer], xs: &[Vec<f64>], labels: &[u32]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(labels)
        .map(|(x, &label)| {
            let z = layers.iter().fold(x.clone(), |h, l| apply(l, &h));
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[label as usize]
        })
        .sum();
    total / xs.len() as f64
}

/// Largest relative error over every parameter and the number checked.
pub fn worst_error(model: &Model, seed: u64, batch: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.input_len();
    let flat: Vec<f32> = (0..batch * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let labels: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..model.class_count() as u32)).collect();
    let (_, grads) = loss_and_grads(model, &Matrix::from_vec(batch, dim, flat.clone()).unwrap(), &labels).unwrap();
    let xs: Vec<Vec<f64>> = flat.chunks(dim).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();

    let base = to_ref(model);
    let (mut worst, mut checked) = (0.0f64, 0);
    for (li, layer) in base.iter().enumerate() {
        let analytic_slots: Vec<&Vec<f32>> =
            grads.layers[li].tensors.iter().chain(std::iter::once(&grads.layers[li].bias)).collect();
        for (slot, values) in layer.params.iter().enumerate() {
            for idx in 0..values.len() {
                let nudged = |delta: f64| {
                    let mut p = base.clone();
                    p[li].params[slot][idx] += delta;
                    loss(&p, &xs, &labels)
                };
                let numeric = (nudged(STEP) - nudged(-STEP)) / (2.0 * STEP);
                let analytic = f64::from(analytic_slots[slot][idx]);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    (worst, checked)
}
