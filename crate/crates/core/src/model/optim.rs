use alloc::vec;
use alloc::vec::Vec;

use super::{Grads, Model, TrainConfig};
use crate::compress::stego::clear_low_bits;
use crate::{Error, Result};

/// SGD with momentum and coupled L2 weight decay:
/// `v ← μ·v − lr·(g + λ·w)`, `w ← w + v`.
///
/// After each update prune masks are re-applied. With a bit constraint the
/// update goes to a full-precision copy of the parameters (taken at the first
/// step) and the model receives that copy with its low-order bits cleared, so
/// updates smaller than the remaining precision still accumulate.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    /// Per layer: weight tensors followed by the bias.
    velocity: Vec<Vec<Vec<f32>>>,
    cleared_bits: u32,
    /// Same layout as `velocity`; only used with a bit constraint.
    latent: Option<Vec<Vec<Vec<f32>>>>,
}

impl SgdMomentum {
    pub fn new(model: &Model) -> Self {
        let velocity = model
            .layers()
            .iter()
            .map(|layer| {
                let mut bufs: Vec<Vec<f32>> = layer.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                bufs.push(vec![0.0; layer.bias().len()]);
                bufs
            })
            .collect();
        Self {
            velocity,
            cleared_bits: 0,
            latent: None,
        }
    }

    /// Keeps the lowest `bits` bits of every parameter cleared after each step.
    pub fn with_cleared_bits(mut self, bits: u32) -> Result<Self> {
        if bits > 32 {
            return Err(Error::BitCountOutOfRange(bits));
        }
        self.cleared_bits = bits;
        Ok(self)
    }

    pub fn velocity(&self, layer: usize) -> &[Vec<f32>] {
        &self.velocity[layer]
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, cfg: &TrainConfig) -> Result<()> {
        if grads.layers.len() != model.layers().len() || self.velocity.len() != model.layers().len() {
            return Err(Error::InvalidModel("gradient or velocity layout does not match the model".into()));
        }
        let (lr, mu, decay) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
        if self.cleared_bits > 0 && self.latent.is_none() {
            self.latent = Some(snapshot(model));
        }
        for ((idx, layer_grads), vel) in grads.layers.iter().enumerate().zip(&mut self.velocity) {
            let layer = model.layer_mut(idx)?;
            if layer.tensors().len() + 1 != vel.len() || vel.len() != layer_grads.tensors.len() + 1 {
                return Err(Error::InvalidModel("gradient layout does not match the model".into()));
            }
            let grads_iter = layer_grads.tensors.iter().chain(core::iter::once(&layer_grads.bias));
            match self.latent.as_mut() {
                None => {
                    for ((w, g), v) in layer.params_mut().into_iter().zip(grads_iter).zip(vel.iter_mut()) {
                        update(w, g, v, lr, mu, decay)?;
                    }
                    if let Some(mask) = layer.mask() {
                        mask.apply(&mut vel[0]);
                    }
                    layer.enforce_mask();
                }
                Some(latent) => {
                    let shadow = &mut latent[idx];
                    for ((w, g), v) in shadow.iter_mut().zip(grads_iter).zip(vel.iter_mut()) {
                        update(w, g, v, lr, mu, decay)?;
                    }
                    if let Some(mask) = layer.mask() {
                        mask.apply(&mut vel[0]);
                        mask.apply(&mut shadow[0]);
                    }
                    let bits = self.cleared_bits;
                    for (w, src) in layer.params_mut().into_iter().zip(shadow.iter()) {
                        for (w, &s) in w.iter_mut().zip(src) {
                            *w = clear_low_bits(s, bits);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn snapshot(model: &Model) -> Vec<Vec<Vec<f32>>> {
    model
        .layers()
        .iter()
        .map(|layer| {
            let mut bufs: Vec<Vec<f32>> = layer.tensors().iter().map(|t| t.to_vec()).collect();
            bufs.push(layer.bias().to_vec());
            bufs
        })
        .collect()
}

fn update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, mu: f32, decay: f32) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::DataLength {
            expected: w.len(),
            actual: g.len(),
        });
    }
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v - lr * (g + decay * *w);
        *w += *v;
    }
    Ok(())
}
