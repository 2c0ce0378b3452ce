//! Adam over model layers, with a linear warmup schedule.

use alloc::vec::Vec;

use crate::math;
use crate::model::{Bound, Layer, ModelParams};
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_LR: f64 = 3.5e-4;
pub const DEFAULT_WARMUP_EPOCHS: usize = 10;

/// Linear ramp over the first `warmup` epochs, then flat.
pub fn warmup_lr(base: f64, warmup: usize, epoch: usize) -> f64 {
    if epoch < warmup {
        base * (epoch + 1) as f64 / warmup as f64
    } else {
        base
    }
}

/// Weight and bias gradients per layer; `None` where nothing reached it.
pub type LayerGrads = Vec<Option<(Tensor, Tensor)>>;

/// Takes the accumulated gradients of every bound layer off the tape.
pub fn collect_grads(g: &mut Graph<'_>, bound: &Bound) -> LayerGrads {
    Layer::ALL
        .iter()
        .map(|&l| {
            let h = bound.head(l);
            match (g.take_grad(h.weight), g.take_grad(h.bias)) {
                (None, None) => None,
                (w, b) => {
                    let w = w.unwrap_or_else(|| Tensor::zeros(g.value(h.weight).shape()));
                    let b = b.unwrap_or_else(|| Tensor::zeros(g.value(h.bias).shape()));
                    Some((w, b))
                }
            }
        })
        .collect()
}

/// Moments and step count for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m_w: Tensor,
    pub v_w: Tensor,
    pub m_b: Tensor,
    pub v_b: Tensor,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub moments: Vec<Moments>,
}

fn update(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    h: (f64, f64, f64, f64, f64),
) {
    let (beta1, beta2, eps, lr, steps) = h;
    let c1 = 1.0 - math::powi(beta1, steps as i32);
    let c2 = 1.0 - math::powi(beta2, steps as i32);
    let pd = p.data_mut();
    for (((x, &gi), mi), vi) in pd
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * gi;
        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        *x -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + eps);
    }
}

impl Adam {
    pub fn new(params: &ModelParams, base_lr: f64) -> Self {
        let moments = params
            .layers
            .iter()
            .map(|l| Moments {
                m_w: Tensor::zeros(l.weight.shape()),
                v_w: Tensor::zeros(l.weight.shape()),
                m_b: Tensor::zeros(l.bias.shape()),
                v_b: Tensor::zeros(l.bias.shape()),
                steps: 0,
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            moments,
        }
    }

    /// One update at learning rate `lr`. Frozen layers, layers without a
    /// gradient, and layers whose gradient is exactly zero are left alone,
    /// moments included.
    pub fn step(&mut self, params: &mut ModelParams, grads: &LayerGrads, lr: f64) {
        self.step_layers(params, grads, lr, |_| true);
    }

    /// As [`Adam::step`], restricted to layers accepted by `filter`.
    pub fn step_layers(
        &mut self,
        params: &mut ModelParams,
        grads: &LayerGrads,
        lr: f64,
        filter: impl Fn(Layer) -> bool,
    ) {
        for (i, &layer) in Layer::ALL.iter().enumerate() {
            let Some((gw, gb)) = &grads[i] else { continue };
            let p = &mut params.layers[i];
            if p.frozen || !filter(layer) {
                continue;
            }
            self.step_tensors(layer, &mut p.weight, &mut p.bias, gw, gb, lr);
        }
    }

    /// Updates one layer's weight and bias held outside a [`ModelParams`],
    /// using and advancing that layer's moments. All-zero gradients are a
    /// no-op.
    pub fn step_tensors(
        &mut self,
        layer: Layer,
        weight: &mut Tensor,
        bias: &mut Tensor,
        gw: &Tensor,
        gb: &Tensor,
        lr: f64,
    ) {
        if gw.data().iter().chain(gb.data()).all(|&x| x == 0.0) {
            return;
        }
        let m = &mut self.moments[layer.index()];
        m.steps += 1;
        let h = (self.beta1, self.beta2, self.eps, lr, m.steps as f64);
        update(weight, gw, &mut m.m_w, &mut m.v_w, h);
        update(bias, gb, &mut m.m_b, &mut m.v_b, h);
    }
}
