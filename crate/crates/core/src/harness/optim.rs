use std::collections::BTreeMap;

use crate::params::ParamStore;

/// Adam with decoupled weight decay and linear warmup.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    step: usize,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64, warmup_steps: usize) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            warmup_steps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Learning rate applied by the next call to [`AdamW::step`].
    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f32>>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let (inv_bc2, eps) = ((1.0 / bc2) as f32, self.eps as f32);
        for (key, p) in params.iter_mut() {
            let Some(g) = grads.get(key) else { continue };
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let denom = (*vi * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * *mi / denom;
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
