use crate::model::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam on one parameter buffer; `step` counts from 1.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// `peak * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak_lr * (s / w).min((w / s).sqrt())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// First and second moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Advances the step counter and updates every parameter.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        for (i, t) in params.tensors.iter_mut().enumerate() {
            adam_update(t.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], self.step, lr, cfg);
        }
    }
}
