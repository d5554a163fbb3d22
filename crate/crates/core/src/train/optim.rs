use crate::autodiff::{ParamGroup, ParamSet};

/// Adaptive moment estimation with decoupled weight decay. Decay applies
/// only to parameters registered with `decay = true` (weight matrices).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m, v, step: 0 }
    }

    /// One update over gradients aligned with parameter registration order.
    /// `lr_of` maps a parameter group to its learning rate.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        lr_of: impl Fn(ParamGroup) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, param) in params.iter_mut().enumerate() {
            if !param.tensor.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].as_ref() else { continue };
            let lr = lr_of(param.group);
            if lr == 0.0 {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if param.decay { self.weight_decay } else { 0.0 };
            for ((p, g), (mi, vi)) in param
                .tensor
                .data
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *p);
            }
        }
    }
}
