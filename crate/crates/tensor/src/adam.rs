use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Hyperparameters of the Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Steps over which the learning rate ramps linearly from ~0 to its peak.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            config,
        }
    }

    /// Learning rate used for update number `step` (1-based).
    pub fn learning_rate_at(&self, step: u64) -> f32 {
        let cfg = &self.config;
        if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
            cfg.learning_rate
        } else {
            cfg.learning_rate * step as f32 / cfg.warmup_steps as f32
        }
    }
}

/// One bias-corrected Adam update driven by each parameter's gradient
/// buffer. Parameters without a gradient are treated as having a zero one.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(TensorError::Invalid(format!(
            "adam: {} parameters but state tracks {}",
            params.len(),
            state.first_moment.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.first_moment) {
        if p.shape() != m.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
    }
    state.step_count += 1;
    let t = state.step_count;
    let lr = state.learning_rate_at(t);
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        ..
    } = state.config;
    let bc1 = 1.0 - beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if !p.requires_grad() {
            continue;
        }
        let grad = match p.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.numel()],
        };
        let (md, vd) = (m.data_mut(), v.data_mut());
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let g = grad[i];
            md[i] = beta1 * md[i] + (1.0 - beta1) * g;
            vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}
