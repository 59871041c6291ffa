use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::Float;
use crate::model::{Gradients, GroupSet, Seq2SeqModel};

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Pre-training defaults.
    pub fn pretrain(total_steps: usize) -> Self {
        Self {
            base_lr: 1e-4,
            warmup_steps: 4000.min(total_steps / 5),
            total_steps,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Fine-tuning defaults.
    pub fn finetune(total_steps: usize) -> Self {
        Self {
            base_lr: 5e-6,
            ..Self::pretrain(total_steps)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad("base_lr must be finite and non-negative");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let decay = cfg.total_steps - cfg.warmup_steps;
    if decay == 0 {
        return cfg.base_lr;
    }
    cfg.base_lr * (cfg.total_steps - step) as f64 / decay as f64
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: usize,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(model: &Seq2SeqModel<T>, config: OptimizerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let zeros: Vec<Array2<T>> = model
            .params()
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step, &self.config)
    }
}

/// Advance the step counter and update every trainable parameter.
///
/// The learning rate is `lr_at` of the incremented step. Parameters outside
/// `trainable` are not touched, even if a gradient is supplied.
pub fn adam_step<T: Float>(
    model: &mut Seq2SeqModel<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    trainable: GroupSet,
) -> Result<f64, TrainError> {
    if grads.len() != model.params().len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} gradients for {} parameters",
            grads.len(),
            model.params().len()
        )));
    }
    state.step += 1;
    let cfg = &state.config;
    let lr = lr_at(state.step, cfg);
    let t = state.step as i32;
    let correct1 = 1.0 - cfg.beta1.powi(t);
    let correct2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(lr / correct1);
    let inv_sqrt_c2 = T::of(1.0 / correct2.sqrt());
    let eps = T::of(cfg.eps);
    for (id, g) in grads.iter() {
        let i = id.index();
        if !trainable.contains(model.param(id).group) {
            continue;
        }
        if g.dim() != model.param(id).value.dim() {
            return Err(TrainError::InvalidConfig(format!(
                "gradient shape {:?} differs from parameter {}",
                g.dim(),
                model.param(id).name
            )));
        }
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        Zip::from(&mut model.param_mut(id).value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_c2 + eps);
            });
    }
    Ok(lr)
}
