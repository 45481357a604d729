use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub dampening: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

fn default_factor() -> f64 {
    0.1
}

fn default_wd() -> f64 {
    1e-4
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

impl OptimConfig {
    /// Step schedule starting at 0.1, divided by 10 after epochs 80 and 122.
    pub fn reference() -> Self {
        Self {
            lr0: 0.1,
            decay_epochs: vec![80, 122],
            decay_factor: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            nesterov: true,
            dampening: 0.0,
            batch_size: 64,
            max_epochs: 164,
        }
    }

    /// Same shape of schedule shrunk to `epochs` (decays at 1/2 and 3/4;
    /// decays that would collide or fall outside the run are dropped).
    pub fn scaled(epochs: usize, batch_size: usize) -> Self {
        let mut decay_epochs: Vec<usize> = [epochs / 2, epochs * 3 / 4].into_iter().filter(|&d| d > 0 && d < epochs).collect();
        decay_epochs.dedup();
        Self {
            decay_epochs,
            batch_size,
            max_epochs: epochs,
            ..Self::reference()
        }
    }

    /// Constant learning rate, as used when fine-tuning.
    pub fn constant(lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            lr0: lr,
            decay_epochs: Vec::new(),
            batch_size,
            max_epochs: epochs,
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 {} must be finite and nonnegative", self.lr0));
        }
        if !(self.decay_factor > 0.0) {
            return bad(format!("decay_factor {} must be positive", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay_epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.max_epochs) {
            return bad(format!("decay epochs must be below max_epochs {}", self.max_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.dampening) {
            return bad("momentum must be in [0, 1) and dampening in [0, 1]".into());
        }
        if self.nesterov && self.momentum > 0.0 && self.dampening != 0.0 {
            return bad("nesterov momentum requires zero dampening".into());
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: decays apply to epochs after each decay epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d < epoch).count();
        self.lr0 * self.decay_factor.powi(decays as i32)
    }
}

/// Momentum buffers, one per parameter, created zeroed on first use.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Element> {
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(params: usize) -> Self {
        Self {
            velocity: vec![None; params],
        }
    }
}

/// Per-parameter step options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamOptions {
    pub decay: bool,
    pub frozen: bool,
}

/// One SGD update. With Nesterov: `v <- mu v + (g + wd p)`,
/// `p <- p - lr (g + wd p + mu v)`. A non-finite gradient aborts the step
/// before any parameter changes.
pub fn sgd_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    options: &[ParamOptions],
    state: &mut SgdState<T>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || options.len() != params.len() || state.velocity.len() != params.len() {
        return Err(TrainError::Config("parameter, gradient and state counts differ".into()));
    }
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
        return Err(TrainError::NonFiniteGradient(i));
    }
    let (lr, mu, wd, damp) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(cfg.dampening));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (Some(g), opt) = (g, options[i]) else {
            continue;
        };
        if opt.frozen {
            continue;
        }
        let wd = if opt.decay { wd } else { T::zero() };
        if cfg.momentum == 0.0 {
            for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
                *p = *p - lr * (g + wd * *p);
            }
            continue;
        }
        let v = state.velocity[i].get_or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let d = g + wd * *p;
            *v = mu * *v + (T::one() - damp) * d;
            let step = if cfg.nesterov { d + mu * *v } else { *v };
            *p = *p - lr * step;
        }
    }
    Ok(())
}
