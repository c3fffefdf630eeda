use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, NestedNetwork};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    /// One update per iteration from the averaged per-level gradients.
    Simultaneous,
    /// One update per level per iteration, core level first.
    Sequential,
}

/// Piecewise-constant learning rate: `initial · factor^(drops passed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn at(&self, iter: usize) -> f64 {
        let passed = self.drops.iter().filter(|&&d| iter >= d).count();
        self.initial * self.factor.powi(passed as i32)
    }

    /// Same shape of schedule with drops placed at the given fractions of `iterations`.
    pub fn at_fractions(initial: f64, factor: f64, fractions: &[f64], iterations: usize) -> Self {
        Self {
            initial,
            drops: fractions
                .iter()
                .map(|f| (f * iterations as f64).round() as usize)
                .collect(),
            factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub iterations: usize,
    pub level_mode: LevelMode,
    pub seed: u64,
    /// Iterations between metric rows; 0 writes rows only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2e-4,
            lr: LrSchedule {
                initial: 0.1,
                drops: vec![40_000, 60_000],
                factor: 0.1,
            },
            momentum: 0.9,
            nesterov: true,
            batch_size: 128,
            iterations: 80_000,
            level_mode: LevelMode::Simultaneous,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.initial > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.lr.drops.windows(2).any(|w| w[1] <= w[0]) {
            return bad("learning-rate drops must be ascending");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lambda < 0.0 {
            return bad("momentum must lie in [0, 1) and lambda must be non-negative");
        }
        Ok(())
    }

    /// Copy whose drops sit at the same fractions of `iterations` as 40K/60K do of 80K.
    pub fn with_iterations(&self, iterations: usize) -> Self {
        Self {
            iterations,
            lr: LrSchedule::at_fractions(self.lr.initial, self.lr.factor, &[0.5, 0.75], iterations),
            ..self.clone()
        }
    }
}

pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr.at(iter)
}

/// Velocities mirroring the parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub iteration: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &NestedNetwork<T>) -> Self {
        Self {
            velocity: net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            iteration: 0,
        }
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| v.fill(T::zero()));
    }
}

/// Nesterov (or heavy-ball) SGD step.
///
/// Masked weights move only inside the `update_level` mask, where velocity is
/// kept; outside it their velocity is zeroed. Afterwards every masked weight is
/// re-projected onto the full-level mask, so pruned entries stay exactly 0.
pub fn sgd_step<T: Scalar>(
    net: &mut NestedNetwork<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
    update_level: usize,
) -> Result<()> {
    if grads.tensors.len() != net.params().len() || state.velocity.len() != net.params().len() {
        return Err(Error::dim(
            "sgd_step",
            "gradient/velocity count differs from parameter count",
        ));
    }
    for (i, (g, p)) in grads.tensors.iter().zip(net.params()).enumerate() {
        if g.shape() != p.value.shape() || state.velocity[i].shape() != p.value.shape() {
            return Err(Error::dim("sgd_step", format!("{} has a mismatched gradient", p.name)));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in {} at flat index {bad} (iteration {})",
                p.name, state.iteration
            )));
        }
    }
    let full = net.levels();
    let masks: Vec<Option<(Vec<bool>, Vec<bool>)>> = net
        .masks()
        .iter()
        .map(|m| {
            m.as_ref()
                .map(|h| (h.level(update_level).bits().to_vec(), h.level(full).bits().to_vec()))
        })
        .collect();
    let mu = T::from_f64(cfg.momentum);
    let lr = T::from_f64(lr);
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        let v = state.velocity[i].data_mut();
        let w = p.value.data_mut();
        let g = grads.tensors[i].data();
        for j in 0..w.len() {
            if let Some((upd, _)) = &masks[i] {
                if !upd[j] {
                    v[j] = T::zero();
                    continue;
                }
            }
            v[j] = mu * v[j] - lr * g[j];
            w[j] += if cfg.nesterov { mu * v[j] - lr * g[j] } else { v[j] };
        }
        if let Some((_, keep)) = &masks[i] {
            for j in 0..w.len() {
                if !keep[j] {
                    w[j] = T::zero();
                    v[j] = T::zero();
                }
            }
        }
        if let Some(bad) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite weight in {} at flat index {bad} (iteration {})",
                p.name, state.iteration
            )));
        }
    }
    state.iteration += 1;
    Ok(())
}
