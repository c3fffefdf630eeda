use serde::{Deserialize, Serialize};

use super::optimizer::{OptimizerState, TrainConfig};
use super::trainer::{run_phase, Hooks, Phase, PhaseReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nesting::{
    binarize, compute_soft_mask, project, validate_nesting, NestingReport, DEFAULT_CUTOFF, DEFAULT_GAMMA,
};
use crate::nn::NestedNetwork;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDriverConfig {
    /// Full level first; ascending.
    pub thresholds: Vec<f64>,
    pub gamma: f64,
    pub cutoff: f64,
    /// Iterations of each single-level phase; `None` splits `iterations` equally.
    pub phase_iterations: Option<usize>,
    /// Joint fine-tune length; `None` uses one phase length.
    pub finetune_iterations: Option<usize>,
}

impl PruneDriverConfig {
    pub fn new(thresholds: Vec<f64>) -> Self {
        Self {
            thresholds,
            gamma: DEFAULT_GAMMA,
            cutoff: DEFAULT_CUTOFF,
            phase_iterations: None,
            finetune_iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("threshold schedule is empty".into()));
        }
        if self.thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config("thresholds must be finite and non-negative".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("thresholds must be strictly ascending".into()));
        }
        Ok(())
    }

    /// Per-phase and fine-tune lengths for a total budget of `total` iterations.
    pub fn lengths(&self, total: usize) -> (usize, usize) {
        let phases = self.thresholds.len();
        let phase = self.phase_iterations.unwrap_or(total / phases.max(1));
        (phase, self.finetune_iterations.unwrap_or(phase))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PruneReport {
    /// One report per single-level phase, then the joint fine-tune.
    pub phases: Vec<PhaseReport>,
    pub densities: Vec<f64>,
}

fn next_masks<T: Scalar>(
    net: &mut NestedNetwork<T>,
    level: usize,
    tau: f64,
    driver: &PruneDriverConfig,
    project_weights: bool,
) -> Result<()> {
    for i in 0..net.params().len() {
        let Some(h) = net.mask_hierarchy(i) else { continue };
        let name = net.params()[i].name.clone();
        let current = h.level(level.min(h.levels())).clone();
        let w = &net.params()[i].value;
        let m = binarize(
            &compute_soft_mask(w, T::from_f64(tau), T::from_f64(driver.gamma)),
            T::from_f64(driver.cutoff),
        )
        .intersect(&current)?;
        if m.count_ones() == 0 {
            return Err(Error::EmptyMask(format!("τ={tau} leaves no weight of {name}")));
        }
        let mut h = h.clone();
        for k in 1..=level {
            h.set_level(k, m.clone());
        }
        if project_weights {
            let projected = project(w, &m)?;
            net.params_mut()[i].value = projected;
        }
        net.set_mask_hierarchy(i, h)?;
    }
    Ok(())
}

/// Prune-and-continue: train level `l` alone, derive level `l-1` from its
/// surviving weights at the next threshold, repeat down to the core, then
/// fine-tune all levels jointly.
pub fn iterative_prune<T: Scalar>(
    net: &mut NestedNetwork<T>,
    state: &mut OptimizerState<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    driver: &PruneDriverConfig,
    cfg: &TrainConfig,
    hooks: &mut Hooks<'_, T>,
) -> Result<PruneReport> {
    driver.validate()?;
    if !net.uses_masks() {
        return Err(Error::Unsupported(format!(
            "iterative pruning needs weight-prune mode, network uses {}",
            net.mode()
        )));
    }
    let levels = driver.thresholds.len();
    if net.levels() != levels {
        return Err(Error::Config(format!(
            "{} thresholds for a {}-level network",
            levels,
            net.levels()
        )));
    }
    let (phase_len, finetune_len) = driver.lengths(cfg.iterations);
    next_masks(net, levels, driver.thresholds[0], driver, true)?;
    *state = OptimizerState::new(net);
    let mut report = PruneReport::default();
    let mut offset = 0;
    for cur in (2..=levels).rev() {
        state.reset();
        let phase = Phase {
            levels: vec![cur],
            iterations: phase_len,
            update_level: cur,
            decay_level: cur,
            offset,
        };
        report
            .phases
            .push(run_phase(net, state, data, test, cfg, &phase, hooks)?);
        offset += phase_len;
        next_masks(net, cur - 1, driver.thresholds[levels - cur + 1], driver, false)?;
    }
    state.reset();
    let phase = Phase {
        levels: (1..=levels).collect(),
        iterations: finetune_len,
        update_level: levels,
        decay_level: levels,
        offset,
    };
    report
        .phases
        .push(run_phase(net, state, data, test, cfg, &phase, hooks)?);
    for i in 0..net.params().len() {
        if let Some(h) = net.mask_hierarchy(i) {
            let r = validate_nesting(h);
            if r != NestingReport::Ok {
                return Err(Error::Verification(format!(
                    "{} violates nesting: {:?}",
                    net.params()[i].name,
                    r
                )));
            }
        }
    }
    report.densities = (1..=levels).map(|k| net.density(k)).collect();
    Ok(report)
}

/// Checks that every position outside the full-level mask is exactly 0.
pub fn pruned_positions_are_zero<T: Scalar>(net: &NestedNetwork<T>) -> std::result::Result<(), String> {
    let full = net.levels();
    for (i, p) in net.params().iter().enumerate() {
        let Some(h) = net.mask_hierarchy(i) else { continue };
        let bits = h.level(full).bits();
        if let Some(j) = p
            .value
            .data()
            .iter()
            .zip(bits)
            .position(|(v, &b)| !b && *v != T::zero())
        {
            return Err(format!(
                "{}[{j}] = {} outside the mask",
                p.name,
                p.value.data()[j].as_f64()
            ));
        }
    }
    Ok(())
}
