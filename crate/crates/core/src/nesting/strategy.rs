//! Nesting modes behind one trait, looked up by name at run time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::schedule::{build_channel_schedule, build_combined_schedule, build_layer_schedule, LevelSchedule};
use crate::error::{Error, Result};
use crate::nn::Architecture;

pub const DEFAULT_GAMMA: f64 = 1e5;
pub const DEFAULT_CUTOFF: f64 = 0.5;

/// Knobs shared by every nesting mode; each mode reads the ones it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestingParams {
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Pruning thresholds, full level first (ascending).
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub block_counts: Vec<usize>,
    pub gamma: f64,
    pub cutoff: f64,
}

impl Default for NestingParams {
    fn default() -> Self {
        Self {
            fractions: Vec::new(),
            thresholds: Vec::new(),
            block_counts: Vec::new(),
            gamma: DEFAULT_GAMMA,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

pub trait NestingStrategy: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn levels(&self) -> usize;
    fn params(&self) -> &NestingParams;
    /// Widths and block counts per level for `arch`.
    fn schedule(&self, arch: &Architecture) -> Result<LevelSchedule>;
    /// True when levels differ by entry-wise weight masks rather than structure.
    fn uses_masks(&self) -> bool {
        false
    }
    /// True when all levels read one output head.
    fn shares_head(&self) -> bool {
        false
    }
    fn supports_extraction(&self) -> bool {
        !self.uses_masks()
    }
}

#[derive(Debug)]
struct WeightPrune(NestingParams);

impl NestingStrategy for WeightPrune {
    fn name(&self) -> &'static str {
        "weight-prune"
    }
    fn levels(&self) -> usize {
        self.0.thresholds.len()
    }
    fn params(&self) -> &NestingParams {
        &self.0
    }
    fn schedule(&self, arch: &Architecture) -> Result<LevelSchedule> {
        LevelSchedule::full(arch, self.levels())
    }
    fn uses_masks(&self) -> bool {
        true
    }
    fn shares_head(&self) -> bool {
        true
    }
}

#[derive(Debug)]
struct Channel(NestingParams);

impl NestingStrategy for Channel {
    fn name(&self) -> &'static str {
        "channel"
    }
    fn levels(&self) -> usize {
        self.0.fractions.len()
    }
    fn params(&self) -> &NestingParams {
        &self.0
    }
    fn schedule(&self, arch: &Architecture) -> Result<LevelSchedule> {
        build_channel_schedule(arch, &self.0.fractions)
    }
}

#[derive(Debug)]
struct Layer(NestingParams);

impl NestingStrategy for Layer {
    fn name(&self) -> &'static str {
        "layer"
    }
    fn levels(&self) -> usize {
        self.0.block_counts.len()
    }
    fn params(&self) -> &NestingParams {
        &self.0
    }
    fn schedule(&self, arch: &Architecture) -> Result<LevelSchedule> {
        build_layer_schedule(arch, &self.0.block_counts)
    }
}

#[derive(Debug)]
struct ChannelLayer(NestingParams);

impl NestingStrategy for ChannelLayer {
    fn name(&self) -> &'static str {
        "channel+layer"
    }
    fn levels(&self) -> usize {
        self.0.fractions.len()
    }
    fn params(&self) -> &NestingParams {
        &self.0
    }
    fn schedule(&self, arch: &Architecture) -> Result<LevelSchedule> {
        build_combined_schedule(arch, &self.0.fractions, &self.0.block_counts)
    }
}

pub type StrategyFactory = fn(NestingParams) -> Result<Box<dyn NestingStrategy>>;

fn require(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn weight_prune(p: NestingParams) -> Result<Box<dyn NestingStrategy>> {
    require(!p.thresholds.is_empty(), "weight-prune mode needs thresholds")?;
    require(p.fractions.is_empty(), "weight-prune mode conflicts with fractions")?;
    require(
        p.thresholds.iter().all(|&t| t >= 0.0) && p.thresholds.windows(2).all(|w| w[0] <= w[1]),
        "thresholds must be non-negative and ascending",
    )?;
    require(p.gamma > 0.0, "gamma must be positive")?;
    require(p.cutoff > 0.0 && p.cutoff < 1.0, "cutoff must lie in (0, 1)")?;
    Ok(Box::new(WeightPrune(p)))
}

fn channel(p: NestingParams) -> Result<Box<dyn NestingStrategy>> {
    require(!p.fractions.is_empty(), "channel mode needs fractions")?;
    require(p.thresholds.is_empty(), "channel mode conflicts with thresholds")?;
    require(p.block_counts.is_empty(), "channel mode takes no block counts")?;
    Ok(Box::new(Channel(p)))
}

fn layer(p: NestingParams) -> Result<Box<dyn NestingStrategy>> {
    require(!p.block_counts.is_empty(), "layer mode needs block counts")?;
    require(p.thresholds.is_empty(), "layer mode conflicts with thresholds")?;
    require(p.fractions.is_empty(), "layer mode takes no fractions")?;
    Ok(Box::new(Layer(p)))
}

fn channel_layer(p: NestingParams) -> Result<Box<dyn NestingStrategy>> {
    require(
        !p.fractions.is_empty() && !p.block_counts.is_empty(),
        "channel+layer mode needs fractions and block counts",
    )?;
    require(p.thresholds.is_empty(), "channel+layer mode conflicts with thresholds")?;
    Ok(Box::new(ChannelLayer(p)))
}

/// Name → constructor table for nesting modes.
pub struct StrategyRegistry {
    factories: BTreeMap<&'static str, StrategyFactory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("weight-prune", weight_prune);
        r.register("channel", channel);
        r.register("layer", layer);
        r.register("channel+layer", channel_layer);
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, name: &'static str, factory: StrategyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, params: NestingParams) -> Result<Box<dyn NestingStrategy>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown nesting mode `{name}` (known: {})",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(params)
    }
}

/// Picks the mode implied by which knobs are set.
pub fn infer_mode(p: &NestingParams) -> Result<&'static str> {
    match (
        !p.thresholds.is_empty(),
        !p.fractions.is_empty(),
        !p.block_counts.is_empty(),
    ) {
        (true, false, false) => Ok("weight-prune"),
        (false, true, false) => Ok("channel"),
        (false, false, true) => Ok("layer"),
        (false, true, true) => Ok("channel+layer"),
        (false, false, false) => Err(Error::Config(
            "no nesting mode: set thresholds, fractions or block_counts".into(),
        )),
        _ => Err(Error::Config(
            "mode conflict: thresholds cannot be combined with fractions or block_counts".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered() {
        let names: Vec<_> = StrategyRegistry::default().names().collect();
        assert_eq!(names, vec!["channel", "channel+layer", "layer", "weight-prune"]);
    }

    #[test]
    fn modes_selected_by_name() {
        let reg = StrategyRegistry::default();
        let p = NestingParams {
            thresholds: vec![0.0, 0.015, 0.025],
            ..Default::default()
        };
        let s = reg.create("weight-prune", p.clone()).unwrap();
        assert_eq!(s.levels(), 3);
        assert!(s.uses_masks() && s.shares_head() && !s.supports_extraction());
        assert!(reg.create("channel", p).is_err());
        assert!(reg.create("bogus", NestingParams::default()).is_err());
    }

    #[test]
    fn mode_inference() {
        let mut p = NestingParams {
            fractions: vec![0.5, 1.0],
            ..Default::default()
        };
        assert_eq!(infer_mode(&p).unwrap(), "channel");
        p.thresholds = vec![0.0];
        assert!(matches!(infer_mode(&p), Err(Error::Config(m)) if m.contains("conflict")));
    }
}
