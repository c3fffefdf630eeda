//! Strict TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nesting::{infer_mode, NestingParams, StrategyRegistry, DEFAULT_CUTOFF, DEFAULT_GAMMA};
use crate::nn::{Architecture, AuxHeadSpec, LayerSpec};
use crate::tensor::Precision;
use crate::training::{LevelMode, LrSchedule, PruneDriverConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub nesting: NestingSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub prune: PruneSection,
    pub data: DataSection,
    #[serde(default)]
    pub consensus: ConsensusSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `mlp`, `cnn`, `resnet`, `wide-resnet` or `custom`.
    pub preset: String,
    /// `[h, w, c]`; defaults to the dataset's sample shape.
    pub input: Option<[usize; 3]>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub channels: Vec<usize>,
    pub first_channels: Option<usize>,
    #[serde(default)]
    pub stage_widths: Vec<usize>,
    pub blocks: Option<usize>,
    pub depth: Option<usize>,
    pub widen: Option<usize>,
    /// Defaults to the dataset's class count (per level with a hierarchy).
    pub classes: Option<usize>,
    /// Adds a fine-class head at the core level when a hierarchy is set.
    #[serde(default)]
    pub core_fine_head: bool,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NestingSection {
    /// Inferred from the other keys when absent.
    pub mode: Option<String>,
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub block_counts: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

fn default_cutoff() -> f64 {
    DEFAULT_CUTOFF
}

impl Default for NestingSection {
    fn default() -> Self {
        Self {
            mode: None,
            fractions: Vec::new(),
            thresholds: Vec::new(),
            block_counts: Vec::new(),
            gamma: DEFAULT_GAMMA,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub lr: f64,
    /// Explicit drop iterations; absent places them at 1/2 and 3/4 of the run.
    pub lr_drops: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub level_mode: LevelMode,
    pub seed: u64,
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            lr: t.lr.initial,
            lr_drops: None,
            lr_factor: t.lr.factor,
            momentum: t.momentum,
            nesterov: t.nesterov,
            batch_size: t.batch_size,
            iterations: None,
            epochs: None,
            level_mode: t.level_mode,
            seed: t.seed,
            eval_every: t.eval_every,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub phase_iterations: Option<usize>,
    pub finetune_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `mnist` or `cifar10`.
    pub dataset: String,
    pub dir: PathBuf,
    /// Label hierarchy file (`fine<TAB>coarse…` per line).
    pub hierarchy: Option<PathBuf>,
    /// Built-in hierarchy instead of a file: `digits`.
    pub builtin_hierarchy: Option<String>,
    /// Per-channel standardization from training statistics; default on for CIFAR-10.
    pub normalize: Option<bool>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusSection {
    /// `average`, `learned` or absent.
    pub kind: Option<String>,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        Self {
            kind: None,
            iterations: 50_000,
            batch_size: 128,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Iterations between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

/// Parses, resolves relative paths against the file's directory and checks referenced files.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut cfg.data.dir);
    if let Some(h) = cfg.data.hierarchy.as_mut() {
        resolve(h);
    }
    resolve(&mut cfg.output.dir);
    cfg.check_files()?;
    Ok(cfg)
}

impl RunConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let params = self.nesting_params();
        let inferred = infer_mode(&params)?;
        if let Some(mode) = &self.nesting.mode {
            StrategyRegistry::default().create(mode, params.clone())?;
            if mode != inferred {
                return bad(format!(
                    "mode conflict: mode = \"{mode}\" but the given keys imply \"{inferred}\""
                ));
            }
        }
        if self.train.iterations.is_some() && self.train.epochs.is_some() {
            return bad("set train.iterations or train.epochs, not both".into());
        }
        if !["mnist", "cifar10"].contains(&self.data.dataset.as_str()) {
            return bad(format!(
                "unknown dataset `{}`, expected mnist or cifar10",
                self.data.dataset
            ));
        }
        match (&self.data.hierarchy, self.data.builtin_hierarchy.as_deref()) {
            (Some(_), Some(_)) => return bad("set data.hierarchy or data.builtin_hierarchy, not both".into()),
            (_, Some(b)) if b != "digits" => return bad(format!("unknown built-in hierarchy `{b}`, expected digits")),
            _ => {}
        }
        if let Some(kind) = &self.consensus.kind {
            if !["average", "learned"].contains(&kind.as_str()) {
                return bad(format!("unknown consensus `{kind}`, expected average or learned"));
            }
        }
        self.train_config(1)?.validate()
    }

    fn check_files(&self) -> Result<()> {
        if !self.data.dir.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist",
                self.data.dir.display()
            )));
        }
        if let Some(h) = &self.data.hierarchy {
            if !h.is_file() {
                return Err(Error::Config(format!("hierarchy file {} does not exist", h.display())));
            }
        }
        Ok(())
    }

    pub fn nesting_params(&self) -> NestingParams {
        NestingParams {
            fractions: self.nesting.fractions.clone(),
            thresholds: self.nesting.thresholds.clone(),
            block_counts: self.nesting.block_counts.clone(),
            gamma: self.nesting.gamma,
            cutoff: self.nesting.cutoff,
        }
    }

    pub fn mode(&self) -> Result<String> {
        match &self.nesting.mode {
            Some(m) => Ok(m.clone()),
            None => infer_mode(&self.nesting_params()).map(str::to_string),
        }
    }

    /// Training settings for a training set of `train_len` samples.
    pub fn train_config(&self, train_len: usize) -> Result<TrainConfig> {
        let t = &self.train;
        let iterations = match (t.iterations, t.epochs) {
            (Some(i), _) => i,
            (None, Some(e)) => e * train_len.div_ceil(t.batch_size.max(1)),
            (None, None) => TrainConfig::default().iterations,
        };
        let base = TrainConfig {
            lambda: t.lambda,
            lr: LrSchedule {
                initial: t.lr,
                drops: Vec::new(),
                factor: t.lr_factor,
            },
            momentum: t.momentum,
            nesterov: t.nesterov,
            batch_size: t.batch_size,
            iterations,
            level_mode: t.level_mode,
            seed: t.seed,
            eval_every: t.eval_every,
        };
        let mut cfg = base.with_iterations(iterations);
        if let Some(d) = &t.lr_drops {
            cfg.lr.drops = d.clone();
        }
        Ok(cfg)
    }

    pub fn prune_driver(&self) -> PruneDriverConfig {
        PruneDriverConfig {
            thresholds: self.nesting.thresholds.clone(),
            gamma: self.nesting.gamma,
            cutoff: self.nesting.cutoff,
            phase_iterations: self.prune.phase_iterations,
            finetune_iterations: self.prune.finetune_iterations,
        }
    }

    /// Builds the model for `levels` levels over data of the given shape and label tables.
    pub fn architecture(
        &self,
        sample: [usize; 3],
        fine_classes: usize,
        coarse_classes: &[usize],
        levels: usize,
    ) -> Result<Architecture> {
        let m = &self.model;
        let input = m.input.unwrap_or(sample);
        let classes = m.classes.unwrap_or(fine_classes);
        let need = |what: &str| Error::Config(format!("model.{what} is required for preset `{}`", m.preset));
        let arch = match m.preset.as_str() {
            "mlp" => Architecture::mlp(input, &m.hidden, classes)?,
            "cnn" => Architecture::cnn(input, &m.channels, classes)?,
            "resnet" => Architecture::resnet(
                input,
                m.first_channels.ok_or_else(|| need("first_channels"))?,
                &m.stage_widths,
                m.blocks.ok_or_else(|| need("blocks"))?,
                classes,
            )?,
            "wide-resnet" => Architecture::wide_resnet(
                m.depth.ok_or_else(|| need("depth"))?,
                m.widen.ok_or_else(|| need("widen"))?,
                classes,
            )?,
            "custom" => Architecture::new(input, m.layers.clone())?,
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}`, expected mlp, cnn, resnet, wide-resnet or custom"
                )))
            }
        };
        if coarse_classes.is_empty() {
            return Ok(arch);
        }
        let per_level: Vec<usize> = (0..levels)
            .map(|k| coarse_classes.get(k).copied().unwrap_or(classes))
            .collect();
        let aux = if m.core_fine_head {
            vec![AuxHeadSpec { level: 1, classes }]
        } else {
            Vec::new()
        };
        arch.with_head_classes(per_level, aux)
    }
}

/// Bundled configurations for the three applications.
pub fn preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "mnist-channel" => include_str!("presets/mnist-channel.toml"),
        "mnist-prune" => include_str!("presets/mnist-prune.toml"),
        "mnist-hierarchy" => include_str!("presets/mnist-hierarchy.toml"),
        "cifar10-wrn-channel" => include_str!("presets/cifar10-wrn-channel.toml"),
        _ => return None,
    })
}

pub const PRESETS: [&str; 4] = ["mnist-channel", "mnist-prune", "mnist-hierarchy", "cifar10-wrn-channel"];

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\npreset = \"mlp\"\nhidden = [8]\n[data]\ndataset = \"mnist\"\ndir = \".\"\n[nesting]\nfractions = [0.5, 1.0]\n";

    #[test]
    fn train_defaults_match_the_reference_optimizer() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let t = cfg.train_config(60_000).unwrap();
        assert_eq!(t.momentum, 0.9);
        assert!(t.nesterov);
        assert_eq!(t.lambda, 2e-4);
        assert_eq!(t.lr.initial, 0.1);
        assert_eq!(t.batch_size, 128);
        assert_eq!(t.lr.drops, vec![40_000, 60_000]);
        assert_eq!(cfg.mode().unwrap(), "channel");
    }

    #[test]
    fn epochs_set_the_length() {
        let cfg = parse_config_str(&format!("{MINIMAL}[train]\nepochs = 5\n")).unwrap();
        assert_eq!(cfg.train_config(60_000).unwrap().iterations, 5 * 469);
    }

    #[test]
    fn thresholds_and_fractions_conflict() {
        let err = parse_config_str(&format!("{MINIMAL}thresholds = [0.0, 0.01]\n")).unwrap_err();
        assert!(err.to_string().contains("mode conflict"), "{err}");
        let text = MINIMAL.replace("[nesting]\n", "[nesting]\nmode = \"layer\"\n");
        assert!(parse_config_str(&text).is_err());
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = parse_config_str(&format!("{MINIMAL}[train]\nlearning_rte = 0.1\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rte") && err.contains("line 10"), "{err}");
    }

    #[test]
    fn missing_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL.replace("dir = \".\"", "dir = \"nowhere\"")).unwrap();
        assert!(parse_config(&path).unwrap_err().to_string().contains("does not exist"));
        std::fs::write(&path, MINIMAL).unwrap();
        assert_eq!(parse_config(&path).unwrap().data.dir, dir.path().join("."));
    }

    #[test]
    fn presets_parse() {
        for name in PRESETS {
            let cfg = parse_config_str(preset(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.mode().unwrap();
        }
        let cfg = parse_config_str(preset("mnist-prune").unwrap()).unwrap();
        assert_eq!(cfg.nesting.thresholds, vec![0.0, 0.015, 0.025]);
        let cfg = parse_config_str(preset("cifar10-wrn-channel").unwrap()).unwrap();
        assert_eq!(cfg.nesting.fractions, vec![0.25, 1.0]);
    }

    #[test]
    fn hierarchy_heads() {
        let cfg = parse_config_str(preset("mnist-hierarchy").unwrap()).unwrap();
        let arch = cfg.architecture([28, 28, 1], 10, &[2], 2).unwrap();
        assert_eq!(arch.head_classes(2), vec![2, 10]);
        assert_eq!(arch.aux_heads(), &[AuxHeadSpec { level: 1, classes: 10 }]);
    }
}
