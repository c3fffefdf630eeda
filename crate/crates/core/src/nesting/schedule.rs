use serde::{Deserialize, Serialize};

use super::mask::{BinaryMask, MaskHierarchy};
use crate::error::{Error, Result};
use crate::nn::{param_name, ActShape, Architecture, LayerSpec};

/// Per-level channel widths and residual-block counts.
///
/// `widths[i][k]` is the number of output channels (features) of trunk layer `i`
/// at level `k + 1`; `blocks[s][k]` is how many leading blocks of stage `s` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    levels: usize,
    fractions: Vec<f64>,
    widths: Vec<Vec<usize>>,
    blocks: Vec<Vec<usize>>,
    input_channels: usize,
}

/// Geometry of one trunk layer at one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    /// Input channels, or input features for a dense layer.
    pub input: usize,
    pub output: usize,
    /// False for a residual block the level bypasses.
    pub active: bool,
}

/// Active leading sub-box of one weight tensor at one level (`None` when the tensor is unused).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightBlock {
    pub name: String,
    pub full: Vec<usize>,
    pub active: Option<Vec<usize>>,
}

impl LevelSchedule {
    /// Every level is the whole architecture.
    pub fn full(arch: &Architecture, levels: usize) -> Result<Self> {
        let counts = arch.stage_blocks();
        Self::build(arch, vec![1.0; levels], |stage, _| counts[stage], false)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Output width of trunk layer `layer` at a 1-based level.
    pub fn width(&self, layer: usize, level: usize) -> usize {
        self.widths[layer][level - 1]
    }

    pub fn input_width(&self, layer: usize, level: usize) -> usize {
        if layer == 0 {
            self.input_channels
        } else {
            self.width(layer - 1, level)
        }
    }

    pub fn stage_blocks(&self, stage: usize, level: usize) -> usize {
        self.blocks[stage][level - 1]
    }

    pub fn block_counts(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    fn build(
        arch: &Architecture,
        fractions: Vec<f64>,
        counts: impl Fn(usize, usize) -> usize,
        scheduled: bool,
    ) -> Result<Self> {
        let levels = fractions.len();
        if levels == 0 {
            return Err(Error::Schedule("at least one level is required".into()));
        }
        let stages = arch.stage_blocks();
        let blocks: Vec<Vec<usize>> = (0..stages.len())
            .map(|s| (0..levels).map(|k| counts(s, k)).collect())
            .collect();
        let shapes = arch.shapes()?;
        let trunk = arch.trunk();
        let mut widths = vec![vec![0; levels]; trunk.len()];
        for k in 0..levels {
            let f = fractions[k];
            let scaled = |full: usize, what: &str, i: usize| -> Result<usize> {
                let w = (f * full as f64).round() as usize;
                if w == 0 {
                    return Err(Error::Schedule(format!(
                        "fraction {f} leaves {what} layer {i} ({full} wide) with zero width at level {}",
                        k + 1
                    )));
                }
                Ok(w)
            };
            let mut prev = arch.input[2];
            let mut prev_shape = ActShape {
                h: arch.input[0],
                w: arch.input[1],
                c: arch.input[2],
            };
            for (i, spec) in trunk.iter().enumerate() {
                let out = match spec {
                    LayerSpec::Dense {
                        out_features, exempt, ..
                    } => {
                        if prev_shape.h * prev_shape.w > 1 && prev != prev_shape.c {
                            return Err(Error::Schedule(format!(
                                "dense layer {i} flattens a spatial map whose channels are scheduled"
                            )));
                        }
                        if *exempt || !scheduled {
                            *out_features
                        } else {
                            scaled(*out_features, "dense", i)?
                        }
                    }
                    LayerSpec::Conv {
                        out_channels, exempt, ..
                    } => {
                        if *exempt || !scheduled {
                            *out_channels
                        } else {
                            scaled(*out_channels, "conv", i)?
                        }
                    }
                    LayerSpec::ResidualBlock {
                        out_channels,
                        stage,
                        index,
                        projection,
                        ..
                    } => {
                        if *index >= blocks[*stage][k] {
                            prev
                        } else {
                            let w = if scheduled {
                                scaled(*out_channels, "residual", i)?
                            } else {
                                *out_channels
                            };
                            if !projection && w != prev {
                                return Err(Error::Schedule(format!(
                                    "residual block {i} has an identity shortcut but maps {prev} to {w} channels at level {}",
                                    k + 1
                                )));
                            }
                            w
                        }
                    }
                    LayerSpec::BatchNorm { .. } | LayerSpec::Relu | LayerSpec::GlobalAvgPool => prev,
                    LayerSpec::OutputHead { .. } => unreachable!("trunk excludes the head"),
                };
                widths[i][k] = out;
                prev = out;
                prev_shape = shapes[i];
            }
        }
        Ok(Self {
            levels,
            fractions,
            widths,
            blocks,
            input_channels: arch.input[2],
        })
    }

    /// Geometry of every trunk layer at a 1-based level.
    pub fn layer_dims(&self, arch: &Architecture, level: usize) -> Vec<LayerDims> {
        let shapes = arch.shapes().expect("schedule built from a valid architecture");
        arch.trunk()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let input_c = self.input_width(i, level);
                let input = match spec {
                    LayerSpec::Dense { .. } => {
                        let (h, w) = if i == 0 {
                            (arch.input[0], arch.input[1])
                        } else {
                            (shapes[i - 1].h, shapes[i - 1].w)
                        };
                        h * w * input_c
                    }
                    _ => input_c,
                };
                let active = match spec {
                    LayerSpec::ResidualBlock { stage, index, .. } => *index < self.stage_blocks(*stage, level),
                    _ => true,
                };
                LayerDims {
                    input,
                    output: self.width(i, level),
                    active,
                }
            })
            .collect()
    }

    /// Features entering the output head at a 1-based level.
    pub fn head_input(&self, arch: &Architecture, level: usize) -> usize {
        let trunk = arch.trunk();
        if trunk.is_empty() {
            return arch.input.iter().product();
        }
        let last = trunk.len() - 1;
        let shape = arch.shapes().expect("valid architecture")[last];
        shape.h * shape.w * self.width(last, level)
    }

    /// Active region of each trunk weight tensor at a 1-based level.
    pub fn weight_blocks(&self, arch: &Architecture, level: usize) -> Vec<WeightBlock> {
        let dims = self.layer_dims(arch, level);
        let mut out = Vec::new();
        for (i, spec) in arch.trunk().iter().enumerate() {
            let d = dims[i];
            match spec {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => out.push(WeightBlock {
                    name: param_name(i, "weight"),
                    full: vec![*in_features, *out_features],
                    active: Some(vec![d.input, d.output]),
                }),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out.push(WeightBlock {
                    name: param_name(i, "weight"),
                    full: vec![*kernel, *kernel, *in_channels, *out_channels],
                    active: Some(vec![*kernel, *kernel, d.input, d.output]),
                }),
                LayerSpec::ResidualBlock {
                    in_channels,
                    out_channels,
                    projection,
                    ..
                } => {
                    let on = |v: Vec<usize>| if d.active { Some(v) } else { None };
                    out.push(WeightBlock {
                        name: param_name(i, "conv1.weight"),
                        full: vec![3, 3, *in_channels, *out_channels],
                        active: on(vec![3, 3, d.input, d.output]),
                    });
                    out.push(WeightBlock {
                        name: param_name(i, "conv2.weight"),
                        full: vec![3, 3, *out_channels, *out_channels],
                        active: on(vec![3, 3, d.output, d.output]),
                    });
                    if *projection {
                        out.push(WeightBlock {
                            name: param_name(i, "shortcut.weight"),
                            full: vec![1, 1, *in_channels, *out_channels],
                            active: on(vec![1, 1, d.input, d.output]),
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(Error::Schedule("no level fractions given".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Schedule(format!("fraction {f} outside (0, 1]")));
        }
    }
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Schedule(format!("fractions {fractions:?} are not ascending")));
    }
    if *fractions.last().unwrap() != 1.0 {
        return Err(Error::Schedule("the last level fraction must be 1".into()));
    }
    Ok(())
}

fn check_counts(arch: &Architecture, counts: &[usize]) -> Result<()> {
    let stages = arch.stage_blocks();
    if stages.is_empty() {
        return Err(Error::Schedule("layer scheduling needs residual blocks".into()));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Schedule(format!("block counts {counts:?} must be positive")));
    }
    let last = *counts.last().unwrap();
    if let Some((s, &n)) = stages.iter().enumerate().find(|(_, &n)| n != last) {
        return Err(Error::Schedule(format!(
            "the last block count {last} differs from stage {s}'s {n} blocks"
        )));
    }
    Ok(())
}

/// Level `k` keeps the leading `round(fraction_k · width)` channels of every
/// non-exempt layer. The network input is never scheduled.
pub fn build_channel_schedule(arch: &Architecture, fractions: &[f64]) -> Result<LevelSchedule> {
    check_fractions(fractions)?;
    let counts = arch.stage_blocks();
    LevelSchedule::build(arch, fractions.to_vec(), |s, _| counts[s], true)
}

/// Level `k` runs the first `counts[k]` blocks of every stage; the rest pass their input through.
pub fn build_layer_schedule(arch: &Architecture, counts: &[usize]) -> Result<LevelSchedule> {
    check_counts(arch, counts)?;
    if counts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Schedule(format!("block counts {counts:?} are not ascending")));
    }
    LevelSchedule::build(arch, vec![1.0; counts.len()], |_, k| counts[k], false)
}

/// Width and depth scheduled together. Levels are ordered by fraction, then by depth,
/// so two levels need not nest when one is wider and the other deeper.
pub fn build_combined_schedule(arch: &Architecture, fractions: &[f64], counts: &[usize]) -> Result<LevelSchedule> {
    check_fractions(fractions)?;
    check_counts(arch, counts)?;
    if fractions.len() != counts.len() {
        return Err(Error::Schedule(format!(
            "{} fractions but {} block counts",
            fractions.len(),
            counts.len()
        )));
    }
    for k in 1..counts.len() {
        if fractions[k] == fractions[k - 1] && counts[k] < counts[k - 1] {
            return Err(Error::Schedule(format!(
                "levels {} and {} share a width but lose depth",
                k,
                k + 1
            )));
        }
    }
    LevelSchedule::build(arch, fractions.to_vec(), |_, k| counts[k], true)
}

/// Structured masks whose level-`k` support is the leading block the level uses,
/// one hierarchy per non-exempt trunk weight tensor.
pub fn schedule_to_masks(s: &LevelSchedule, arch: &Architecture) -> Result<Vec<(String, MaskHierarchy)>> {
    let per_level: Vec<Vec<WeightBlock>> = (1..=s.levels()).map(|k| s.weight_blocks(arch, k)).collect();
    let exempt: Vec<String> = arch
        .trunk()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_exempt())
        .map(|(i, _)| param_name(i, "weight"))
        .collect();
    let mut out = Vec::new();
    for (t, block) in per_level[0].iter().enumerate() {
        if exempt.contains(&block.name) {
            continue;
        }
        let masks = per_level
            .iter()
            .map(|blocks| leading_mask(&block.full, blocks[t].active.as_deref()))
            .collect();
        out.push((block.name.clone(), MaskHierarchy::new(masks)?));
    }
    Ok(out)
}

/// Mask with ones on the leading sub-box `active` of a tensor shaped `full`.
pub fn leading_mask(full: &[usize], active: Option<&[usize]>) -> BinaryMask {
    let Some(active) = active else {
        return BinaryMask::zeros(full);
    };
    let n: usize = full.iter().product();
    let mut bits = vec![false; n];
    let mut index = vec![0usize; full.len()];
    for bit in bits.iter_mut() {
        *bit = index.iter().zip(active).all(|(i, a)| i < a);
        for d in (0..full.len()).rev() {
            index[d] += 1;
            if index[d] < full[d] {
                break;
            }
            index[d] = 0;
        }
    }
    BinaryMask::new(full.to_vec(), bits).expect("bit count matches shape")
}

/// Fraction of full-level parameters active at `level`.
pub fn hierarchy_density(h: &MaskHierarchy, level: usize) -> f64 {
    h.density(level)
}
