use super::strategy::{NestingParams, StrategyRegistry};
use crate::error::{Error, Result};
use crate::nn::{gather_leading, param_name, Architecture, AuxHeadSpec, LayerSpec, NestedNetwork};
use crate::tensor::Scalar;

/// Copies the blocks one level uses into an independent single-level network.
pub fn extract_standalone<T: Scalar>(net: &NestedNetwork<T>, level: usize) -> Result<NestedNetwork<T>> {
    if net.uses_masks() || net.mode() == "weight-prune" {
        return Err(Error::Unsupported(
            "weight-pruned levels keep dense tensor shapes, so extraction would not shrink them; \
             report the level density instead"
                .into(),
        ));
    }
    if level == 0 || level > net.levels() {
        return Err(Error::LevelOutOfRange {
            level,
            levels: net.levels(),
        });
    }
    let arch = net.arch();
    let dims = net.layer_dims(level);
    let mut layers = Vec::new();
    // (source name, destination name) for every tensor to copy
    let mut params: Vec<(String, String)> = Vec::new();
    let mut buffers: Vec<(String, String)> = Vec::new();
    let bn = |src: String, dst: String, params: &mut Vec<(String, String)>, buffers: &mut Vec<(String, String)>| {
        for s in ["scale", "shift"] {
            params.push((format!("{src}.L{level}.{s}"), format!("{dst}.L1.{s}")));
        }
        for s in ["mean", "var"] {
            buffers.push((format!("{src}.L{level}.{s}"), format!("{dst}.L1.{s}")));
        }
    };
    for (i, spec) in arch.trunk().iter().enumerate() {
        let d = dims[i];
        let j = layers.len();
        let spec = match spec.clone() {
            LayerSpec::Dense { bias, exempt, .. } => LayerSpec::Dense {
                in_features: d.input,
                out_features: d.output,
                bias,
                exempt,
            },
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                bias,
                exempt,
                ..
            } => LayerSpec::Conv {
                in_channels: d.input,
                out_channels: d.output,
                kernel,
                stride,
                padding,
                bias,
                exempt,
            },
            LayerSpec::BatchNorm { .. } => {
                bn(param_name(i, "bn"), param_name(j, "bn"), &mut params, &mut buffers);
                LayerSpec::BatchNorm { channels: d.output }
            }
            LayerSpec::ResidualBlock { .. } if !d.active => continue,
            LayerSpec::ResidualBlock {
                stride,
                stage,
                index,
                projection,
                ..
            } => {
                bn(param_name(i, "bn1"), param_name(j, "bn1"), &mut params, &mut buffers);
                bn(param_name(i, "bn2"), param_name(j, "bn2"), &mut params, &mut buffers);
                let mut parts = vec!["conv1.weight", "conv2.weight"];
                if projection {
                    parts.push("shortcut.weight");
                }
                for part in parts {
                    params.push((param_name(i, part), param_name(j, part)));
                }
                LayerSpec::ResidualBlock {
                    in_channels: d.input,
                    out_channels: d.output,
                    stride,
                    stage,
                    index,
                    projection,
                }
            }
            other => other,
        };
        if matches!(spec, LayerSpec::Dense { .. } | LayerSpec::Conv { .. }) {
            params.push((param_name(i, "weight"), param_name(j, "weight")));
            params.push((param_name(i, "bias"), param_name(j, "bias")));
        }
        layers.push(spec);
    }
    let classes = net.level_classes()[level - 1];
    let head_src = if net.shares_head() {
        "head".to_string()
    } else {
        format!("head.L{level}")
    };
    for s in ["weight", "bias"] {
        params.push((format!("{head_src}.{s}"), format!("head.L1.{s}")));
    }
    let mut aux = Vec::new();
    for (a, &(lvl, c)) in net.aux_heads().iter().enumerate() {
        if lvl == level {
            for s in ["weight", "bias"] {
                params.push((format!("aux{a}.L{level}.{s}"), format!("aux{}.L1.{s}", aux.len())));
            }
            aux.push(AuxHeadSpec { level: 1, classes: c });
        }
    }
    layers.push(LayerSpec::OutputHead {
        in_features: net.head_input(level),
        classes: vec![classes],
        aux,
        exempt: arch.head().is_exempt(),
    });
    let standalone = Architecture::new(arch.input, layers)?;
    let strategy = StrategyRegistry::default().create(
        "channel",
        NestingParams {
            fractions: vec![1.0],
            ..net.nesting_params().clone()
        }
        .without_thresholds(),
    )?;
    let mut out = NestedNetwork::new(standalone, strategy.as_ref(), 0)?;
    for (src, dst) in params {
        let Some(s) = net.param_index(&src) else { continue };
        let d = out
            .param_index(&dst)
            .ok_or_else(|| Error::Verification(format!("extracted network lacks {dst}")))?;
        let shape = out.params()[d].value.shape().to_vec();
        out.params_mut()[d].value = gather_leading(&net.params()[s].value, &shape);
    }
    for (src, dst) in buffers {
        let s = net.buffers().iter().position(|b| b.name == src);
        let d = out.buffers().iter().position(|b| b.name == dst);
        if let (Some(s), Some(d)) = (s, d) {
            let shape = out.buffers()[d].value.shape().to_vec();
            out.buffers_mut()[d].value = gather_leading(&net.buffers()[s].value, &shape);
        }
    }
    Ok(out)
}

impl NestingParams {
    fn without_thresholds(mut self) -> Self {
        self.thresholds.clear();
        self.block_counts.clear();
        self
    }
}
