use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, ConvGeometry};

/// One element of a sequential architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
        exempt: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        exempt: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// Pre-activation block: BN-ReLU-conv3×3-BN-ReLU-conv3×3 plus a shortcut,
    /// either the identity or a 1×1 projection of the pre-activated input.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        stage: usize,
        index: usize,
        projection: bool,
    },
    GlobalAvgPool,
    /// Per-level classifiers. `classes` holds one count shared by every level or one per level.
    OutputHead {
        in_features: usize,
        classes: Vec<usize>,
        #[serde(default)]
        aux: Vec<AuxHeadSpec>,
        exempt: bool,
    },
}

/// Extra classifier attached to a level's features (trained on the finest labels).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxHeadSpec {
    pub level: usize,
    pub classes: usize,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::ResidualBlock { .. } => "residual-block",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::OutputHead { .. } => "output-head",
        }
    }

    pub fn is_exempt(&self) -> bool {
        match self {
            LayerSpec::Dense { exempt, .. } | LayerSpec::Conv { exempt, .. } | LayerSpec::OutputHead { exempt, .. } => {
                *exempt
            }
            _ => false,
        }
    }
}

/// Activation geometry between layers (`h = w = 1` once flattened).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ActShape {
    pub fn features(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[height, width, channels]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Self { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Layers before the output head.
    pub fn trunk(&self) -> &[LayerSpec] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn head(&self) -> &LayerSpec {
        self.layers.last().expect("validated architecture has a head")
    }

    pub fn head_classes(&self, levels: usize) -> Vec<usize> {
        match self.head() {
            LayerSpec::OutputHead { classes, .. } if classes.len() == 1 => vec![classes[0]; levels],
            LayerSpec::OutputHead { classes, .. } => classes.clone(),
            _ => unreachable!("validated architecture ends in a head"),
        }
    }

    pub fn aux_heads(&self) -> &[AuxHeadSpec] {
        match self.head() {
            LayerSpec::OutputHead { aux, .. } => aux,
            _ => &[],
        }
    }

    /// Number of residual blocks in each stage, indexed by stage.
    pub fn stage_blocks(&self) -> Vec<usize> {
        let mut counts: Vec<usize> = Vec::new();
        for spec in &self.layers {
            if let LayerSpec::ResidualBlock { stage, .. } = spec {
                if counts.len() <= *stage {
                    counts.resize(stage + 1, 0);
                }
                counts[*stage] += 1;
            }
        }
        counts
    }

    /// Shape flowing out of every trunk layer, for the full network.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut act = ActShape {
            h: self.input[0],
            w: self.input[1],
            c: self.input[2],
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.trunk().iter().enumerate() {
            act = next_shape(i, spec, act)?;
            out.push(act);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Architecture(format!(
                "input {:?} has a zero dimension",
                self.input
            )));
        }
        let heads = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::OutputHead { .. }))
            .count();
        if heads != 1 || !matches!(self.layers.last(), Some(LayerSpec::OutputHead { .. })) {
            return Err(Error::Architecture(
                "exactly one output-head is required, as the last layer".into(),
            ));
        }
        let shapes = self.shapes()?;
        let last = shapes.last().copied().unwrap_or(ActShape {
            h: self.input[0],
            w: self.input[1],
            c: self.input[2],
        });
        if let LayerSpec::OutputHead {
            in_features,
            classes,
            aux,
            ..
        } = self.head()
        {
            if *in_features != last.features() {
                return Err(Error::Architecture(format!(
                    "output-head expects {in_features} features, trunk produces {}",
                    last.features()
                )));
            }
            if classes.is_empty() || classes.iter().chain(aux.iter().map(|a| &a.classes)).any(|&c| c < 2) {
                return Err(Error::Architecture("every head needs at least 2 classes".into()));
            }
        }
        let mut expected_index = Vec::<usize>::new();
        for (i, spec) in self.layers.iter().enumerate() {
            if let LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                stage,
                index,
                projection,
            } = spec
            {
                if !projection && (in_channels != out_channels || *stride != 1) {
                    return Err(Error::Architecture(format!(
                        "layer {i}: identity shortcut cannot change shape"
                    )));
                }
                if expected_index.len() <= *stage {
                    expected_index.resize(stage + 1, 0);
                }
                if *index != expected_index[*stage] {
                    return Err(Error::Architecture(format!(
                        "layer {i}: residual block index {index} out of order in stage {stage}"
                    )));
                }
                expected_index[*stage] += 1;
                if *index > 0 && (in_channels != out_channels || *stride != 1) {
                    return Err(Error::Architecture(format!(
                        "layer {i}: only the first block of a stage may change shape"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain dense network with ReLU between layers.
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut features = input.iter().product();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                in_features: features,
                out_features: h,
                bias: true,
                exempt: false,
            });
            layers.push(LayerSpec::Relu);
            features = h;
        }
        layers.push(LayerSpec::OutputHead {
            in_features: features,
            classes: vec![classes],
            aux: Vec::new(),
            exempt: true,
        });
        Self::new(input, layers)
    }

    /// 3×3 conv-BN-ReLU stack, global average pooling and a head. The first conv is exempt.
    pub fn cnn(input: [usize; 3], channels: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = input[2];
        for (i, &out) in channels.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                in_channels: c,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
                exempt: i == 0,
            });
            layers.push(LayerSpec::BatchNorm { channels: out });
            layers.push(LayerSpec::Relu);
            c = out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::OutputHead {
            in_features: c,
            classes: vec![classes],
            aux: Vec::new(),
            exempt: true,
        });
        Self::new(input, layers)
    }

    /// Pre-activation residual network with `6·blocks + 2` weighted layers for three stages.
    pub fn resnet(
        input: [usize; 3],
        first_channels: usize,
        stage_widths: &[usize],
        blocks: usize,
        classes: usize,
    ) -> Result<Self> {
        if blocks == 0 || stage_widths.is_empty() {
            return Err(Error::Architecture("residual network needs blocks and stages".into()));
        }
        let mut layers = vec![LayerSpec::Conv {
            in_channels: input[2],
            out_channels: first_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
            exempt: true,
        }];
        let mut c = first_channels;
        for (stage, &width) in stage_widths.iter().enumerate() {
            for index in 0..blocks {
                let stride = if stage > 0 && index == 0 { 2 } else { 1 };
                layers.push(LayerSpec::ResidualBlock {
                    in_channels: c,
                    out_channels: width,
                    stride,
                    stage,
                    index,
                    // the exempt first conv stays full width, so the first block always projects
                    projection: c != width || stride != 1 || (stage == 0 && index == 0),
                });
                c = width;
            }
        }
        layers.push(LayerSpec::BatchNorm { channels: c });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::OutputHead {
            in_features: c,
            classes: vec![classes],
            aux: Vec::new(),
            exempt: true,
        });
        Self::new(input, layers)
    }

    /// WRN-`depth`-`widen` on 32×32×3 inputs.
    pub fn wide_resnet(depth: usize, widen: usize, classes: usize) -> Result<Self> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(Error::Architecture(format!("WRN depth {depth} is not 6n+2")));
        }
        let blocks = (depth - 2) / 6;
        Self::resnet([32, 32, 3], 16, &[16 * widen, 32 * widen, 64 * widen], blocks, classes)
    }

    /// Weighted layers counted the usual way: convolutions and dense layers, one head.
    pub fn weighted_depth(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { .. } | LayerSpec::Conv { .. } | LayerSpec::OutputHead { .. } => 1,
                LayerSpec::ResidualBlock { .. } => 2,
                _ => 0,
            })
            .sum()
    }

    pub fn with_head_classes(mut self, classes: Vec<usize>, aux: Vec<AuxHeadSpec>) -> Result<Self> {
        if let Some(LayerSpec::OutputHead { classes: c, aux: a, .. }) = self.layers.last_mut() {
            *c = classes;
            *a = aux;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn set_exempt(&mut self, first: bool, head: bool) {
        let first_weighted = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv { .. }));
        for (i, spec) in self.layers.iter_mut().enumerate() {
            match spec {
                LayerSpec::Dense { exempt, .. } | LayerSpec::Conv { exempt, .. } => {
                    *exempt = Some(i) == first_weighted && first;
                }
                LayerSpec::OutputHead { exempt, .. } => *exempt = head,
                _ => {}
            }
        }
    }
}

fn next_shape(i: usize, spec: &LayerSpec, act: ActShape) -> Result<ActShape> {
    let err = |msg: String| Error::Architecture(format!("layer {i} ({}): {msg}", spec.kind_name()));
    Ok(match *spec {
        LayerSpec::Dense {
            in_features,
            out_features,
            ..
        } => {
            if in_features != act.features() {
                return Err(err(format!("expects {in_features} inputs, gets {}", act.features())));
            }
            if out_features == 0 {
                return Err(err("zero outputs".into()));
            }
            ActShape {
                h: 1,
                w: 1,
                c: out_features,
            }
        }
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            if in_channels != act.c {
                return Err(err(format!("expects {in_channels} channels, gets {}", act.c)));
            }
            if out_channels == 0 || kernel == 0 {
                return Err(err("zero-sized kernel".into()));
            }
            let g = ConvGeometry::new(stride, padding);
            ActShape {
                h: conv_output_size(act.h, kernel, g).map_err(|e| err(e.to_string()))?,
                w: conv_output_size(act.w, kernel, g).map_err(|e| err(e.to_string()))?,
                c: out_channels,
            }
        }
        LayerSpec::BatchNorm { channels } => {
            if channels != act.c {
                return Err(err(format!("expects {channels} channels, gets {}", act.c)));
            }
            act
        }
        LayerSpec::Relu => act,
        LayerSpec::ResidualBlock {
            in_channels,
            out_channels,
            stride,
            ..
        } => {
            if in_channels != act.c {
                return Err(err(format!("expects {in_channels} channels, gets {}", act.c)));
            }
            let g = ConvGeometry::new(stride, 1);
            ActShape {
                h: conv_output_size(act.h, 3, g).map_err(|e| err(e.to_string()))?,
                w: conv_output_size(act.w, 3, g).map_err(|e| err(e.to_string()))?,
                c: out_channels,
            }
        }
        LayerSpec::GlobalAvgPool => ActShape { h: 1, w: 1, c: act.c },
        LayerSpec::OutputHead { .. } => return Err(err("output-head must be last".into())),
    })
}
