use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::block::{gather_leading, scatter_leading};
use super::layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, column_sums, dense_backward, dense_forward, global_avg_pool,
    global_avg_pool_backward, relu_backward, relu_forward, BatchNormCache, BatchStats, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::nesting::{
    project_in_place, BinaryMask, LayerDims, LevelSchedule, MaskHierarchy, NestingParams, NestingStrategy,
};
use crate::tensor::{checksum, conv2d, conv2d_backward, ConvGeometry, Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Name of a trunk parameter; shared with schedule masks and checkpoints.
pub fn param_name(layer: usize, suffix: &str) -> String {
    format!("layer{layer:02}.{suffix}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    HeadWeight,
    HeadBias,
}

impl ParamRole {
    /// Weight tensors carry the decay term; biases and BN affine parameters do not.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::HeadWeight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
    pub exempt: bool,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadRef {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        w: usize,
        b: Option<usize>,
    },
    Conv {
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    /// One state per level, `None` where the level does not use the layer.
    BatchNorm(Vec<Option<BnRef>>),
    Relu,
    Residual {
        bn1: Vec<Option<BnRef>>,
        conv1: usize,
        bn2: Vec<Option<BnRef>>,
        conv2: usize,
        shortcut: Option<usize>,
        stride: usize,
    },
    Gap,
}

#[derive(Clone, Debug)]
struct DenseCache<T: Scalar> {
    x: Tensor<T>,
    w: Tensor<T>,
}

#[derive(Clone, Debug)]
struct BnCache<T: Scalar> {
    r: BnRef,
    cache: BatchNormCache<T>,
}

#[derive(Clone, Debug)]
struct ResidualCache<T: Scalar> {
    bn1: BnCache<T>,
    h: Tensor<T>,
    w1: Tensor<T>,
    bn2: BnCache<T>,
    z: Tensor<T>,
    w2: Tensor<T>,
    ws: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
enum Cache<T: Scalar> {
    Dense(DenseCache<T>),
    Conv(DenseCache<T>),
    Bn(BnCache<T>),
    Relu(Tensor<T>),
    Residual(Box<ResidualCache<T>>),
    Skip,
    Gap(Vec<usize>),
}

/// Activations recorded by a train-mode forward pass at one level.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f32> {
    net_id: u64,
    version: u64,
    level: usize,
    caches: Vec<Cache<T>>,
    head: DenseCache<T>,
    aux: Vec<(usize, DenseCache<T>)>,
    aux_logits: Vec<Tensor<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn level(&self) -> usize {
        self.level
    }

    /// Outputs of auxiliary heads attached to this level, in declaration order.
    pub fn aux_logits(&self) -> &[Tensor<T>] {
        &self.aux_logits
    }
}

/// One gradient tensor per parameter, shaped like the parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &NestedNetwork<T>) -> Self {
        Self {
            tensors: net.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// `self += factor · other`, tensor by tensor in order.
    pub fn add_scaled(&mut self, other: &Gradients<T>, factor: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

struct Run<T: Scalar> {
    logits: Tensor<T>,
    aux_logits: Vec<Tensor<T>>,
    trace: Option<ForwardTrace<T>>,
    stats: Vec<(BnRef, BatchStats<T>)>,
}

/// Shared-parameter network whose levels are sub-networks of one weight set.
#[derive(Debug)]
pub struct NestedNetwork<T: Scalar = f32> {
    id: u64,
    version: u64,
    arch: Architecture,
    mode: String,
    nesting: NestingParams,
    schedule: LevelSchedule,
    dims: Vec<Vec<LayerDims>>,
    head_inputs: Vec<usize>,
    shared_head: bool,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    masks: Vec<Option<MaskHierarchy>>,
    layers: Vec<Layer>,
    heads: Vec<HeadRef>,
    aux: Vec<(usize, HeadRef)>,
}

impl<T: Scalar> Clone for NestedNetwork<T> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: self.version,
            arch: self.arch.clone(),
            mode: self.mode.clone(),
            nesting: self.nesting.clone(),
            schedule: self.schedule.clone(),
            dims: self.dims.clone(),
            head_inputs: self.head_inputs.clone(),
            shared_head: self.shared_head,
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            masks: self.masks.clone(),
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            aux: self.aux.clone(),
        }
    }
}

struct Builder<'a, T: Scalar> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<Param<T>>,
    buffers: &'a mut Vec<Buffer<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn xavier(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        role: ParamRole,
        exempt: bool,
    ) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.gen_range(-limit..limit))).collect();
        self.push(name, Tensor::from_parts(shape, data), role, exempt)
    }

    fn push(&mut self, name: String, value: Tensor<T>, role: ParamRole, exempt: bool) -> usize {
        self.params.push(Param {
            name,
            value,
            role,
            exempt,
        });
        self.params.len() - 1
    }

    fn zeros(&mut self, name: String, n: usize, role: ParamRole, exempt: bool) -> usize {
        self.push(name, Tensor::zeros(&[n]), role, exempt)
    }

    fn bn(&mut self, prefix: String, level: usize, c: usize) -> BnRef {
        let p = format!("{prefix}.L{level}");
        let scale = self.push(format!("{p}.scale"), Tensor::ones(&[c]), ParamRole::BnScale, false);
        let shift = self.push(format!("{p}.shift"), Tensor::zeros(&[c]), ParamRole::BnShift, false);
        self.buffers.push(Buffer {
            name: format!("{p}.mean"),
            value: Tensor::zeros(&[c]),
        });
        self.buffers.push(Buffer {
            name: format!("{p}.var"),
            value: Tensor::ones(&[c]),
        });
        let var = self.buffers.len() - 1;
        BnRef {
            scale,
            shift,
            mean: var - 1,
            var,
        }
    }

    fn head(&mut self, prefix: &str, fan_in: usize, classes: usize, exempt: bool) -> HeadRef {
        HeadRef {
            w: self.xavier(
                format!("{prefix}.weight"),
                vec![fan_in, classes],
                fan_in,
                classes,
                ParamRole::HeadWeight,
                exempt,
            ),
            b: self.zeros(format!("{prefix}.bias"), classes, ParamRole::HeadBias, exempt),
        }
    }
}

impl<T: Scalar> NestedNetwork<T> {
    /// Builds and Xavier-initializes a network; the same seed gives the same bits.
    pub fn new(arch: Architecture, strategy: &dyn NestingStrategy, seed: u64) -> Result<Self> {
        arch.validate()?;
        let levels = strategy.levels();
        if levels == 0 {
            return Err(Error::Schedule("a network needs at least one level".into()));
        }
        let schedule = strategy.schedule(&arch)?;
        let shared_head = strategy.shares_head();
        let classes = arch.head_classes(levels);
        if classes.len() != levels {
            return Err(Error::Architecture(format!(
                "{} head class counts for {levels} levels",
                classes.len()
            )));
        }
        if shared_head && (classes.iter().any(|&c| c != classes[0]) || !arch.aux_heads().is_empty()) {
            return Err(Error::Unsupported(
                "hierarchical classification needs per-level heads, which weight-prune mode does not have".into(),
            ));
        }
        for a in arch.aux_heads() {
            if a.level == 0 || a.level > levels {
                return Err(Error::LevelOutOfRange { level: a.level, levels });
            }
        }
        let dims: Vec<Vec<LayerDims>> = (1..=levels).map(|k| schedule.layer_dims(&arch, k)).collect();
        let head_inputs: Vec<usize> = (1..=levels).map(|k| schedule.head_input(&arch, k)).collect();

        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
            buffers: &mut buffers,
        };
        let mut layers = Vec::new();
        let per_level_bn = |b: &mut Builder<T>, prefix: String, width: &dyn Fn(usize) -> Option<usize>| {
            (1..=levels)
                .map(|k| width(k).map(|c| b.bn(prefix.clone(), k, c)))
                .collect::<Vec<_>>()
        };
        for (i, spec) in arch.trunk().iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    bias,
                    exempt,
                } => Layer::Dense {
                    w: b.xavier(
                        param_name(i, "weight"),
                        vec![in_features, out_features],
                        in_features,
                        out_features,
                        ParamRole::Weight,
                        exempt,
                    ),
                    b: bias.then(|| b.zeros(param_name(i, "bias"), out_features, ParamRole::Bias, exempt)),
                },
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                    exempt,
                } => Layer::Conv {
                    w: b.xavier(
                        param_name(i, "weight"),
                        vec![kernel, kernel, in_channels, out_channels],
                        kernel * kernel * in_channels,
                        kernel * kernel * out_channels,
                        ParamRole::Weight,
                        exempt,
                    ),
                    b: bias.then(|| b.zeros(param_name(i, "bias"), out_channels, ParamRole::Bias, exempt)),
                    geom: ConvGeometry::new(stride, padding),
                },
                LayerSpec::BatchNorm { .. } => Layer::BatchNorm(per_level_bn(&mut b, param_name(i, "bn"), &|k| {
                    Some(dims[k - 1][i].output)
                })),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::GlobalAvgPool => Layer::Gap,
                LayerSpec::ResidualBlock {
                    in_channels,
                    out_channels,
                    stride,
                    projection,
                    ..
                } => {
                    let active = |k: usize| dims[k - 1][i].active;
                    let bn1 = per_level_bn(&mut b, param_name(i, "bn1"), &|k| {
                        active(k).then(|| dims[k - 1][i].input)
                    });
                    let conv1 = b.xavier(
                        param_name(i, "conv1.weight"),
                        vec![3, 3, in_channels, out_channels],
                        9 * in_channels,
                        9 * out_channels,
                        ParamRole::Weight,
                        false,
                    );
                    let bn2 = per_level_bn(&mut b, param_name(i, "bn2"), &|k| {
                        active(k).then(|| dims[k - 1][i].output)
                    });
                    let conv2 = b.xavier(
                        param_name(i, "conv2.weight"),
                        vec![3, 3, out_channels, out_channels],
                        9 * out_channels,
                        9 * out_channels,
                        ParamRole::Weight,
                        false,
                    );
                    let shortcut = projection.then(|| {
                        b.xavier(
                            param_name(i, "shortcut.weight"),
                            vec![1, 1, in_channels, out_channels],
                            in_channels,
                            out_channels,
                            ParamRole::Weight,
                            false,
                        )
                    });
                    Layer::Residual {
                        bn1,
                        conv1,
                        bn2,
                        conv2,
                        shortcut,
                        stride,
                    }
                }
                LayerSpec::OutputHead { .. } => unreachable!("trunk excludes the head"),
            };
            layers.push(layer);
        }
        let head_exempt = arch.head().is_exempt();
        let heads = if shared_head {
            let h = b.head("head", head_inputs[levels - 1], classes[0], head_exempt);
            vec![h; levels]
        } else {
            (1..=levels)
                .map(|k| b.head(&format!("head.L{k}"), head_inputs[k - 1], classes[k - 1], head_exempt))
                .collect()
        };
        let aux = arch
            .aux_heads()
            .iter()
            .enumerate()
            .map(|(j, a)| {
                (
                    a.level,
                    b.head(
                        &format!("aux{j}.L{}", a.level),
                        head_inputs[a.level - 1],
                        a.classes,
                        head_exempt,
                    ),
                )
            })
            .collect();
        let masks = params
            .iter()
            .map(|p| {
                (strategy.uses_masks() && p.role.is_weight() && !p.exempt)
                    .then(|| MaskHierarchy::uniform(BinaryMask::ones(p.value.shape()), levels))
            })
            .collect();
        Ok(Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            arch,
            mode: strategy.name().to_string(),
            nesting: strategy.params().clone(),
            schedule,
            dims,
            head_inputs,
            shared_head,
            params,
            buffers,
            masks,
            layers,
            heads,
            aux,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn levels(&self) -> usize {
        self.heads.len()
    }

    /// Registry name of the nesting mode.
    pub fn mode(&self) -> &str {
        &self.mode
    }

    pub fn nesting_params(&self) -> &NestingParams {
        &self.nesting
    }

    pub fn schedule(&self) -> &LevelSchedule {
        &self.schedule
    }

    pub fn shares_head(&self) -> bool {
        self.shared_head
    }

    pub fn uses_masks(&self) -> bool {
        self.masks.iter().any(Option::is_some)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        self.version += 1;
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Mask hierarchy of a parameter, present only for masked weights.
    pub fn mask_hierarchy(&self, param: usize) -> Option<&MaskHierarchy> {
        self.masks[param].as_ref()
    }

    pub fn masks(&self) -> &[Option<MaskHierarchy>] {
        &self.masks
    }

    pub fn set_mask_hierarchy(&mut self, param: usize, h: MaskHierarchy) -> Result<()> {
        if h.shape() != self.params[param].value.shape() || h.levels() != self.levels() {
            return Err(Error::dim(
                "set_mask_hierarchy",
                format!("{} does not fit {:?}", self.params[param].name, h.shape()),
            ));
        }
        if self.masks[param].is_none() {
            return Err(Error::Unsupported(format!(
                "{} is not a masked parameter",
                self.params[param].name
            )));
        }
        self.masks[param] = Some(h);
        self.version += 1;
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter().map(|p| &p.value))
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels() {
            return Err(Error::LevelOutOfRange {
                level,
                levels: self.levels(),
            });
        }
        Ok(())
    }

    /// Parameter `p` as seen by `level`: its leading `active` box, masked if applicable.
    fn view(&self, p: usize, active: &[usize], level: usize) -> Tensor<T> {
        let full = &self.params[p].value;
        let masked = match &self.masks[p] {
            Some(h) => {
                let mut t = full.clone();
                project_in_place(t.data_mut(), h.level(level));
                Cow::Owned(t)
            }
            None => Cow::Borrowed(full),
        };
        gather_leading(&masked, active)
    }

    /// Leading slice of a rank-1 parameter.
    fn slice(&self, p: usize, n: usize) -> &[T] {
        &self.params[p].value.data()[..n]
    }

    fn head_view(&self, h: HeadRef, level: usize) -> (Tensor<T>, &[T]) {
        let classes = self.params[h.b].value.len();
        (
            self.view(h.w, &[self.head_inputs[level - 1], classes], level),
            self.params[h.b].value.data(),
        )
    }

    fn prepare_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, c] = self.arch.input;
        if x.rank() == 0 || x.row_len() != h * w * c {
            return Err(Error::dim(
                "forward",
                format!("input {:?} does not carry {h}×{w}×{c} values per sample", x.shape()),
            ));
        }
        x.clone().reshape(&[x.batch(), h, w, c])
    }

    fn run_bn(
        &self,
        x: &Tensor<T>,
        r: BnRef,
        train: bool,
        stats: &mut Vec<(BnRef, BatchStats<T>)>,
    ) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let scale = self.params[r.scale].value.data();
        let shift = self.params[r.shift].value.data();
        if train {
            let (y, cache, s) = batchnorm_train(x, scale, shift)?;
            stats.push((r, s));
            Ok((y, Some(BnCache { r, cache })))
        } else {
            let y = batchnorm_eval(
                x,
                scale,
                shift,
                self.buffers[r.mean].value.data(),
                self.buffers[r.var].value.data(),
            )?;
            Ok((y, None))
        }
    }

    fn run(&self, x: &Tensor<T>, level: usize, train: bool) -> Result<Run<T>> {
        self.check_level(level)?;
        let mut act = self.prepare_input(x)?;
        let dims = &self.dims[level - 1];
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let bn_of = |refs: &[Option<BnRef>]| refs[level - 1].expect("active layer has level state");
        for (i, layer) in self.layers.iter().enumerate() {
            let d = dims[i];
            let (out, cache) = match layer {
                Layer::Dense { w, b } => {
                    let wv = self.view(*w, &[d.input, d.output], level);
                    let y = dense_forward(&act, &wv, b.map(|b| self.slice(b, d.output)))?;
                    (y, Cache::Dense(DenseCache { x: act, w: wv }))
                }
                Layer::Conv { w, b, geom } => {
                    let k = self.params[*w].value.shape()[0];
                    let wv = self.view(*w, &[k, k, d.input, d.output], level);
                    let mut y = conv2d(&act, &wv, *geom)?;
                    if let Some(b) = b {
                        let bias = self.slice(*b, d.output);
                        for row in y.data_mut().chunks_exact_mut(d.output) {
                            for (v, &bv) in row.iter_mut().zip(bias) {
                                *v += bv;
                            }
                        }
                    }
                    (y, Cache::Conv(DenseCache { x: act, w: wv }))
                }
                Layer::BatchNorm(refs) => {
                    let (y, c) = self.run_bn(&act, bn_of(refs), train, &mut stats)?;
                    (y, c.map(Cache::Bn).unwrap_or(Cache::Skip))
                }
                Layer::Relu => {
                    let y = relu_forward(&act);
                    (y.clone(), Cache::Relu(y))
                }
                Layer::Gap => {
                    let shape = act.shape().to_vec();
                    (global_avg_pool(&act), Cache::Gap(shape))
                }
                Layer::Residual { .. } if !d.active => (act, Cache::Skip),
                Layer::Residual {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    shortcut,
                    stride,
                } => {
                    let (a1, c1) = self.run_bn(&act, bn_of(bn1), train, &mut stats)?;
                    let h = relu_forward(&a1);
                    let w1 = self.view(*conv1, &[3, 3, d.input, d.output], level);
                    let y1 = conv2d(&h, &w1, ConvGeometry::new(*stride, 1))?;
                    let (a2, c2) = self.run_bn(&y1, bn_of(bn2), train, &mut stats)?;
                    let z = relu_forward(&a2);
                    let w2 = self.view(*conv2, &[3, 3, d.output, d.output], level);
                    let mut y = conv2d(&z, &w2, ConvGeometry::new(1, 1))?;
                    let ws = shortcut.map(|s| self.view(s, &[1, 1, d.input, d.output], level));
                    match &ws {
                        Some(ws) => y.add_assign(&conv2d(&h, ws, ConvGeometry::new(*stride, 0))?),
                        None => y.add_assign(&act),
                    }
                    let cache = match (c1, c2) {
                        (Some(bn1), Some(bn2)) => Cache::Residual(Box::new(ResidualCache {
                            bn1,
                            h,
                            w1,
                            bn2,
                            z,
                            w2,
                            ws,
                        })),
                        _ => Cache::Skip,
                    };
                    (y, cache)
                }
            };
            act = out;
            if train {
                caches.push(cache);
            }
        }
        let feats = act;
        let (hw, hb) = self.head_view(self.heads[level - 1], level);
        let logits = dense_forward(&feats, &hw, Some(hb))?;
        let mut aux = Vec::new();
        let mut aux_logits = Vec::new();
        for (j, &(lvl, h)) in self.aux.iter().enumerate() {
            if lvl == level {
                let (w, b) = self.head_view(h, level);
                aux_logits.push(dense_forward(&feats, &w, Some(b))?);
                if train {
                    aux.push((j, DenseCache { x: feats.clone(), w }));
                }
            }
        }
        if !logits.all_finite() || aux_logits.iter().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite(format!("forward at level {level}")));
        }
        let trace = train.then(|| ForwardTrace {
            net_id: self.id,
            version: self.version,
            level,
            caches,
            head: DenseCache { x: feats, w: hw },
            aux,
            aux_logits: aux_logits.clone(),
        });
        Ok(Run {
            logits,
            aux_logits,
            trace,
            stats,
        })
    }

    /// Forward pass at `level`. Train mode uses batch statistics, updates the
    /// level's running statistics and records a trace; eval mode uses the running
    /// statistics and returns an empty trace that backward refuses.
    pub fn forward(&mut self, x: &Tensor<T>, level: usize, mode: Mode) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let train = mode == Mode::Train;
        let run = self.run(x, level, train)?;
        let momentum = T::from_f64(BN_MOMENTUM);
        let fresh = T::one() - momentum;
        for (r, (mean, var)) in run.stats {
            for (buf, new) in [(r.mean, mean), (r.var, var)] {
                for (v, n) in self.buffers[buf].value.data_mut().iter_mut().zip(new) {
                    *v = momentum * *v + fresh * n;
                }
            }
        }
        let trace = run.trace.unwrap_or_else(|| ForwardTrace {
            net_id: self.id,
            version: u64::MAX,
            level,
            caches: Vec::new(),
            head: DenseCache {
                x: Tensor::zeros(&[1]),
                w: Tensor::zeros(&[1, 1]),
            },
            aux: Vec::new(),
            aux_logits: Vec::new(),
        });
        Ok((run.logits, trace))
    }

    /// Eval-mode logits without touching any state.
    pub fn infer(&self, x: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
        Ok(self.run(x, level, false)?.logits)
    }

    /// Eval-mode logits of the level head followed by auxiliary heads on that level.
    pub fn infer_all(&self, x: &Tensor<T>, level: usize) -> Result<Vec<Tensor<T>>> {
        let run = self.run(x, level, false)?;
        let mut out = vec![run.logits];
        out.extend(run.aux_logits);
        Ok(out)
    }

    pub fn backward(&self, trace: &ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with_aux(trace, grad_logits, &[])
    }

    /// Backpropagates the level head's gradient plus one gradient per auxiliary output.
    pub fn backward_with_aux(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
        aux_grads: &[Tensor<T>],
    ) -> Result<Gradients<T>> {
        if trace.net_id != self.id || trace.version != self.version {
            return Err(Error::StaleTrace(
                "trace does not belong to this network state or came from an eval pass".into(),
            ));
        }
        let level = trace.level;
        if aux_grads.len() > trace.aux.len() {
            return Err(Error::dim("backward", "more auxiliary gradients than auxiliary heads"));
        }
        let mut grads = Gradients::zeros_like(self);
        let head = self.heads[level - 1];
        let mut dx = self.head_backward(head, &trace.head, grad_logits, level, &mut grads)?;
        for ((j, cache), g) in trace.aux.iter().zip(aux_grads) {
            let d = self.head_backward(self.aux[*j].1, cache, g, level, &mut grads)?;
            dx.add_assign(&d);
        }
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            dx = match (layer, cache) {
                (Layer::Dense { w, b }, Cache::Dense(c)) => {
                    let (dxi, dw, db) = dense_backward(&c.x, &c.w, &dx);
                    self.put_weight(*w, dw, level, &mut grads);
                    if let Some(b) = b {
                        self.put_vec(*b, &db, &mut grads);
                    }
                    dxi
                }
                (Layer::Conv { w, b, geom }, Cache::Conv(c)) => {
                    let (dxi, dw) = conv2d_backward(&c.x, &c.w, &dx, *geom)?;
                    self.put_weight(*w, dw, level, &mut grads);
                    if let Some(b) = b {
                        let db = column_sums(dx.data(), *dx.shape().last().unwrap());
                        self.put_vec(*b, &db, &mut grads);
                    }
                    dxi
                }
                (Layer::BatchNorm(_), Cache::Bn(c)) => self.bn_backward(c, &dx, &mut grads),
                (Layer::Relu, Cache::Relu(y)) => relu_backward(y, &dx),
                (Layer::Gap, Cache::Gap(shape)) => global_avg_pool_backward(shape, &dx),
                (Layer::Residual { .. }, Cache::Skip) => dx,
                (
                    Layer::Residual {
                        conv1,
                        conv2,
                        shortcut,
                        stride,
                        ..
                    },
                    Cache::Residual(c),
                ) => {
                    let (dz, dw2) = conv2d_backward(&c.z, &c.w2, &dx, ConvGeometry::new(1, 1))?;
                    self.put_weight(*conv2, dw2, level, &mut grads);
                    let da2 = relu_backward(&c.z, &dz);
                    let dy1 = self.bn_backward(&c.bn2, &da2, &mut grads);
                    let (mut dh, dw1) = conv2d_backward(&c.h, &c.w1, &dy1, ConvGeometry::new(*stride, 1))?;
                    self.put_weight(*conv1, dw1, level, &mut grads);
                    let identity = match (shortcut, &c.ws) {
                        (Some(s), Some(ws)) => {
                            let (dhs, dws) = conv2d_backward(&c.h, ws, &dx, ConvGeometry::new(*stride, 0))?;
                            self.put_weight(*s, dws, level, &mut grads);
                            dh.add_assign(&dhs);
                            None
                        }
                        _ => Some(dx),
                    };
                    let da1 = relu_backward(&c.h, &dh);
                    let mut dxi = self.bn_backward(&c.bn1, &da1, &mut grads);
                    if let Some(id) = identity {
                        dxi.add_assign(&id);
                    }
                    dxi
                }
                _ => {
                    return Err(Error::StaleTrace(format!("trace does not match layer {i}")));
                }
            };
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("backward at level {level}")));
        }
        Ok(grads)
    }

    fn head_backward(
        &self,
        h: HeadRef,
        cache: &DenseCache<T>,
        dy: &Tensor<T>,
        level: usize,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if dy.shape() != [cache.x.batch(), cache.w.shape()[1]] {
            return Err(Error::dim(
                "backward",
                format!("gradient {:?} does not match head output", dy.shape()),
            ));
        }
        let (dx, dw, db) = dense_backward(&cache.x, &cache.w, dy);
        self.put_weight(h.w, dw, level, grads);
        self.put_vec(h.b, &db, grads);
        Ok(dx)
    }

    fn bn_backward(&self, c: &BnCache<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
        let scale = self.params[c.r.scale].value.data();
        let (dx, ds, db) = batchnorm_backward(&c.cache, scale, dy);
        self.put_vec(c.r.scale, &ds, grads);
        self.put_vec(c.r.shift, &db, grads);
        dx
    }

    /// Adds a block gradient into the full-shape slot, masked to the level's support.
    fn put_weight(&self, p: usize, block: Tensor<T>, level: usize, grads: &mut Gradients<T>) {
        let mut full = scatter_leading(&block, self.params[p].value.shape());
        if let Some(h) = &self.masks[p] {
            project_in_place(full.data_mut(), h.level(level));
        }
        grads.tensors[p].add_assign(&full);
    }

    fn put_vec(&self, p: usize, g: &[T], grads: &mut Gradients<T>) {
        for (a, &v) in grads.tensors[p].data_mut().iter_mut().zip(g) {
            *a += v;
        }
    }

    /// Indices of the parameters a level reads.
    pub fn level_params(&self, level: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let d = &self.dims[level - 1];
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, b } | Layer::Conv { w, b, .. } => {
                    out.push(*w);
                    out.extend(b);
                }
                Layer::BatchNorm(refs) => out.extend(refs[level - 1].iter().flat_map(|r| [r.scale, r.shift])),
                Layer::Residual {
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    shortcut,
                    ..
                } if d[i].active => {
                    out.extend(bn1[level - 1].iter().flat_map(|r| [r.scale, r.shift]));
                    out.push(*conv1);
                    out.extend(bn2[level - 1].iter().flat_map(|r| [r.scale, r.shift]));
                    out.push(*conv2);
                    out.extend(shortcut);
                }
                _ => {}
            }
        }
        let h = self.heads[level - 1];
        out.extend([h.w, h.b]);
        out
    }

    /// Parameters active at `level`: leading-block sizes, or mask support in weight-prune mode.
    /// Batch-norm scale/shift of the level and its head count; auxiliary heads do not.
    pub fn param_count(&self, level: usize) -> usize {
        let d = &self.dims[level - 1];
        let mut n = 0;
        let masked = |p: usize, area: usize| match &self.masks[p] {
            Some(h) => h.level(level).count_ones(),
            None => area,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let di = d[i];
            match layer {
                Layer::Dense { w, b } => {
                    n += masked(*w, di.input * di.output) + b.map_or(0, |_| di.output);
                }
                Layer::Conv { w, b, .. } => {
                    let k = self.params[*w].value.shape()[0];
                    n += masked(*w, k * k * di.input * di.output) + b.map_or(0, |_| di.output);
                }
                Layer::BatchNorm(_) => n += 2 * di.output,
                Layer::Residual {
                    conv1, conv2, shortcut, ..
                } if di.active => {
                    n += 2 * di.input + 2 * di.output;
                    n += masked(*conv1, 9 * di.input * di.output);
                    n += masked(*conv2, 9 * di.output * di.output);
                    if let Some(s) = shortcut {
                        n += masked(*s, di.input * di.output);
                    }
                }
                _ => {}
            }
        }
        let h = self.heads[level - 1];
        let classes = self.params[h.b].value.len();
        n + masked(h.w, self.head_inputs[level - 1] * classes) + classes
    }

    /// Active parameters at `level` over active parameters at the full level.
    pub fn density(&self, level: usize) -> f64 {
        self.param_count(level) as f64 / self.param_count(self.levels()) as f64
    }

    /// Number of stored scalar parameters (every level's state and head included).
    pub fn stored_param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Multiply-adds per sample at `level`, counting only unmasked weights.
    pub fn flops(&self, level: usize) -> usize {
        let d = &self.dims[level - 1];
        let shapes = self.arch.shapes().expect("valid architecture");
        let masked = |p: usize, area: usize| match &self.masks[p] {
            Some(h) => h.level(level).count_ones(),
            None => area,
        };
        let mut n = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let di = d[i];
            let pixels = shapes[i].h * shapes[i].w;
            match layer {
                Layer::Dense { w, .. } => n += masked(*w, di.input * di.output),
                Layer::Conv { w, .. } => {
                    let k = self.params[*w].value.shape()[0];
                    n += pixels * masked(*w, k * k * di.input * di.output);
                }
                Layer::Residual {
                    conv1, conv2, shortcut, ..
                } if di.active => {
                    n += pixels * masked(*conv1, 9 * di.input * di.output);
                    n += pixels * masked(*conv2, 9 * di.output * di.output);
                    if let Some(s) = shortcut {
                        n += pixels * masked(*s, di.input * di.output);
                    }
                }
                _ => {}
            }
        }
        let h = self.heads[level - 1];
        n + masked(h.w, self.head_inputs[level - 1] * self.params[h.b].value.len())
    }

    /// Head class count of each level.
    pub fn level_classes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| self.params[h.b].value.len()).collect()
    }

    /// `(level, classes)` of each auxiliary head.
    pub fn aux_heads(&self) -> Vec<(usize, usize)> {
        self.aux
            .iter()
            .map(|&(l, h)| (l, self.params[h.b].value.len()))
            .collect()
    }

    pub(crate) fn layer_dims(&self, level: usize) -> &[LayerDims] {
        &self.dims[level - 1]
    }

    pub(crate) fn head_input(&self, level: usize) -> usize {
        self.head_inputs[level - 1]
    }
}
