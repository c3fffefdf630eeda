//! Bodies of the `nestednet` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_checkpoint, read_header, save_checkpoint, Checkpoint, DataMeta};
use super::config::RunConfig;
use super::gradcheck::{run_gradcheck, ComponentReport};
use crate::consensus::{
    consensus_segments, train_consensus, AverageConsensus, Consensus, ConsensusTrainConfig, LearnedConsensus,
    SegmentLayout,
};
use crate::data::{
    attach_hierarchy, channel_stats, load_cifar10, load_mnist_dir, normalize, Dataset, LabelHierarchy, Split,
};
use crate::error::{Error, Result};
use crate::nesting::{extract_standalone, StrategyRegistry};
use crate::nn::NestedNetwork;
use crate::tensor::{Precision, Scalar};
use crate::training::{
    iterative_prune, score, train, Hooks, LrSchedule, MetricSink, OptimizerState, TrainConfig, TsvLog,
};

pub const FINAL_CHECKPOINT: &str = "final.nnet";
pub const METRICS_LOG: &str = "metrics.tsv";
pub const DIVERGED_CHECKPOINT: &str = "diverged.nnet";

/// Train and test splits prepared as the config describes.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset, DataMeta)> {
    let d = &cfg.data;
    let (mut tr, mut te) = load_raw(&d.dataset, &d.dir)?;
    if let Some(n) = d.train_limit {
        tr = tr.head(n);
    }
    if let Some(n) = d.test_limit {
        te = te.head(n);
    }
    let hierarchy = match (&d.hierarchy, d.builtin_hierarchy.as_deref()) {
        (Some(path), _) => Some(LabelHierarchy::load(path)?),
        (None, Some("digits")) => Some(LabelHierarchy::digits()),
        (None, Some(other)) => return Err(Error::Config(format!("unknown built-in hierarchy `{other}`"))),
        (None, None) => None,
    };
    if let Some(h) = &hierarchy {
        tr = attach_hierarchy(&tr, h)?;
        te = attach_hierarchy(&te, h)?;
    }
    let normalization = if d.normalize.unwrap_or(d.dataset == "cifar10") {
        let stats = channel_stats(&tr);
        normalize(&mut tr, &stats);
        normalize(&mut te, &stats);
        Some(stats)
    } else {
        None
    };
    let meta = DataMeta {
        dataset: d.dataset.clone(),
        hierarchy: hierarchy.map(|h| h.to_text()),
        normalization,
    };
    Ok((tr, te, meta))
}

fn load_raw(dataset: &str, dir: &Path) -> Result<(Dataset, Dataset)> {
    match dataset {
        "mnist" => Ok((load_mnist_dir(dir, Split::Train)?, load_mnist_dir(dir, Split::Test)?)),
        "cifar10" => {
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = train.iter().map(PathBuf::as_path).collect();
            Ok((
                load_cifar10(&refs, Split::Train)?,
                load_cifar10(&[&dir.join("test_batch.bin")], Split::Test)?,
            ))
        }
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

/// Test split of `dir` prepared like the data a checkpoint was trained on.
pub fn load_eval_data(meta: &DataMeta, dir: &Path, limit: Option<usize>) -> Result<Dataset> {
    let (_, mut te) = load_raw(&meta.dataset, dir)?;
    if let Some(n) = limit {
        te = te.head(n);
    }
    if let Some(text) = &meta.hierarchy {
        te = attach_hierarchy(&te, &LabelHierarchy::parse(text)?)?;
    }
    if let Some(stats) = &meta.normalization {
        normalize(&mut te, stats);
    }
    Ok(te)
}

fn build_net<T: Scalar>(cfg: &RunConfig, train: &Dataset) -> Result<NestedNetwork<T>> {
    let strategy = StrategyRegistry::default().create(&cfg.mode()?, cfg.nesting_params())?;
    let s = train.sample_shape();
    let arch = cfg.architecture(
        [s[0], s[1], s[2]],
        train.classes,
        &train.coarse_classes,
        strategy.levels(),
    )?;
    NestedNetwork::new(arch, strategy.as_ref(), cfg.train.seed)
}

/// Paths and headline numbers of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Test accuracy per level, core first.
    pub level_accuracy: Vec<f64>,
    pub densities: Vec<f64>,
    pub consensus_accuracy: Option<f64>,
}

fn fit_consensus<T: Scalar>(
    cfg: &RunConfig,
    net: &NestedNetwork<T>,
    train_set: &Dataset,
) -> Result<Option<Box<dyn Consensus>>> {
    let Some(kind) = cfg.consensus.kind.as_deref() else {
        return Ok(None);
    };
    let layout = SegmentLayout::of(net);
    Ok(Some(match kind {
        "average" => Box::new(AverageConsensus::new(layout)?),
        _ => {
            let mut head = LearnedConsensus::new(layout)?;
            let segments = consensus_segments(net, train_set)?;
            let c = &cfg.consensus;
            let tc = ConsensusTrainConfig {
                lr: LrSchedule::at_fractions(c.lr, 0.1, &[0.4, 0.6, 0.8], c.iterations),
                iterations: c.iterations,
                batch_size: c.batch_size,
                seed: cfg.train.seed,
            };
            train_consensus(&mut head, &segments, &train_set.labels, &tc)?;
            Box::new(head)
        }
    }))
}

fn finish<T: Scalar>(
    cfg: &RunConfig,
    net: &NestedNetwork<T>,
    state: &OptimizerState<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    meta: &DataMeta,
) -> Result<RunOutcome> {
    let consensus = fit_consensus(cfg, net, train_set)?;
    let checkpoint = cfg.output.dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&checkpoint, net, Some(state), consensus.as_deref(), Some(meta))?;
    let mut level_accuracy = Vec::new();
    for k in 1..=net.levels() {
        level_accuracy.push(crate::training::evaluate(net, test_set, k)?.accuracy);
    }
    let consensus_accuracy = match &consensus {
        Some(c) => Some(score(&c.forward(&consensus_segments(net, test_set)?)?, &test_set.labels)?.accuracy),
        None => None,
    };
    Ok(RunOutcome {
        checkpoint,
        metrics: cfg.output.dir.join(METRICS_LOG),
        level_accuracy,
        densities: (1..=net.levels()).map(|k| net.density(k)).collect(),
        consensus_accuracy,
    })
}

struct RunFiles {
    log: TsvLog<std::io::BufWriter<std::fs::File>>,
}

fn open_run(cfg: &RunConfig) -> Result<RunFiles> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_LOG);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(RunFiles {
        log: TsvLog::new(std::io::BufWriter::new(f)),
    })
}

/// Runs `body` with metrics, periodic-checkpoint and divergence hooks wired to the output directory.
fn with_hooks<T: Scalar, R>(
    cfg: &RunConfig,
    meta: &DataMeta,
    body: impl FnOnce(&mut Hooks<'_, T>) -> Result<R>,
) -> Result<R> {
    let mut files = open_run(cfg)?;
    let dir = cfg.output.dir.clone();
    let every = cfg.output.checkpoint_every;
    let mut periodic = |iter: usize, net: &NestedNetwork<T>, state: &OptimizerState<T>| -> Result<()> {
        if every > 0 && iter.is_multiple_of(every) {
            save_checkpoint(
                &dir.join(format!("iter{iter:07}.nnet")),
                net,
                Some(state),
                None,
                Some(meta),
            )?;
        }
        Ok(())
    };
    let diverged = cfg.output.dir.join(DIVERGED_CHECKPOINT);
    let mut dump = |net: &NestedNetwork<T>, state: &OptimizerState<T>| {
        // best effort: the numerical error is what gets reported
        let _ = save_checkpoint(&diverged, net, Some(state), None, Some(meta));
    };
    let result = {
        let mut hooks = Hooks {
            metrics: Some(&mut files.log as &mut dyn MetricSink),
            on_step: Some(&mut periodic),
            on_divergence: Some(&mut dump),
        };
        body(&mut hooks)
    };
    let mut out = files.log.into_inner();
    std::io::Write::flush(&mut out).map_err(|e| Error::io(cfg.output.dir.join(METRICS_LOG), e))?;
    result
}

fn train_as<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let (tr, te, meta) = load_data(cfg)?;
    let mut net = build_net::<T>(cfg, &tr)?;
    if net.uses_masks() {
        return Err(Error::Config(
            "weight-prune configs run with the `prune` command".into(),
        ));
    }
    let tc: TrainConfig = cfg.train_config(tr.len())?;
    let mut state = OptimizerState::new(&net);
    with_hooks(cfg, &meta, |hooks| {
        train(&mut net, &mut state, &tr, Some(&te), &tc, hooks)
    })?;
    finish(cfg, &net, &state, &tr, &te, &meta)
}

fn prune_as<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome> {
    let (tr, te, meta) = load_data(cfg)?;
    let mut net = build_net::<T>(cfg, &tr)?;
    if !net.uses_masks() {
        return Err(Error::Config(format!(
            "`prune` needs weight-prune mode, config gives {}",
            net.mode()
        )));
    }
    let tc = cfg.train_config(tr.len())?;
    let driver = cfg.prune_driver();
    let mut state = OptimizerState::new(&net);
    with_hooks(cfg, &meta, |hooks| {
        iterative_prune(&mut net, &mut state, &tr, Some(&te), &driver, &tc, hooks)
    })?;
    finish(cfg, &net, &state, &tr, &te, &meta)
}

fn dispatch<R>(p: Precision, f32_path: impl FnOnce() -> Result<R>, f64_path: impl FnOnce() -> Result<R>) -> Result<R> {
    match p {
        Precision::F32 => f32_path(),
        Precision::F64 => f64_path(),
    }
}

/// Joint training of every level, then the optional consensus head.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunOutcome> {
    dispatch(cfg.train.precision, || train_as::<f32>(cfg), || train_as::<f64>(cfg))
}

/// Prune-and-continue over the threshold schedule, then the optional consensus head.
pub fn cmd_prune(cfg: &RunConfig) -> Result<RunOutcome> {
    dispatch(cfg.train.precision, || prune_as::<f32>(cfg), || prune_as::<f64>(cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Level(usize),
    All,
    Consensus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// `L{k}` or `consensus-{kind}`.
    pub name: String,
    pub accuracy: f64,
    pub loss: f64,
    pub density: f64,
    pub params: usize,
    pub ms_per_batch: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<20} {:>9} {:>8} {:>8} {:>12} {:>10}\n",
            "level", "accuracy", "loss", "density", "params", "ms/batch"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>8.2}% {:>8.4} {:>7.2}% {:>12} {:>10.3}",
                r.name,
                100.0 * r.accuracy,
                r.loss,
                100.0 * r.density,
                r.params,
                r.ms_per_batch
            );
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("level\taccuracy\tloss\tdensity\tparams\tms_per_batch\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.3}",
                r.name, r.accuracy, r.loss, r.density, r.params, r.ms_per_batch
            );
        }
        s
    }
}

const EVAL_BATCH: usize = 1000;

fn timed_level<T: Scalar>(
    net: &NestedNetwork<T>,
    ds: &Dataset,
    level: usize,
) -> Result<(crate::training::EvalResult, f64)> {
    let start = Instant::now();
    let logits = crate::training::collect_logits(net, ds, level)?;
    let batches = ds.len().div_ceil(EVAL_BATCH).max(1);
    let ms = start.elapsed().as_secs_f64() * 1e3 / batches as f64;
    Ok((score(&logits[0], ds.level_labels(level))?, ms))
}

fn eval_as<T: Scalar>(ck: Checkpoint<T>, ds: &Dataset, target: EvalTarget) -> Result<EvalReport> {
    let net = &ck.net;
    let levels: Vec<usize> = match target {
        EvalTarget::Level(k) => {
            if k == 0 || k > net.levels() {
                return Err(Error::LevelOutOfRange {
                    level: k,
                    levels: net.levels(),
                });
            }
            vec![k]
        }
        EvalTarget::All => (1..=net.levels()).collect(),
        EvalTarget::Consensus => Vec::new(),
    };
    let mut rows = Vec::new();
    for k in levels {
        let (r, ms) = timed_level(net, ds, k)?;
        rows.push(EvalRow {
            name: format!("L{k}"),
            accuracy: r.accuracy,
            loss: r.loss,
            density: net.density(k),
            params: net.param_count(k),
            ms_per_batch: ms,
        });
    }
    if !matches!(target, EvalTarget::Level(_)) {
        match &ck.consensus {
            Some(c) => {
                let start = Instant::now();
                let segments = consensus_segments(net, ds)?;
                let r = score(&c.forward(&segments)?, &ds.labels)?;
                let ms = start.elapsed().as_secs_f64() * 1e3 / ds.len().div_ceil(EVAL_BATCH).max(1) as f64;
                rows.push(EvalRow {
                    name: format!("consensus-{}", c.kind()),
                    accuracy: r.accuracy,
                    loss: r.loss,
                    density: 1.0,
                    params: net.param_count(net.levels()) + c.param_count(),
                    ms_per_batch: ms,
                });
            }
            None if target == EvalTarget::Consensus => {
                return Err(Error::Config("checkpoint has no consensus head".into()));
            }
            None => {}
        }
    }
    Ok(EvalReport { rows })
}

/// Evaluates a checkpoint on the test split found in `data_dir`; never writes the checkpoint.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, target: EvalTarget, limit: Option<usize>) -> Result<EvalReport> {
    let header = read_header(checkpoint)?;
    dispatch(
        header.precision,
        || {
            let ck = load_checkpoint::<f32>(checkpoint)?;
            let ds = load_eval_data(&data_meta(&ck.data)?, data_dir, limit)?;
            eval_as(ck, &ds, target)
        },
        || {
            let ck = load_checkpoint::<f64>(checkpoint)?;
            let ds = load_eval_data(&data_meta(&ck.data)?, data_dir, limit)?;
            eval_as(ck, &ds, target)
        },
    )
}

fn data_meta(m: &Option<DataMeta>) -> Result<DataMeta> {
    m.clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint records no dataset description".into()))
}

fn extract_as<T: Scalar>(checkpoint: &Path, level: usize, out: &Path) -> Result<usize> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let standalone = extract_standalone(&ck.net, level)?;
    save_checkpoint(out, &standalone, None, None, ck.data.as_ref())?;
    Ok(standalone.param_count(1))
}

/// Writes level `level` as a single-level checkpoint; returns its parameter count.
pub fn cmd_extract(checkpoint: &Path, level: usize, out: &Path) -> Result<usize> {
    let header = read_header(checkpoint)?;
    dispatch(
        header.precision,
        || extract_as::<f32>(checkpoint, level, out),
        || extract_as::<f64>(checkpoint, level, out),
    )
}

/// Per-level size and cost of a network.
pub fn structure_report<T: Scalar>(net: &NestedNetwork<T>) -> String {
    let mut s = format!(
        "mode {}  levels {}  stored parameters {}\n{:<6} {:>12} {:>9} {:>14}\n",
        net.mode(),
        net.levels(),
        net.stored_param_count(),
        "level",
        "params",
        "density",
        "flops/sample"
    );
    for k in 1..=net.levels() {
        let _ = writeln!(
            s,
            "L{k:<5} {:>12} {:>8.2}% {:>14}",
            net.param_count(k),
            100.0 * net.density(k),
            net.flops(k)
        );
    }
    s
}

/// Structure report of a checkpoint.
pub fn cmd_report(checkpoint: &Path) -> Result<String> {
    let header = read_header(checkpoint)?;
    dispatch(
        header.precision,
        || load_checkpoint::<f32>(checkpoint).map(|c| structure_report(&c.net)),
        || load_checkpoint::<f64>(checkpoint).map(|c| structure_report(&c.net)),
    )
}

/// Structure report of the network a config would build, without loading data.
pub fn cmd_report_config(cfg: &RunConfig) -> Result<String> {
    let (sample, classes) = match cfg.data.dataset.as_str() {
        "cifar10" => ([32, 32, 3], 10),
        _ => ([28, 28, 1], 10),
    };
    let strategy = StrategyRegistry::default().create(&cfg.mode()?, cfg.nesting_params())?;
    let coarse: Vec<usize> = if cfg.data.builtin_hierarchy.is_some() {
        vec![2]
    } else {
        Vec::new()
    };
    let arch = cfg.architecture(sample, classes, &coarse, strategy.levels())?;
    let net = NestedNetwork::<f32>::new(arch, strategy.as_ref(), cfg.train.seed)?;
    Ok(structure_report(&net))
}

/// Runs every gradient suite; a component above tolerance is a verification failure.
pub fn cmd_gradcheck(seed: u64) -> Result<(String, Vec<ComponentReport>)> {
    let reports = run_gradcheck(seed, None)?;
    let mut s = format!(
        "{:<16} {:>8} {:>12}  worst entry\n",
        "component", "configs", "max rel err"
    );
    for r in &reports {
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>12.3e}  {} {}",
            r.name,
            r.configs,
            r.max_rel,
            if r.passed() { "pass" } else { "FAIL" },
            r.worst
        );
    }
    Ok((s, reports))
}
