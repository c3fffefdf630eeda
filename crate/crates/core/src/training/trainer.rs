use std::io::Write;

use super::objective::{correct, level_gradients};
use super::optimizer::{sgd_step, LevelMode, OptimizerState, TrainConfig};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, NestedNetwork};
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 1000;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub level: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub density: f64,
    pub lr: f64,
}

pub trait MetricSink {
    fn record(&mut self, row: &MetricRow) -> Result<()>;
}

/// Tab-separated metrics with a header line.
pub struct TsvLog<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> TsvLog<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricSink for TsvLog<W> {
    fn record(&mut self, r: &MetricRow) -> Result<()> {
        let io = |e| Error::io("metrics log", e);
        if !self.header_written {
            writeln!(self.out, "iter\tlevel\tsplit\tloss\taccuracy\tdensity\tlr").map_err(io)?;
            self.header_written = true;
        }
        writeln!(
            self.out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.iter, r.level, r.split, r.loss, r.accuracy, r.density, r.lr
        )
        .map_err(io)
    }
}

impl MetricSink for Vec<MetricRow> {
    fn record(&mut self, row: &MetricRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Optional callbacks threaded through a training run.
#[derive(Default)]
pub struct Hooks<'a, T: Scalar> {
    pub metrics: Option<&'a mut dyn MetricSink>,
    /// Called after every optimizer step with the global iteration count.
    pub on_step: Option<&'a mut dyn FnMut(usize, &NestedNetwork<T>, &OptimizerState<T>) -> Result<()>>,
    /// Called with the last good state before a numerical failure is returned.
    pub on_divergence: Option<&'a mut dyn FnMut(&NestedNetwork<T>, &OptimizerState<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// What one training phase optimizes.
#[derive(Clone, Debug)]
pub struct Phase {
    /// Levels whose losses enter the objective.
    pub levels: Vec<usize>,
    pub iterations: usize,
    /// Masked weights may only move inside this level's mask.
    pub update_level: usize,
    /// The decay term covers this level's support.
    pub decay_level: usize,
    /// Global iteration count before the phase, used for batching and logging.
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseReport {
    /// Mean objective value over each pass through the data (a short final pass included).
    pub epoch_losses: Vec<f64>,
    pub final_objective: f64,
}

/// Eval-mode accuracy and mean cross-entropy of a level's head on its labels.
pub fn evaluate<T: Scalar>(net: &NestedNetwork<T>, ds: &Dataset, level: usize) -> Result<EvalResult> {
    let logits = collect_logits(net, ds, level)?;
    score(&logits[0], ds.level_labels(level))
}

pub fn score<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::EmptyTensor("evaluate"));
    }
    let (loss, _) = softmax_cross_entropy(logits, labels)?;
    Ok(EvalResult {
        accuracy: correct(logits, labels) as f64 / labels.len() as f64,
        loss,
    })
}

/// Eval-mode logits of a level's head (first) and its auxiliary heads over a whole dataset.
pub fn collect_logits<T: Scalar>(net: &NestedNetwork<T>, ds: &Dataset, level: usize) -> Result<Vec<Tensor<T>>> {
    if ds.is_empty() {
        return Err(Error::EmptyTensor("evaluate"));
    }
    let mut parts: Vec<Vec<T>> = Vec::new();
    let mut widths = Vec::new();
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_BATCH).min(ds.len());
        let x = ds.images.slice_batch(start, end).cast::<T>();
        let outs = net.infer_all(&x, level)?;
        if parts.is_empty() {
            parts = vec![Vec::new(); outs.len()];
            widths = outs.iter().map(|o| o.shape()[1]).collect();
        }
        for (p, o) in parts.iter_mut().zip(outs) {
            p.extend_from_slice(o.data());
        }
        start = end;
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, w)| Tensor::new(vec![ds.len(), w], p))
        .collect()
}

fn batch_labels(ds: &Dataset, levels: usize, idx: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let per_level = (1..=levels)
        .map(|k| {
            let l = ds.level_labels(k);
            idx.iter().map(|&i| l[i]).collect()
        })
        .collect();
    (per_level, idx.iter().map(|&i| ds.labels[i]).collect())
}

struct Interval {
    loss: Vec<f64>,
    correct: Vec<usize>,
    seen: Vec<usize>,
    steps: usize,
}

impl Interval {
    fn new(levels: usize) -> Self {
        Self {
            loss: vec![0.0; levels],
            correct: vec![0; levels],
            seen: vec![0; levels],
            steps: 0,
        }
    }
}

/// Runs one phase of minibatch SGD on `net`.
pub fn run_phase<T: Scalar>(
    net: &mut NestedNetwork<T>,
    state: &mut OptimizerState<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    phase: &Phase,
    hooks: &mut Hooks<'_, T>,
) -> Result<PhaseReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTensor("training set"));
    }
    let levels = net.levels();
    for &k in phase.levels.iter().chain([&phase.update_level, &phase.decay_level]) {
        if k == 0 || k > levels {
            return Err(Error::LevelOutOfRange { level: k, levels });
        }
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut report = PhaseReport::default();
    let mut epoch_sum = 0.0;
    let mut epoch_steps = 0;
    let mut interval = Interval::new(levels);
    let mut order: Option<(u64, Vec<Vec<usize>>)> = None;
    for local in 0..phase.iterations {
        let global = phase.offset + local;
        let epoch = (global / per_epoch) as u64;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            if epoch_steps > 0 && order.is_some() {
                report.epoch_losses.push(epoch_sum / epoch_steps as f64);
                epoch_sum = 0.0;
                epoch_steps = 0;
            }
            order = Some((epoch, batches(data.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let idx = &order.as_ref().unwrap().1[global % per_epoch];
        let x = data.images.gather_batch(idx).cast::<T>();
        let (labels, fine) = batch_labels(data, levels, idx);
        let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let lr = cfg.lr.at(local);
        let snapshot = hooks.on_divergence.is_some().then(|| (net.clone(), state.clone()));
        let step = (|| -> Result<f64> {
            match cfg.level_mode {
                LevelMode::Simultaneous => {
                    let r = level_gradients(
                        net,
                        &x,
                        &label_refs,
                        &fine,
                        &phase.levels,
                        cfg.lambda,
                        phase.decay_level,
                    )?;
                    sgd_step(net, &r.grads, state, lr, cfg, phase.update_level)?;
                    for (j, &k) in phase.levels.iter().enumerate() {
                        interval.loss[k - 1] += r.level_losses[j];
                        interval.correct[k - 1] += r.level_correct[j];
                        interval.seen[k - 1] += idx.len();
                    }
                    Ok(r.objective)
                }
                LevelMode::Sequential => {
                    let mut objective = 0.0;
                    let last = *phase.levels.last().expect("phase has levels");
                    for &k in &phase.levels {
                        let lam = if k == last { cfg.lambda } else { 0.0 };
                        let r = level_gradients(net, &x, &label_refs, &fine, &[k], lam, phase.decay_level)?;
                        sgd_step(net, &r.grads, state, lr, cfg, phase.update_level)?;
                        interval.loss[k - 1] += r.level_losses[0];
                        interval.correct[k - 1] += r.level_correct[0];
                        interval.seen[k - 1] += idx.len();
                        objective += r.objective / phase.levels.len() as f64;
                    }
                    Ok(objective)
                }
            }
        })();
        let objective = match step {
            Ok(v) => v,
            Err(e) => {
                if let (Some(cb), Some((n, s))) = (hooks.on_divergence.as_mut(), snapshot) {
                    cb(&n, &s);
                }
                return Err(match e {
                    Error::NonFinite(m) => Error::Numerical(format!("diverged at iteration {global}: {m}")),
                    other => other,
                });
            }
        };
        interval.steps += 1;
        epoch_sum += objective;
        epoch_steps += 1;
        report.final_objective = objective;
        if let Some(cb) = hooks.on_step.as_mut() {
            cb(global + 1, net, state)?;
        }
        let done = local + 1 == phase.iterations;
        if done || (cfg.eval_every > 0 && (local + 1) % cfg.eval_every == 0) {
            emit_metrics(net, test, phase, &interval, global + 1, lr, hooks)?;
            interval = Interval::new(levels);
        }
    }
    if epoch_steps > 0 {
        report.epoch_losses.push(epoch_sum / epoch_steps as f64);
    }
    Ok(report)
}

fn emit_metrics<T: Scalar>(
    net: &NestedNetwork<T>,
    test: Option<&Dataset>,
    phase: &Phase,
    interval: &Interval,
    iter: usize,
    lr: f64,
    hooks: &mut Hooks<'_, T>,
) -> Result<()> {
    let Some(sink) = hooks.metrics.as_mut() else {
        return Ok(());
    };
    for &k in &phase.levels {
        let seen = interval.seen[k - 1].max(1);
        let batches = interval.steps.max(1) as f64;
        sink.record(&MetricRow {
            iter,
            level: k,
            split: "train",
            loss: interval.loss[k - 1] / batches,
            accuracy: interval.correct[k - 1] as f64 / seen as f64,
            density: net.density(k),
            lr,
        })?;
        if let Some(test) = test {
            let r = evaluate(net, test, k)?;
            sink.record(&MetricRow {
                iter,
                level: k,
                split: "test",
                loss: r.loss,
                accuracy: r.accuracy,
                density: net.density(k),
                lr,
            })?;
        }
    }
    Ok(())
}

/// Trains every level jointly for `cfg.iterations` steps.
pub fn train<T: Scalar>(
    net: &mut NestedNetwork<T>,
    state: &mut OptimizerState<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    hooks: &mut Hooks<'_, T>,
) -> Result<PhaseReport> {
    let full = net.levels();
    let phase = Phase {
        levels: (1..=full).collect(),
        iterations: cfg.iterations,
        update_level: full,
        decay_level: full,
        offset: 0,
    };
    run_phase(net, state, data, test, cfg, &phase, hooks)
}
