//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! MNIST is read from `NESTEDNET_MNIST_DIR`, default `data/mnist` at the workspace root.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use nestednet::cli::checkpoint::{decode, encode, load_checkpoint};
use nestednet::cli::commands::{cmd_gradcheck, cmd_prune, cmd_train, load_data, load_eval_data, RunOutcome};
use nestednet::cli::config::{parse_config_str, preset, RunConfig};
use nestednet::consensus::{
    consensus_segments, train_consensus, AverageConsensus, Consensus, ConsensusTrainConfig, LearnedConsensus,
    SegmentLayout,
};
use nestednet::data::{Dataset, Split};
use nestednet::nesting::{
    approx_step, binarize, build_channel_schedule, compute_soft_mask, extract_standalone, project, schedule_to_masks,
    validate_nesting, MaskHierarchy, NestingParams, NestingReport, StrategyRegistry, DEFAULT_CUTOFF, DEFAULT_GAMMA,
};
use nestednet::nn::{Architecture, Mode, NestedNetwork};
use nestednet::tensor::Tensor;
use nestednet::training::{
    evaluate, iterative_prune, lr_at, pruned_positions_are_zero, score, Hooks, OptimizerState, PruneDriverConfig,
    TrainConfig,
};
use nestednet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: Error) -> String {
    format!("error: {e}")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("NESTEDNET_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn preset_config(name: &str, out: &Path) -> Result<RunConfig> {
    let mut cfg = parse_config_str(preset(name).expect("bundled preset"))?;
    cfg.data.dir = mnist_dir();
    cfg.output.dir = out.join(name);
    if !cfg.data.dir.join("train-images-idx3-ubyte").is_file() {
        return Err(Error::Config(format!("MNIST not found in {}", cfg.data.dir.display())));
    }
    Ok(cfg)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn toy_data(rng: &mut ChaCha8Rng, n: usize, features: usize, classes: usize) -> Dataset {
    let x: Vec<f32> = (0..n * features).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n)
        .map(|i| {
            let s: f32 = x[i * features..(i + 1) * features].iter().step_by(2).sum();
            ((s + 2.0).max(0.0) as usize).min(classes - 1)
        })
        .collect();
    Dataset::new(
        Tensor::new(vec![n, 1, 1, features], x).unwrap(),
        labels,
        classes,
        Split::Train,
    )
    .unwrap()
}

fn pruned_mlp(rng: &mut ChaCha8Rng, thresholds: Vec<f64>, features: usize, hidden: usize) -> NestedNetwork<f64> {
    let arch = Architecture::mlp([1, 1, features], &[hidden], 3).unwrap();
    let s = StrategyRegistry::default()
        .create(
            "weight-prune",
            NestingParams {
                thresholds,
                ..Default::default()
            },
        )
        .unwrap();
    NestedNetwork::new(arch, s.as_ref(), rng.gen()).unwrap()
}

fn c1_gradcheck() -> Verdict {
    let t = Instant::now();
    let (_, reports) = cmd_gradcheck(0).map_err(fail)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let bad: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let enough = reports.iter().all(|r| r.configs >= 20);
    check(
        bad.is_empty() && enough && secs < 120.0,
        format!(
            "{} components, worst rel err {worst:.2e}, {secs:.1}s, failing {bad:?}",
            reports.len()
        ),
    )
}

fn c2_nesting_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut scheduled = 0;
    while scheduled < 1000 {
        let levels = rng.gen_range(2..=4);
        let mut fr: Vec<f64> = (0..levels - 1).map(|_| rng.gen_range(0.05..0.95)).collect();
        fr.sort_by(f64::total_cmp);
        fr.dedup();
        fr.push(1.0);
        let arch = if rng.gen_bool(0.5) {
            let h: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..40)).collect();
            Architecture::mlp([1, 1, rng.gen_range(2..10)], &h, rng.gen_range(2..6))
        } else {
            let c: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..24)).collect();
            Architecture::cnn([6, 6, rng.gen_range(1..4)], &c, rng.gen_range(2..6))
        }
        .map_err(fail)?;
        let s = match build_channel_schedule(&arch, &fr) {
            Ok(s) => s,
            // a fraction too small for a narrow layer is rejected, not nested
            Err(Error::Schedule(_)) => continue,
            Err(e) => return Err(fail(e)),
        };
        for (name, h) in schedule_to_masks(&s, &arch).map_err(fail)? {
            let r = validate_nesting(&h);
            if r != NestingReport::Ok {
                return Err(format!("scheduled {name} with fractions {fr:?}: {r:?}"));
            }
            scheduled += 1;
        }
    }

    let mut pruned = 0;
    let mut runs = 0;
    while pruned < 1000 {
        runs += 1;
        let levels = rng.gen_range(2..=3);
        let mut taus = vec![rng.gen_range(0.0..0.02)];
        for _ in 1..levels {
            let last = *taus.last().unwrap();
            taus.push(last + rng.gen_range(0.005..0.05));
        }
        let mut net = pruned_mlp(&mut rng, taus.clone(), 6, 12);
        let data = toy_data(&mut rng, 64, 6, 3);
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default().with_iterations(3 * levels)
        };
        let mut seen = Vec::<MaskHierarchy>::new();
        let mut grab = |_: usize, n: &NestedNetwork<f64>, _: &OptimizerState<f64>| -> Result<()> {
            seen.extend(n.masks().iter().flatten().cloned());
            Ok(())
        };
        let mut hooks = Hooks {
            on_step: Some(&mut grab),
            ..Default::default()
        };
        let mut state = OptimizerState::default();
        match iterative_prune(
            &mut net,
            &mut state,
            &data,
            None,
            &PruneDriverConfig::new(taus.clone()),
            &cfg,
            &mut hooks,
        ) {
            Ok(_) | Err(Error::EmptyMask(_)) => {}
            Err(e) => return Err(format!("prune run with τ {taus:?}: {e}")),
        }
        for h in &seen {
            let r = validate_nesting(h);
            if r != NestingReport::Ok {
                return Err(format!("prune phase with τ {taus:?}: {r:?}"));
            }
        }
        pruned += seen.len();
    }

    for i in 0..1000 {
        let len = rng.gen_range(1..200);
        let w = random_tensor(&mut rng, &[len], 1.0);
        let bits: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
        let m = nestednet::nesting::BinaryMask::new(vec![len], bits).unwrap();
        let once = project(&w, &m).map_err(fail)?;
        if project(&once, &m).map_err(fail)? != once {
            return Err(format!("projection not idempotent on tensor {i}"));
        }
        let (a, b) = {
            let x: f64 = rng.gen_range(0.0..1.0);
            let y: f64 = rng.gen_range(0.0..1.0);
            (x.min(y), x.max(y))
        };
        let g = DEFAULT_GAMMA;
        let lo = binarize(&compute_soft_mask(&w, a, g), DEFAULT_CUTOFF);
        let hi = binarize(&compute_soft_mask(&w, b, g), DEFAULT_CUTOFF);
        if !hi.is_subset_of(&lo) {
            return Err(format!("mask at τ={b} not inside mask at τ={a} on tensor {i}"));
        }
    }
    Ok(format!(
        "{scheduled} scheduled and {pruned} pruned hierarchies ({runs} prune runs) nest; 1000 tensors idempotent and monotone"
    ))
}

fn c3_step_fidelity() -> Verdict {
    let g = DEFAULT_GAMMA;
    let zero_below = [0.0, -1e-12, -1e-4, -1.0, -1e9]
        .iter()
        .all(|&x| approx_step(x, g) == 0.0);
    let saturated = [1e-4, 2e-4, 1e-2, 1.0, 1e6]
        .iter()
        .all(|&x| approx_step(x, g) >= 0.99999);
    // tanh(γx) = 1/2  ⇔  x = atanh(1/2) / γ
    let edge = 0.5f64.atanh() / g;
    let tau = 0.1;
    let w = Tensor::new(
        vec![4],
        vec![
            tau + edge * (1.0 + 1e-6),
            -(tau + edge * (1.0 + 1e-6)),
            tau + edge * (1.0 - 1e-6),
            tau,
        ],
    )
    .unwrap();
    let m = binarize(&compute_soft_mask(&w, tau, g), DEFAULT_CUTOFF);
    let admits = m.bits() == [true, true, false, false];
    check(
        zero_below && saturated && admits && (edge - 5.49e-6).abs() < 5e-9,
        format!("σ(x≤0)=0: {zero_below}, σ(x≥1e-4)≥0.99999: {saturated}, cutoff edge {edge:.4e} admits exactly above: {admits}"),
    )
}

fn c4_zero_stays_zero() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let taus = vec![0.05, 0.12];
    let mut net = pruned_mlp(&mut rng, taus.clone(), 16, 64);
    let data = toy_data(&mut rng, 512, 16, 3);
    let cfg = TrainConfig {
        batch_size: 32,
        ..TrainConfig::default().with_iterations(500)
    };
    let driver = PruneDriverConfig {
        phase_iterations: Some(250),
        finetune_iterations: Some(250),
        ..PruneDriverConfig::new(taus)
    };
    let mut steps = 0;
    let mut zero = |_: usize, n: &NestedNetwork<f64>, _: &OptimizerState<f64>| -> Result<()> {
        steps += 1;
        pruned_positions_are_zero(n).map_err(Error::Verification)
    };
    let mut hooks = Hooks {
        on_step: Some(&mut zero),
        ..Default::default()
    };
    let report = iterative_prune(
        &mut net,
        &mut OptimizerState::default(),
        &data,
        None,
        &driver,
        &cfg,
        &mut hooks,
    )
    .map_err(fail)?;
    let d = &report.densities;
    let (mut kept, mut total) = (0, 0);
    for h in net.masks().iter().flatten() {
        kept += h.level(2).count_ones();
        total += h.level(2).len();
    }
    check(
        steps == 500 && kept < total,
        format!(
            "{steps} steps checked, {} masked entries stayed 0; core density {:.3}",
            total - kept,
            d[0]
        ),
    )
}

fn c5_block_equivalence() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = Architecture::cnn([8, 8, 3], &[8, 16, 16], 10).map_err(fail)?;
    let s = StrategyRegistry::default()
        .create(
            "channel",
            NestingParams {
                fractions: vec![0.25, 0.5, 1.0],
                ..Default::default()
            },
        )
        .map_err(fail)?;
    let mut net = NestedNetwork::<f32>::new(arch, s.as_ref(), 5).map_err(fail)?;
    // non-trivial running statistics at every level
    for _ in 0..5 {
        let x = random_tensor(&mut rng, &[16, 8, 8, 3], 1.0).cast::<f32>();
        for k in 1..=3 {
            net.forward(&x, k, Mode::Train).map_err(fail)?;
        }
    }
    let x = random_tensor(&mut rng, &[100, 8, 8, 3], 1.0).cast::<f32>();
    let mut worst = 0.0f64;
    for k in 1..=3 {
        let ex = extract_standalone(&net, k).map_err(fail)?;
        worst = worst.max(
            net.infer(&x, k)
                .map_err(fail)?
                .max_abs_diff(&ex.infer(&x, 1).map_err(fail)?),
        );
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 60.0,
        format!("max |Δlogit| {worst:.2e} over 3 levels x 100 inputs, {secs:.2}s"),
    )
}

fn c6_nested_training(out: &Path) -> std::result::Result<(RunOutcome, RunConfig, Duration), String> {
    let cfg = preset_config("mnist-channel", out).map_err(fail)?;
    let t = Instant::now();
    let o = cmd_train(&cfg).map_err(fail)?;
    Ok((o, cfg, t.elapsed()))
}

fn c6_verdict(r: &std::result::Result<(RunOutcome, RunConfig, Duration), String>) -> Verdict {
    let (o, _, dt) = r.as_ref().map_err(Clone::clone)?;
    let a = &o.level_accuracy;
    let need = [0.94, 0.96, 0.97];
    check(
        a.len() == 3 && a.iter().zip(need).all(|(x, n)| *x >= n) && dt.as_secs() < 1800,
        format!(
            "core {:.2}% (≥94), middle {:.2}% (≥96), full {:.2}% (≥97), {:.0}s",
            100.0 * a[0],
            100.0 * a[1],
            100.0 * a[2],
            dt.as_secs_f64()
        ),
    )
}

fn c7_prune(out: &Path) -> Verdict {
    let cfg = preset_config("mnist-prune", out).map_err(fail)?;
    let o = cmd_prune(&cfg).map_err(fail)?;
    let (d, a) = (&o.densities, &o.level_accuracy);
    check(
        d[0] < d[1] && d[1] < d[2] && a[2] - a[0] <= 0.03,
        format!(
            "densities {:.1}% < {:.1}% < {:.1}%, core {:.2}% vs full {:.2}%",
            100.0 * d[0],
            100.0 * d[1],
            100.0 * d[2],
            100.0 * a[0],
            100.0 * a[2]
        ),
    )
}

fn c8_hierarchy(out: &Path) -> Verdict {
    let cfg = preset_config("mnist-hierarchy", out).map_err(fail)?;
    let o = cmd_train(&cfg).map_err(fail)?;
    let (coarse, fine) = (o.level_accuracy[0], o.level_accuracy[1]);
    check(
        coarse >= fine && fine >= 0.965,
        format!("coarse {:.2}% ≥ fine {:.2}% ≥ 96.5%", 100.0 * coarse, 100.0 * fine),
    )
}

fn c9_consensus(run: &std::result::Result<(RunOutcome, RunConfig, Duration), String>) -> Verdict {
    let (o, cfg, _) = run.as_ref().map_err(|e| format!("criterion 6 run unavailable: {e}"))?;
    let ck = load_checkpoint::<f32>(&o.checkpoint).map_err(fail)?;
    let meta = ck.data.as_ref().ok_or("checkpoint has no data metadata")?;
    let test = load_eval_data(meta, &cfg.data.dir, None).map_err(fail)?;
    let net = &ck.net;
    let segments = consensus_segments(net, &test).map_err(fail)?;
    let layout = SegmentLayout::of(net);
    let avg = AverageConsensus::new(layout.clone()).map_err(fail)?;
    let acc_a = score(&avg.forward(&segments).map_err(fail)?, &test.labels)
        .map_err(fail)?
        .accuracy;
    let learned = ck.consensus.as_ref().ok_or("checkpoint has no consensus head")?;
    let acc_l = score(&learned.forward(&segments).map_err(fail)?, &test.labels)
        .map_err(fail)?
        .accuracy;
    let mut best = 0.0f64;
    for k in 1..=net.levels() {
        best = best.max(evaluate(net, &test, k).map_err(fail)?.accuracy);
    }

    // refit a head and watch the backbone
    let (train, _, _) = load_data(cfg).map_err(fail)?;
    let before = net.checksum();
    let train_segments = consensus_segments(net, &train).map_err(fail)?;
    let mut head = LearnedConsensus::new(layout).map_err(fail)?;
    let tc = ConsensusTrainConfig::with_iterations(cfg.consensus.iterations);
    train_consensus(&mut head, &train_segments, &train.labels, &tc).map_err(fail)?;
    let frozen = net.checksum() == before;
    check(
        acc_a >= best - 0.003 && acc_l >= acc_a - 0.003 && frozen,
        format!(
            "A {:.2}% vs best level {:.2}%, L {:.2}%, backbone checksum unchanged: {frozen}",
            100.0 * acc_a,
            100.0 * best,
            100.0 * acc_l
        ),
    )
}

fn c10_lr_schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let at = |i| lr_at(i, &cfg);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    check(
        cfg.iterations == 80_000
            && close(at(0), 0.1)
            && close(at(40_000), 0.01)
            && close(at(60_000), 0.001)
            && close(at(39_999), 0.1)
            && close(at(59_999), 0.01),
        format!(
            "lr {:.4} / {:.4} / {:.4} at 0 / 40000 / 60000 of {}",
            at(0),
            at(40_000),
            at(60_000),
            cfg.iterations
        ),
    )
}

fn c11_persistence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut net = pruned_mlp(&mut rng, vec![0.0, 0.05], 5, 7);
    let data = toy_data(&mut rng, 64, 5, 3);
    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default().with_iterations(20)
    };
    let mut state = OptimizerState::default();
    iterative_prune(
        &mut net,
        &mut state,
        &data,
        None,
        &PruneDriverConfig::new(vec![0.0, 0.05]),
        &cfg,
        &mut Hooks::default(),
    )
    .map_err(fail)?;
    let head = LearnedConsensus::new(SegmentLayout::of(&net)).map_err(fail)?;
    let first = encode(&net, Some(&state), Some(&head as &dyn Consensus), None).map_err(fail)?;
    let back = decode::<f64>(&first).map_err(fail)?;
    let second = encode(&back.net, Some(&back.optimizer), back.consensus.as_deref(), None).map_err(fail)?;
    if first != second {
        return Err("save→load→save changed the bytes".into());
    }
    let mut missed = Vec::new();
    for i in 0..first.len() {
        let mut b = first.clone();
        b[i] ^= 0x01;
        if decode::<f64>(&b).is_ok() {
            missed.push(i);
        }
    }
    check(
        missed.is_empty(),
        format!(
            "{} bytes round-trip identically; {} single-byte corruptions, undetected at {missed:?}",
            first.len(),
            first.len()
        ),
    )
}

fn c12_determinism(out: &Path) -> Verdict {
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = preset_config("mnist-channel", &out.join(run)).map_err(fail)?;
        cfg.train.epochs = None;
        cfg.train.iterations = Some(200);
        cfg.data.train_limit = Some(4000);
        cfg.data.test_limit = Some(1000);
        cfg.consensus.iterations = 200;
        let o = cmd_train(&cfg).map_err(fail)?;
        bytes.push(std::fs::read(&o.checkpoint).map_err(|e| e.to_string())?);
    }
    check(
        bytes[0] == bytes[1],
        format!(
            "two seeded runs wrote {} and {} bytes, identical: {}",
            bytes[0].len(),
            bytes[1].len(),
            bytes[0] == bytes[1]
        ),
    )
}

fn main() {
    nestednet::tensor::set_threads(0);
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = tmp.path().to_path_buf();

    // the three full-data trainings run concurrently with the quick checks
    let (o6, o7, o8) = (out.clone(), out.clone(), out.clone());
    let h6 = thread::spawn(move || c6_nested_training(&o6));
    let h7 = thread::spawn(move || c7_prune(&o7));
    let h8 = thread::spawn(move || c8_hierarchy(&o8));

    let mut verdicts: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient checks", c1_gradcheck()),
        (2, "nesting invariants", c2_nesting_invariants()),
        (3, "step approximation", c3_step_fidelity()),
        (4, "zero stays zero", c4_zero_stays_zero()),
        (5, "block equivalence", c5_block_equivalence()),
    ];
    let joined = |r: thread::Result<Verdict>| r.unwrap_or_else(|_| Err("panicked".into()));
    let run6 = h6.join().unwrap_or_else(|_| Err("panicked".into()));
    verdicts.push((6, "nested MNIST training", c6_verdict(&run6)));
    verdicts.push((7, "iterative pruning", joined(h7.join())));
    verdicts.push((8, "hierarchical classes", joined(h8.join())));
    verdicts.push((9, "consensus", c9_consensus(&run6)));
    verdicts.push((10, "LR schedule", c10_lr_schedule()));
    verdicts.push((11, "persistence", c11_persistence()));
    verdicts.push((12, "determinism", c12_determinism(&out.join("det"))));

    let mut failed = 0;
    for (n, name, v) in &verdicts {
        match v {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria pass", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
