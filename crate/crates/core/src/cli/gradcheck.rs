//! Central finite-difference checks of every backward pass, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{Consensus, LearnedConsensus, Segment, SegmentLayout};
use crate::error::{Error, Result};
use crate::nesting::{NestingParams, StrategyRegistry};
use crate::nn::{
    batchnorm_backward, batchnorm_train, dense_backward, dense_forward, global_avg_pool, global_avg_pool_backward,
    softmax_cross_entropy, Architecture, Mode, NestedNetwork,
};
use crate::tensor::{conv2d, conv2d_backward, conv_output_size, ConvGeometry, Tensor};
use crate::training::level_gradients;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const CONFIGS: usize = 20;

/// Loss at the given inputs, plus their analytic gradients when asked.
type Objective<'a> = dyn FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Tensor<f64>>)> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel: f64,
    /// Entry with the largest relative error, as `tensor[flat index]`.
    pub worst: String,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

pub struct Checker {
    corrupt: Option<String>,
    max_rel: f64,
    worst: String,
}

impl Checker {
    /// Compares analytic and central-difference gradients for every entry of `inputs`.
    fn run(&mut self, names: &[String], inputs: Vec<Tensor<f64>>, f: &mut Objective<'_>) -> Result<()> {
        let (_, mut analytic) = f(&inputs, true)?;
        if let Some(c) = &self.corrupt {
            for (name, g) in names.iter().zip(&mut analytic) {
                if name.contains(c.as_str()) {
                    g.scale_assign(1.5);
                }
            }
        }
        let mut x = inputs;
        for t in 0..x.len() {
            for j in 0..x[t].len() {
                let orig = x[t].data()[j];
                x[t].data_mut()[j] = orig + STEP;
                let (up, _) = f(&x, false)?;
                x[t].data_mut()[j] = orig - STEP;
                let (down, _) = f(&x, false)?;
                x[t].data_mut()[j] = orig;
                let num = (up - down) / (2.0 * STEP);
                let a = analytic[t].data()[j];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                if !(rel <= self.max_rel) {
                    self.max_rel = rel;
                    self.worst = format!("{}[{j}] analytic {a:.6e} numeric {num:.6e}", names[t]);
                }
            }
        }
        Ok(())
    }
}

pub struct GradSuite {
    pub name: &'static str,
    run: fn(&mut ChaCha8Rng, &mut Checker) -> Result<()>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
    )
    .expect("shape")
}

/// `Σ r ⊙ y` with the fixed random projection `r`.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn dense_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let (n, i, o) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
    let r = randn(rng, &[n, o], 1.0);
    let inputs = vec![
        randn(rng, &[n, i], 1.0),
        randn(rng, &[i, o], 1.0),
        randn(rng, &[o], 1.0),
    ];
    c.run(
        &names(&["dense.x", "dense.weight", "dense.bias"]),
        inputs,
        &mut |v, grad| {
            let y = dense_forward(&v[0], &v[1], Some(v[2].data()))?;
            let g = if grad {
                let (dx, dw, db) = dense_backward(&v[0], &v[1], &r);
                vec![dx, dw, Tensor::from_vec(db)]
            } else {
                Vec::new()
            };
            Ok((project(&y, &r), g))
        },
    )
}

fn conv_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let k = [1, 3][rng.gen_range(0..2)];
    let geom = ConvGeometry::new(rng.gen_range(1..3), rng.gen_range(0..2));
    let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(k..7), rng.gen_range(k..7));
    let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let (oh, ow) = (conv_output_size(h, k, geom)?, conv_output_size(w, k, geom)?);
    let r = randn(rng, &[n, oh, ow, co], 1.0);
    let inputs = vec![randn(rng, &[n, h, w, ci], 1.0), randn(rng, &[k, k, ci, co], 1.0)];
    c.run(&names(&["conv.x", "conv.weight"]), inputs, &mut |v, grad| {
        let y = conv2d(&v[0], &v[1], geom)?;
        let g = if grad {
            let (dx, dw) = conv2d_backward(&v[0], &v[1], &r, geom)?;
            vec![dx, dw]
        } else {
            Vec::new()
        };
        Ok((project(&y, &r), g))
    })
}

fn batchnorm_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let (n, hw, ch) = (rng.gen_range(2..6), rng.gen_range(1..3), rng.gen_range(1..5));
    let shape = [n, hw, hw, ch];
    let r = randn(rng, &shape, 1.0);
    let inputs = vec![randn(rng, &shape, 2.0), randn(rng, &[ch], 1.5), randn(rng, &[ch], 1.0)];
    c.run(
        &names(&["batchnorm.x", "batchnorm.scale", "batchnorm.shift"]),
        inputs,
        &mut |v, grad| {
            let (y, cache, _) = batchnorm_train(&v[0], v[1].data(), v[2].data())?;
            let g = if grad {
                let (dx, ds, db) = batchnorm_backward(&cache, v[1].data(), &r);
                vec![dx, Tensor::from_vec(ds), Tensor::from_vec(db)]
            } else {
                Vec::new()
            };
            Ok((project(&y, &r), g))
        },
    )
}

fn pool_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let shape = [
        rng.gen_range(1..4),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
        rng.gen_range(1..4),
    ];
    let r = randn(rng, &[shape[0], shape[3]], 1.0);
    c.run(&names(&["pool.x"]), vec![randn(rng, &shape, 1.0)], &mut |v, grad| {
        let y = global_avg_pool(&v[0]);
        let g = if grad {
            vec![global_avg_pool_backward(&shape, &r)]
        } else {
            Vec::new()
        };
        Ok((project(&y, &r), g))
    })
}

fn softmax_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..8));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    c.run(
        &names(&["softmax_ce.logits"]),
        vec![randn(rng, &[n, k], 3.0)],
        &mut |v, _| {
            let (loss, g) = softmax_cross_entropy(&v[0], &labels)?;
            Ok((loss, vec![g]))
        },
    )
}

/// Checks every parameter of `net` at `level` against `Σ r ⊙ logits`.
fn network_check(
    net: &mut NestedNetwork<f64>,
    x: &Tensor<f64>,
    level: usize,
    r: &Tensor<f64>,
    c: &mut Checker,
) -> Result<()> {
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    c.run(&names, inputs, &mut |v, grad| {
        for (p, t) in net.params_mut().iter_mut().zip(v) {
            p.value.data_mut().copy_from_slice(t.data());
        }
        let (logits, trace) = net.forward(x, level, Mode::Train)?;
        let g = if grad {
            net.backward(&trace, r)?.tensors
        } else {
            Vec::new()
        };
        Ok((project(&logits, r), g))
    })
}

fn residual_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let side = rng.gen_range(3..6);
    let arch = Architecture::resnet([side, side, 2], 2, &[2, 4], rng.gen_range(1..3), 3)?;
    let s = StrategyRegistry::default().create(
        "channel",
        NestingParams {
            fractions: vec![0.5, 1.0],
            ..Default::default()
        },
    )?;
    let mut net = NestedNetwork::new(arch, s.as_ref(), rng.gen())?;
    let n = rng.gen_range(2..4);
    let x = randn(rng, &[n, side, side, 2], 1.0);
    let r = randn(rng, &[n, 3], 1.0);
    let level = rng.gen_range(1..3);
    network_check(&mut net, &x, level, &r, c)
}

fn nested_loss_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let arch = Architecture::mlp([1, 1, 3], &[4], 2)?;
    let s = StrategyRegistry::default().create(
        "channel",
        NestingParams {
            fractions: vec![0.5, 1.0],
            ..Default::default()
        },
    )?;
    let mut net = NestedNetwork::new(arch, s.as_ref(), rng.gen())?;
    let n = rng.gen_range(2..6);
    let x = randn(rng, &[n, 3], 1.5);
    let labels: Vec<Vec<usize>> = (0..2).map(|_| (0..n).map(|_| rng.gen_range(0..2)).collect()).collect();
    let lambda = rng.gen_range(0.0..0.05);
    let names: Vec<String> = net.params().iter().map(|p| format!("nested_loss.{}", p.name)).collect();
    let inputs: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    c.run(&names, inputs, &mut |v, _| {
        for (p, t) in net.params_mut().iter_mut().zip(v) {
            p.value.data_mut().copy_from_slice(t.data());
        }
        let refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let r = level_gradients(&mut net, &x, &refs, &labels[1], &[1, 2], lambda, 2)?;
        Ok((r.objective, r.grads.tensors))
    })
}

fn consensus_suite(rng: &mut ChaCha8Rng, c: &mut Checker) -> Result<()> {
    let classes = rng.gen_range(2..5);
    let mut sizes = vec![classes; rng.gen_range(1..4)];
    if rng.gen_bool(0.5) {
        sizes.push(rng.gen_range(2..4));
    }
    let layout = SegmentLayout {
        segments: sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| Segment {
                name: format!("s{i}"),
                size,
            })
            .collect(),
    };
    let mut head = LearnedConsensus::new(layout)?;
    let n = rng.gen_range(1..6);
    let segments: Vec<Tensor<f64>> = sizes.iter().map(|&s| randn(rng, &[n, s], 2.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let inputs = vec![randn(rng, head.weight.shape(), 1.0), randn(rng, head.bias.shape(), 1.0)];
    c.run(
        &names(&["consensus.weight", "consensus.bias"]),
        inputs,
        &mut |v, grad| {
            head.weight = v[0].clone();
            head.bias = v[1].clone();
            let (loss, dy) = softmax_cross_entropy(&head.forward(&segments)?, &labels)?;
            let g = if grad {
                let (dw, db) = head.backward(&segments, &dy)?;
                vec![dw, db]
            } else {
                Vec::new()
            };
            Ok((loss, g))
        },
    )
}

/// Every registered suite, in report order.
pub fn suites() -> Vec<GradSuite> {
    vec![
        GradSuite {
            name: "dense",
            run: dense_suite,
        },
        GradSuite {
            name: "conv",
            run: conv_suite,
        },
        GradSuite {
            name: "batchnorm",
            run: batchnorm_suite,
        },
        GradSuite {
            name: "global-avg-pool",
            run: pool_suite,
        },
        GradSuite {
            name: "softmax-ce",
            run: softmax_suite,
        },
        GradSuite {
            name: "residual",
            run: residual_suite,
        },
        GradSuite {
            name: "nested-loss",
            run: nested_loss_suite,
        },
        GradSuite {
            name: "consensus",
            run: consensus_suite,
        },
    ]
}

/// Runs each suite on [`CONFIGS`] seeded configurations.
///
/// `corrupt` scales the analytic gradient of every tensor whose name contains it,
/// for exercising the failure path.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<ComponentReport>> {
    let mut out = Vec::new();
    for (s, suite) in suites().into_iter().enumerate() {
        let mut checker = Checker {
            corrupt: corrupt.map(str::to_string),
            max_rel: 0.0,
            worst: String::new(),
        };
        for i in 0..CONFIGS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((s * CONFIGS + i) as u64);
            (suite.run)(&mut rng, &mut checker)
                .map_err(|e| Error::Verification(format!("{} config {i}: {e}", suite.name)))?;
        }
        out.push(ComponentReport {
            name: suite.name,
            configs: CONFIGS,
            max_rel: checker.max_rel,
            worst: checker.worst,
        });
    }
    Ok(out)
}
