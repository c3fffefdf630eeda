use crate::error::{Error, Result};
use crate::nesting::project;
use crate::nn::{softmax_cross_entropy, Gradients, Mode, NestedNetwork};
use crate::tensor::{Scalar, Tensor};

/// `½‖P_{M^level}(W)‖²` summed over weight tensors (biases and BN parameters excluded).
pub fn decay_term<T: Scalar>(net: &NestedNetwork<T>, level: usize) -> f64 {
    net.params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.role.is_weight())
        .map(|(i, p)| match net.mask_hierarchy(i) {
            Some(h) => 0.5 * project(&p.value, h.level(level)).expect("mask fits").sum_squares(),
            None => 0.5 * p.value.sum_squares(),
        })
        .sum()
}

/// Adds `λ · P_{M^level}(W)` to the weight gradients.
pub fn add_decay_gradient<T: Scalar>(net: &NestedNetwork<T>, grads: &mut Gradients<T>, lambda: f64, level: usize) {
    if lambda == 0.0 {
        return;
    }
    let lam = T::from_f64(lambda);
    for (i, p) in net.params().iter().enumerate() {
        if !p.role.is_weight() {
            continue;
        }
        let bits = net.mask_hierarchy(i).map(|h| h.level(level).bits());
        for (j, (g, &w)) in grads.tensors[i].data_mut().iter_mut().zip(p.value.data()).enumerate() {
            if bits.is_none_or(|b| b[j]) {
                *g += lam * w;
            }
        }
    }
}

/// Mean of the per-level cross-entropies plus `λ·½‖P_{M^{l_n}}(W)‖²`.
///
/// Returns the loss and each level's logit gradient, already scaled by `1/l_n`.
pub fn nested_loss<T: Scalar>(
    level_logits: &[Tensor<T>],
    labels: &[&[usize]],
    net: &NestedNetwork<T>,
    lambda: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let levels = net.levels();
    if level_logits.len() != levels || labels.len() != levels {
        return Err(Error::dim(
            "nested_loss",
            format!(
                "{} logits and {} label sets for {levels} levels",
                level_logits.len(),
                labels.len()
            ),
        ));
    }
    let scale = 1.0 / levels as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(levels);
    for (logits, y) in level_logits.iter().zip(labels) {
        let (l, mut g) = softmax_cross_entropy(logits, y)?;
        loss += scale * l;
        g.scale_assign(T::from_f64(scale));
        grads.push(g);
    }
    Ok((loss + lambda * decay_term(net, levels), grads))
}

/// Losses and gradient of one training batch.
#[derive(Clone, Debug)]
pub struct BatchResult<T: Scalar> {
    pub grads: Gradients<T>,
    /// Cross-entropy of each level's head on its labels.
    pub level_losses: Vec<f64>,
    /// Correct predictions of each level's head.
    pub level_correct: Vec<usize>,
    /// Full objective value including every weighted term.
    pub objective: f64,
}

/// Forward/backward at each of `levels`, gradients summed with weight `1/|levels|`,
/// plus the decay gradient on the `decay_level` support.
///
/// `labels[k - 1]` holds level `k`'s labels; `fine` feeds auxiliary heads.
pub fn level_gradients<T: Scalar>(
    net: &mut NestedNetwork<T>,
    x: &Tensor<T>,
    labels: &[&[usize]],
    fine: &[usize],
    levels: &[usize],
    lambda: f64,
    decay_level: usize,
) -> Result<BatchResult<T>> {
    let scale = 1.0 / levels.len() as f64;
    let mut total = Gradients::zeros_like(net);
    let mut level_losses = Vec::with_capacity(levels.len());
    let mut level_correct = Vec::with_capacity(levels.len());
    let mut objective = 0.0;
    for &level in levels {
        let (logits, trace) = net.forward(x, level, Mode::Train)?;
        let (loss, mut g) = softmax_cross_entropy(&logits, labels[level - 1])?;
        g.scale_assign(T::from_f64(scale));
        objective += scale * loss;
        let mut aux_grads = Vec::new();
        for aux in trace.aux_logits() {
            let (l, mut ga) = softmax_cross_entropy(aux, fine)?;
            ga.scale_assign(T::from_f64(scale));
            objective += scale * l;
            aux_grads.push(ga);
        }
        let grads = net.backward_with_aux(&trace, &g, &aux_grads)?;
        total.add_scaled(&grads, T::one());
        level_losses.push(loss);
        level_correct.push(correct(&logits, labels[level - 1]));
    }
    if !objective.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {objective}")));
    }
    add_decay_gradient(net, &mut total, lambda, decay_level);
    objective += lambda * decay_term(net, decay_level);
    Ok(BatchResult {
        grads: total,
        level_losses,
        level_correct,
        objective,
    })
}

/// Gradient of the nested objective over all levels on one batch.
pub fn accumulate_nested_gradients<T: Scalar>(
    net: &mut NestedNetwork<T>,
    x: &Tensor<T>,
    labels: &[&[usize]],
    fine: &[usize],
    lambda: f64,
) -> Result<BatchResult<T>> {
    let levels: Vec<usize> = (1..=net.levels()).collect();
    let full = net.levels();
    level_gradients(net, x, labels, fine, &levels, lambda, full)
}

pub(crate) fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| crate::tensor::argmax(row) == y)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nesting::{NestingParams, StrategyRegistry};
    use crate::nn::Architecture;

    fn net(levels: usize) -> NestedNetwork<f64> {
        let arch = Architecture::mlp([1, 1, 3], &[4], 2).unwrap();
        let fractions: Vec<f64> = (1..=levels).map(|k| k as f64 / levels as f64).collect();
        let s = StrategyRegistry::default()
            .create(
                "channel",
                NestingParams {
                    fractions,
                    ..Default::default()
                },
            )
            .unwrap();
        NestedNetwork::new(arch, s.as_ref(), 3).unwrap()
    }

    #[test]
    fn mean_of_level_losses() {
        let n = net(2);
        // logits giving ln-losses 1 and 3 for label 0 of 2 classes: loss = ln(1 + e^{-m})
        let margin = |l: f64| -((l.exp() - 1.0).ln());
        let a = Tensor::new(vec![1, 2], vec![margin(1.0), 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![margin(3.0), 0.0]).unwrap();
        let (loss, _) = nested_loss(&[a, b], &[&[0], &[0]], &n, 0.0).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decay_matches_direct_sum() {
        let n = net(1);
        let logits = Tensor::zeros(&[1, 2]);
        let (with, _) = nested_loss(std::slice::from_ref(&logits), &[&[1]], &n, 2e-4).unwrap();
        let (without, _) = nested_loss(&[logits], &[&[1]], &n, 0.0).unwrap();
        let direct: f64 = n
            .params()
            .iter()
            .filter(|p| p.role.is_weight())
            .flat_map(|p| p.value.data().iter().map(|v| v * v))
            .sum();
        assert!((with - without - 2e-4 * 0.5 * direct).abs() < 1e-15);
        assert!(nested_loss(&[], &[], &n, 0.0).is_err());
    }

    #[test]
    fn single_level_equals_plain_gradient() {
        let mut n = net(1);
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap();
        let y = [1usize, 0];
        let nested = accumulate_nested_gradients(&mut n, &x, &[&y], &y, 0.0).unwrap();
        let (logits, trace) = n.forward(&x, 1, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
        let plain = n.backward(&trace, &g).unwrap();
        assert_eq!(nested.grads, plain);
    }
}
