use serde::{Deserialize, Serialize};

use super::{Consensus, SegmentLayout};
use crate::data::batches;
use crate::error::{Error, Result};
use crate::nn::{dense_backward, dense_forward, softmax_cross_entropy};
use crate::tensor::Tensor;
use crate::training::LrSchedule;

/// One affine map from the concatenated segments to class logits, no nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedConsensus {
    layout: SegmentLayout,
    classes: usize,
    /// `[Σ segment sizes, classes]`
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LearnedConsensus {
    /// Starts at the averaging rule over the segments sized like the first one.
    pub fn new(layout: SegmentLayout) -> Result<Self> {
        let classes = layout.segments.first().map_or(0, |s| s.size);
        if classes < 2 {
            return Err(Error::Unsupported(
                "learned consensus needs a first segment of at least 2 classes".into(),
            ));
        }
        let d = layout.width();
        let same = layout.segments.iter().filter(|s| s.size == classes).count();
        let mut weight = Tensor::zeros(&[d, classes]);
        let mut row = 0;
        for s in &layout.segments {
            if s.size == classes {
                for c in 0..classes {
                    weight.data_mut()[(row + c) * classes + c] = 1.0 / same as f64;
                }
            }
            row += s.size;
        }
        Ok(Self {
            layout,
            classes,
            weight,
            bias: Tensor::zeros(&[classes]),
        })
    }

    pub fn concat(&self, segments: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let n = self.layout.check(segments)?;
        let d = self.layout.width();
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            for s in segments {
                let w = s.shape()[1];
                x.extend_from_slice(&s.data()[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![n, d], x)
    }

    /// Weight and bias gradients for upstream logit gradient `dy`.
    pub fn backward(&self, segments: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let x = self.concat(segments)?;
        let (_, dw, db) = dense_backward(&x, &self.weight, dy);
        Ok((dw, Tensor::from_vec(db)))
    }
}

impl Consensus for LearnedConsensus {
    fn kind(&self) -> &'static str {
        "learned"
    }

    fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, segments: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        dense_forward(&self.concat(segments)?, &self.weight, Some(self.bias.data()))
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<f64>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn set_param(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        let slot = match name {
            "weight" => &mut self.weight,
            "bias" => &mut self.bias,
            _ => return Err(Error::Checkpoint(format!("learned consensus has no parameter {name}"))),
        };
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "consensus {name} has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    fn as_learned_mut(&mut self) -> Option<&mut LearnedConsensus> {
        Some(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusTrainConfig {
    pub lr: LrSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ConsensusTrainConfig {
    /// 0.1, divided by 10 at 20K, 30K and 40K of 50K.
    fn default() -> Self {
        Self::with_iterations(50_000)
    }
}

impl ConsensusTrainConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            lr: LrSchedule::at_fractions(0.1, 0.1, &[0.4, 0.6, 0.8], iterations),
            iterations,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Plain SGD (no momentum) on the consensus parameters over fixed segment outputs.
///
/// Returns the mean loss of each pass through the data.
pub fn train_consensus(
    head: &mut LearnedConsensus,
    segments: &[Tensor<f64>],
    labels: &[usize],
    cfg: &ConsensusTrainConfig,
) -> Result<Vec<f64>> {
    let n = head.layout.check(segments)?;
    if n != labels.len() || n == 0 || cfg.batch_size == 0 {
        return Err(Error::dim(
            "train_consensus",
            format!("{n} samples, {} labels", labels.len()),
        ));
    }
    let x = head.concat(segments)?;
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut losses = Vec::new();
    let (mut sum, mut count) = (0.0, 0);
    let mut order = Vec::new();
    for it in 0..cfg.iterations {
        let epoch = it / per_epoch;
        if it % per_epoch == 0 {
            if count > 0 {
                losses.push(sum / count as f64);
                (sum, count) = (0.0, 0);
            }
            order = batches(n, cfg.batch_size, cfg.seed, epoch as u64);
        }
        let idx = &order[it % per_epoch];
        let xb = x.gather_batch(idx);
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let logits = dense_forward(&xb, &head.weight, Some(head.bias.data()))?;
        let (loss, dy) = softmax_cross_entropy(&logits, &yb)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("consensus loss {loss} at iteration {it}")));
        }
        let (_, dw, db) = dense_backward(&xb, &head.weight, &dy);
        let lr = cfg.lr.at(it);
        for (w, g) in head.weight.data_mut().iter_mut().zip(dw.data()) {
            *w -= lr * g;
        }
        for (b, g) in head.bias.data_mut().iter_mut().zip(&db) {
            *b -= lr * g;
        }
        sum += loss;
        count += 1;
    }
    if count > 0 {
        losses.push(sum / count as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::super::Segment;
    use super::*;

    fn layout(sizes: &[usize]) -> SegmentLayout {
        SegmentLayout {
            segments: sizes
                .iter()
                .enumerate()
                .map(|(i, &size)| Segment {
                    name: format!("s{i}"),
                    size,
                })
                .collect(),
        }
    }

    fn segs(n: usize, sizes: &[usize], seed: u64) -> Vec<Tensor<f64>> {
        let mut v = seed;
        sizes
            .iter()
            .map(|&s| {
                let data = (0..n * s)
                    .map(|_| {
                        v = v.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (v >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                    })
                    .collect();
                Tensor::new(vec![n, s], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let mut h = LearnedConsensus::new(layout(&[3, 3])).unwrap();
        h.weight.fill(0.0);
        let out = h.forward(&segs(2, &[3, 3], 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selecting_one_segment_reproduces_it() {
        let mut h = LearnedConsensus::new(layout(&[3, 3])).unwrap();
        h.weight.fill(0.0);
        for c in 0..3 {
            h.weight.data_mut()[(3 + c) * 3 + c] = 1.0;
        }
        let s = segs(4, &[3, 3], 2);
        assert_eq!(h.forward(&s).unwrap(), s[1]);
    }

    #[test]
    fn starts_at_the_average() {
        let h = LearnedConsensus::new(layout(&[4, 4, 2])).unwrap();
        assert_eq!(h.param_count(), (10 + 1) * 4);
        let s = segs(3, &[4, 4, 2], 3);
        let avg = super::super::consensus_average(&s[..2]).unwrap();
        assert!(h.forward(&s).unwrap().max_abs_diff(&avg) < 1e-15);
        assert!(h.forward(&s[..2]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut h = LearnedConsensus::new(layout(&[3, 3, 2])).unwrap();
        let s = segs(5, &[3, 3, 2], 4);
        for (i, w) in h.weight.data_mut().iter_mut().enumerate() {
            *w += 0.1 * ((i * 7 % 5) as f64 - 2.0);
        }
        let y = [0usize, 2, 1, 1, 0];
        let loss = |h: &LearnedConsensus| softmax_cross_entropy(&h.forward(&s).unwrap(), &y).unwrap().0;
        let (_, dy) = softmax_cross_entropy(&h.forward(&s).unwrap(), &y).unwrap();
        let (dw, db) = h.backward(&s, &dy).unwrap();
        let eps = 1e-5;
        for (j, &g) in dw.data().iter().enumerate() {
            let mut p = h.clone();
            p.weight.data_mut()[j] += eps;
            let mut m = h.clone();
            m.weight.data_mut()[j] -= eps;
            let num = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!(
                (g - num).abs() / g.abs().max(num.abs()).max(1e-3) < 1e-5,
                "w[{j}] {g} vs {num}"
            );
        }
        for (j, &g) in db.data().iter().enumerate() {
            let mut p = h.clone();
            p.bias.data_mut()[j] += eps;
            let mut m = h.clone();
            m.bias.data_mut()[j] -= eps;
            let num = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!(
                (g - num).abs() / g.abs().max(num.abs()).max(1e-3) < 1e-5,
                "b[{j}] {g} vs {num}"
            );
        }
    }

    #[test]
    fn training_lowers_loss() {
        let s = segs(64, &[2, 2], 9);
        let y: Vec<usize> = (0..64).map(|i| usize::from(s[1].data()[i * 2] > 0.0)).collect();
        let mut h = LearnedConsensus::new(layout(&[2, 2])).unwrap();
        let cfg = ConsensusTrainConfig {
            batch_size: 16,
            ..ConsensusTrainConfig::with_iterations(400)
        };
        let losses = train_consensus(&mut h, &s, &y, &cfg).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        assert_eq!(ConsensusTrainConfig::default().lr.drops, vec![20_000, 30_000, 40_000]);
    }
}
