//! Combining the outputs of every level into one prediction.

mod learned;

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

pub use learned::{train_consensus, ConsensusTrainConfig, LearnedConsensus};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::NestedNetwork;
use crate::tensor::{Scalar, Tensor};
use crate::training::collect_logits;

/// One block of the concatenated consensus input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub size: usize,
}

/// Order and sizes of the concatenated segments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn width(&self) -> usize {
        self.segments.iter().map(|s| s.size).sum()
    }

    pub fn check(&self, segments: &[Tensor<f64>]) -> Result<usize> {
        let n = segments.first().map_or(0, Tensor::batch);
        let ok = segments.len() == self.segments.len()
            && segments
                .iter()
                .zip(&self.segments)
                .all(|(t, s)| t.rank() == 2 && t.batch() == n && t.shape()[1] == s.size);
        if !ok {
            let got: Vec<_> = segments.iter().map(|t| t.shape().to_vec()).collect();
            return Err(Error::dim(
                "consensus",
                format!("segments {got:?} do not match layout {:?}", self.segments),
            ));
        }
        Ok(n)
    }

    /// Layout of [`consensus_segments`] for `net`.
    pub fn of<T: Scalar>(net: &NestedNetwork<T>) -> Self {
        let levels = net.levels();
        let classes = net.level_classes();
        let class_of = |k: usize| classes[k.min(classes.len()) - 1];
        let mut segments = vec![Segment {
            name: format!("L{levels}"),
            size: class_of(levels),
        }];
        for k in (1..levels).rev() {
            for (j, &(_, c)) in net.aux_heads().iter().enumerate().filter(|(_, (l, _))| *l == k) {
                segments.push(Segment {
                    name: format!("L{k}.aux{j}"),
                    size: c,
                });
            }
            segments.push(Segment {
                name: format!("L{k}"),
                size: class_of(k),
            });
        }
        Self { segments }
    }
}

/// Eval-mode logits ordered as [`SegmentLayout::of`]: the full level first, then
/// each lower level's auxiliary heads followed by its own head.
pub fn consensus_segments<T: Scalar>(net: &NestedNetwork<T>, ds: &Dataset) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::new();
    for k in (1..=net.levels()).rev() {
        let mut logits = collect_logits(net, ds, k)?.into_iter();
        let main = logits.next().expect("main head");
        if k < net.levels() {
            out.extend(logits.map(|t| t.cast::<f64>()));
        }
        out.push(main.cast::<f64>());
    }
    Ok(out)
}

/// Elementwise mean of equally sized level logits.
pub fn consensus_average<T: Scalar>(level_logits: &[Tensor<T>]) -> Result<Tensor<T>> {
    if level_logits.len() < 2 {
        return Err(Error::dim(
            "consensus_average",
            format!("{} levels, need at least 2", level_logits.len()),
        ));
    }
    let first = &level_logits[0];
    if let Some(bad) = level_logits.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::dim(
            "consensus_average",
            format!("{:?} vs {:?}", bad.shape(), first.shape()),
        ));
    }
    let mut out = first.clone();
    for t in &level_logits[1..] {
        out.add_assign(t);
    }
    out.scale_assign(T::from_f64(1.0 / level_logits.len() as f64));
    Ok(out)
}

pub trait Consensus: Debug + Send + Sync {
    fn kind(&self) -> &'static str;
    fn layout(&self) -> &SegmentLayout;
    fn classes(&self) -> usize;
    fn forward(&self, segments: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    /// Named trainable tensors, empty for fixed rules.
    fn params(&self) -> Vec<(&'static str, &Tensor<f64>)> {
        Vec::new()
    }
    fn set_param(&mut self, name: &str, _value: Tensor<f64>) -> Result<()> {
        Err(Error::Checkpoint(format!(
            "{} consensus has no parameter {name}",
            self.kind()
        )))
    }
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
    fn as_learned_mut(&mut self) -> Option<&mut LearnedConsensus> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AverageConsensus {
    layout: SegmentLayout,
    classes: usize,
}

impl AverageConsensus {
    pub fn new(layout: SegmentLayout) -> Result<Self> {
        let classes = layout.segments.first().map_or(0, |s| s.size);
        if layout.segments.len() < 2 || layout.segments.iter().any(|s| s.size != classes) {
            return Err(Error::Unsupported(format!(
                "averaging needs at least two equally sized outputs, got {:?}",
                layout.segments
            )));
        }
        Ok(Self { layout, classes })
    }
}

impl Consensus for AverageConsensus {
    fn kind(&self) -> &'static str {
        "average"
    }

    fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, segments: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.layout.check(segments)?;
        consensus_average(segments)
    }
}

pub type ConsensusFactory = fn(SegmentLayout) -> Result<Box<dyn Consensus>>;

/// Consensus kinds by name.
#[derive(Clone, Debug)]
pub struct ConsensusRegistry {
    factories: BTreeMap<&'static str, ConsensusFactory>,
}

impl Default for ConsensusRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("average", |l| Ok(Box::new(AverageConsensus::new(l)?)));
        r.register("learned", |l| Ok(Box::new(LearnedConsensus::new(l)?)));
        r
    }
}

impl ConsensusRegistry {
    pub fn register(&mut self, name: &'static str, factory: ConsensusFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, layout: SegmentLayout) -> Result<Box<dyn Consensus>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown consensus `{name}`, expected one of {:?}",
                self.names()
            ))
        })?;
        f(layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn average_examples() {
        let avg = consensus_average(&[t(1, &[1.0, 3.0]), t(1, &[3.0, 1.0])]).unwrap();
        assert_eq!(avg.data(), &[2.0, 2.0]);
        let same = t(2, &[0.5, -1.0, 2.0, 4.0]);
        assert_eq!(consensus_average(&[same.clone(), same.clone()]).unwrap(), same);
        assert!(consensus_average(std::slice::from_ref(&same)).is_err());
        assert!(consensus_average(&[same, t(1, &[1.0, 2.0])]).is_err());
    }

    #[test]
    fn registry_builds_both_kinds() {
        let r = ConsensusRegistry::default();
        assert_eq!(r.names(), vec!["average", "learned"]);
        let layout = SegmentLayout {
            segments: vec![
                Segment {
                    name: "L2".into(),
                    size: 10,
                },
                Segment {
                    name: "L1".into(),
                    size: 10,
                },
            ],
        };
        assert_eq!(r.create("average", layout.clone()).unwrap().param_count(), 0);
        assert_eq!(r.create("learned", layout.clone()).unwrap().param_count(), 21 * 10);
        assert!(r.create("vote", layout).is_err());
        let uneven = SegmentLayout {
            segments: vec![
                Segment {
                    name: "L2".into(),
                    size: 10,
                },
                Segment {
                    name: "L1".into(),
                    size: 2,
                },
            ],
        };
        assert!(r.create("average", uneven).is_err());
    }
}
