//! Dataset loading, label hierarchies and seeded batching.

mod hierarchy;
mod loaders;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hierarchy::{attach_hierarchy, LabelHierarchy};
pub use loaders::{channel_stats, load_cifar10, load_idx, load_mnist_dir, normalize, ChannelStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images in NHWC with fine labels and optional coarse label columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `coarse[c][i]` is sample `i`'s label in hierarchy column `c`.
    pub coarse: Vec<Vec<usize>>,
    pub coarse_classes: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("images {:?} vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            coarse: Vec::new(),
            coarse_classes: Vec::new(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[height, width, channels]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Labels a level is trained on: hierarchy column `level` when it exists, else fine labels.
    pub fn level_labels(&self, level: usize) -> &[usize] {
        match self.coarse.get(level - 1) {
            Some(col) => col,
            None => &self.labels,
        }
    }

    pub fn level_classes(&self, level: usize) -> usize {
        self.coarse_classes.get(level - 1).copied().unwrap_or(self.classes)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            coarse: self.coarse.iter().map(|c| c[..n].to_vec()).collect(),
            coarse_classes: self.coarse_classes.clone(),
            split: self.split,
        }
    }
}

/// Sample indices split into batches after a Fisher–Yates shuffle seeded by `(seed, epoch)`.
/// The last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
