use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, detail: String) -> Error {
    Error::DataFormat {
        path: path.to_path_buf(),
        detail,
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(path, format!("truncated header at byte offset {offset}")))
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != want {
        return Err(format_err(
            path,
            format!("bad magic 0x{magic:08x} at byte offset 0, expected 0x{want:08x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file and its label file; pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = read(images)?;
    let lab = read(labels)?;
    check_magic(&img, IDX_IMAGES, images)?;
    check_magic(&lab, IDX_LABELS, labels)?;
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    if n != n_labels {
        return Err(format_err(labels, format!("{n_labels} labels for {n} images")));
    }
    let pixels = n * rows * cols;
    if img.len() < 16 + pixels {
        return Err(format_err(
            images,
            format!(
                "payload truncated at byte offset {}, expected {} bytes",
                img.len(),
                16 + pixels
            ),
        ));
    }
    if lab.len() < 8 + n {
        return Err(format_err(
            labels,
            format!(
                "payload truncated at byte offset {}, expected {} bytes",
                lab.len(),
                8 + n
            ),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err(images, "empty image set".into()));
    }
    let data = img[16..16 + pixels].iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels_v: Vec<usize> = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let classes = labels_v.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(Tensor::new(vec![n, rows, cols, 1], data)?, labels_v, classes, split)
}

/// Loads the standard MNIST file names from a directory.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )?;
    ds.classes = 10;
    Ok(ds)
}

/// Reads CIFAR-10 binary batches: 3073-byte records of one label and channel-planar RGB.
pub fn load_cifar10(files: &[&Path], split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &path in files {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = usize::from(rec[0]);
            if label >= 10 {
                return Err(format_err(
                    path,
                    format!("label {label} at byte offset {} is outside 0..10", r * CIFAR_RECORD),
                ));
            }
            labels.push(label);
            let planes = &rec[1..];
            let plane = CIFAR_SIDE * CIFAR_SIDE;
            for p in 0..plane {
                for c in 0..3 {
                    data.push(f32::from(planes[c * plane + p]) / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], data)?,
        labels,
        10,
        split,
    )
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation over every pixel.
pub fn channel_stats(ds: &Dataset) -> ChannelStats {
    let c = ds.sample_shape()[2];
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for px in ds.images.data().chunks_exact(c) {
        for ch in 0..c {
            let v = f64::from(px[ch]);
            sum[ch] += v;
            sq[ch] += v * v;
        }
    }
    let m = (ds.images.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, mu)| (s / m - mu * mu).max(1e-12).sqrt())
        .collect();
    ChannelStats { mean, std }
}

pub fn normalize(ds: &mut Dataset, stats: &ChannelStats) {
    let c = stats.mean.len();
    for px in ds.images.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = ((f64::from(px[ch]) - stats.mean[ch]) / stats.std[ch]) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_pair(dir: &Path, n: u32, magic: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let img = dir.join("img");
        let lab = dir.join("lab");
        let mut f = std::fs::File::create(&img).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        for v in [n, 2, 2] {
            f.write_all(&v.to_be_bytes()).unwrap();
        }
        f.write_all(&vec![255u8; (n * 4) as usize]).unwrap();
        let mut f = std::fs::File::create(&lab).unwrap();
        f.write_all(&IDX_LABELS.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img, lab)
    }

    #[test]
    fn idx_parses_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(dir.path(), 3, IDX_IMAGES, &[1, 0, 2]);
        let ds = load_idx(&img, &lab, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[3, 2, 2, 1]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels, vec![1, 0, 2]);
    }

    #[test]
    fn idx_errors_name_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_pair(dir.path(), 3, 0x0803_0000, &[1, 0, 2]);
        let err = load_idx(&img, &lab, Split::Train).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
        let (img, lab) = idx_pair(dir.path(), 3, IDX_IMAGES, &[1, 0]);
        assert!(load_idx(&img, &lab, Split::Train).is_err());
        std::fs::write(&img, b"").unwrap();
        let err = load_idx(&img, &lab, Split::Train).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn cifar_layout_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 3;
        rec[1] = 255; // red plane, pixel 0
        rec[1 + 1024 + 1] = 255; // green plane, pixel 1
        std::fs::write(&path, [rec.clone(), rec.clone()].concat()).unwrap();
        let ds = load_cifar10(&[&path], Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[2, 32, 32, 3]);
        assert_eq!(ds.images.get(&[0, 0, 0, 0]), 1.0);
        assert_eq!(ds.images.get(&[0, 0, 1, 1]), 1.0);
        assert_eq!(ds.images.get(&[0, 0, 1, 0]), 0.0);

        rec[0] = 10;
        std::fs::write(&path, &rec).unwrap();
        assert!(load_cifar10(&[&path], Split::Train).is_err());
        std::fs::write(&path, &rec[..100]).unwrap();
        assert!(load_cifar10(&[&path], Split::Train).is_err());
    }

    #[test]
    fn normalized_train_split_has_zero_mean() {
        let data: Vec<f32> = (0..48).map(|i| (i % 7) as f32 / 7.0).collect();
        let mut ds = Dataset::new(
            Tensor::new(vec![4, 2, 2, 3], data).unwrap(),
            vec![0, 1, 0, 1],
            2,
            Split::Train,
        )
        .unwrap();
        let stats = channel_stats(&ds);
        normalize(&mut ds, &stats);
        let after = channel_stats(&ds);
        assert!(after.mean.iter().all(|m| m.abs() < 1e-6));
    }
}
