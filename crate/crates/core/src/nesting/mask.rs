use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `tanh(γ · max(x, 0))`, a smooth stand-in for the unit step.
pub fn approx_step<T: Scalar>(x: T, gamma: T) -> T {
    (gamma * x.max(T::zero())).tanh()
}

pub fn approx_step_tensor<T: Scalar>(x: &Tensor<T>, gamma: T) -> Tensor<T> {
    x.map(|v| approx_step(v, gamma))
}

/// Soft mask `tanh(γ · max(|w| − τ, 0))`. Entries with `|w| = τ` map to exactly 0.
pub fn compute_soft_mask<T: Scalar>(w: &Tensor<T>, tau: T, gamma: T) -> Tensor<T> {
    w.map(|v| approx_step(v.abs() - tau, gamma))
}

/// Hard 0/1 mask over one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim(
                "mask",
                format!(
                    "shape {shape:?} needs {} bits, got {}",
                    shape.iter().product::<usize>(),
                    bits.len()
                ),
            ));
        }
        Ok(Self { shape, bits })
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![false; shape.iter().product()],
        }
    }

    /// Parses a string of `0`/`1` characters into a rank-1 mask.
    pub fn from_bit_str(s: &str) -> Self {
        let bits: Vec<bool> = s.chars().map(|c| c == '1').collect();
        Self {
            shape: vec![bits.len()],
            bits,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.first_escape(other).is_none()
    }

    /// First index set here but not in `other`.
    fn first_escape(&self, other: &BinaryMask) -> Option<usize> {
        self.bits.iter().zip(&other.bits).position(|(&a, &b)| a && !b)
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "mask intersection",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }
}

/// `bit = 1` iff the soft value exceeds `cutoff`.
pub fn binarize<T: Scalar>(soft: &Tensor<T>, cutoff: T) -> BinaryMask {
    BinaryMask {
        shape: soft.shape().to_vec(),
        bits: soft.data().iter().map(|&v| v > cutoff).collect(),
    }
}

/// Projection onto the support of `mask`: entries outside it become 0.
pub fn project<T: Scalar>(w: &Tensor<T>, mask: &BinaryMask) -> Result<Tensor<T>> {
    if w.shape() != mask.shape() {
        return Err(Error::dim(
            "project",
            format!("weight {:?} vs mask {:?}", w.shape(), mask.shape()),
        ));
    }
    let mut out = w.clone();
    project_in_place(out.data_mut(), mask);
    Ok(out)
}

pub(crate) fn project_in_place<T: Scalar>(values: &mut [T], mask: &BinaryMask) {
    for (v, &keep) in values.iter_mut().zip(&mask.bits) {
        if !keep {
            *v = T::zero();
        }
    }
}

/// Masks `[M¹, …, M^{l_n}]` over one tensor, core level first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskHierarchy {
    masks: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NestingReport {
    Ok,
    /// A bit set at `lower` is missing at `upper` (both 1-based levels).
    Violation {
        lower: usize,
        upper: usize,
        index: usize,
    },
}

impl NestingReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, NestingReport::Ok)
    }
}

impl MaskHierarchy {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::Schedule("mask hierarchy needs at least one level".into()));
        };
        if masks.iter().any(|m| m.shape != first.shape) {
            return Err(Error::Schedule("mask hierarchy levels differ in shape".into()));
        }
        Ok(Self { masks })
    }

    /// Every level set to the same mask.
    pub fn uniform(mask: BinaryMask, levels: usize) -> Self {
        Self {
            masks: vec![mask; levels],
        }
    }

    pub fn levels(&self) -> usize {
        self.masks.len()
    }

    /// Mask of a 1-based level.
    pub fn level(&self, level: usize) -> &BinaryMask {
        &self.masks[level - 1]
    }

    pub fn set_level(&mut self, level: usize, mask: BinaryMask) {
        self.masks[level - 1] = mask;
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn shape(&self) -> &[usize] {
        self.masks[0].shape()
    }

    pub fn density(&self, level: usize) -> f64 {
        self.level(level).density()
    }
}

/// Checks `support(M^j) ⊆ support(M^k)` for every `j < k`.
pub fn validate_nesting(h: &MaskHierarchy) -> NestingReport {
    for j in 0..h.masks.len() {
        for k in j + 1..h.masks.len() {
            if let Some(index) = h.masks[j].first_escape(&h.masks[k]) {
                return NestingReport::Violation {
                    lower: j + 1,
                    upper: k + 1,
                    index,
                };
            }
        }
    }
    NestingReport::Ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_examples() {
        assert_eq!(approx_step(0.0f64, 1e5), 0.0);
        assert_eq!(approx_step(-0.5f64, 1e5), 0.0);
        // tanh(10) evaluated directly
        let v = approx_step(1e-4f64, 1e5);
        assert!((v - 10f64.tanh()).abs() < 1e-15);
        assert!((v - 0.999_999_995_9).abs() < 1e-10);
    }

    #[test]
    fn soft_mask_examples() {
        let w = Tensor::<f64>::from_vec(vec![0.02, -0.01, 0.03]);
        let m = compute_soft_mask(&w, 0.015, 1e5);
        assert!(m.data()[0] > 0.999_999);
        assert_eq!(m.data()[1], 0.0);
        assert!(m.data()[2] > 0.999_999);

        let w = Tensor::<f64>::from_vec(vec![0.3, 0.0, -1e-3]);
        let m = compute_soft_mask(&w, 0.0, 1e5);
        assert!(m.data()[0] > 0.999 && m.data()[2] > 0.999);
        assert_eq!(m.data()[1], 0.0);

        let w = Tensor::<f64>::from_vec(vec![0.01, -0.02]);
        let m = compute_soft_mask(&w, 0.02, 1e5);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_weight_is_masked() {
        let w = Tensor::<f64>::from_vec(vec![0.015, -0.015]);
        let bits = binarize(&compute_soft_mask(&w, 0.015, 1e5), 0.5);
        assert_eq!(bits.count_ones(), 0);
    }

    #[test]
    fn binarize_examples() {
        let soft = Tensor::<f64>::from_vec(vec![0.9999, 0.0]);
        assert_eq!(binarize(&soft, 0.5).bits(), &[true, false]);
        let soft = Tensor::<f64>::from_vec(vec![0.2, 0.4]);
        assert_eq!(binarize(&soft, 0.5).count_ones(), 0);
    }

    #[test]
    fn cutoff_admits_margin_from_tanh_inversion() {
        let gamma = 1e5;
        let margin = 0.5f64.atanh() / gamma;
        assert!((margin - 5.493e-6).abs() < 1e-9);
        let tau = 0.015;
        let w = Tensor::<f64>::from_vec(vec![tau + margin * 1.001, tau + margin * 0.999]);
        assert_eq!(binarize(&compute_soft_mask(&w, tau, gamma), 0.5).bits(), &[true, false]);
    }

    #[test]
    fn projection_examples() {
        let w = Tensor::<f64>::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(project(&w, &BinaryMask::ones(&[3])).unwrap(), w);
        assert!(project(&w, &BinaryMask::zeros(&[3]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let m = BinaryMask::from_bit_str("101");
        let once = project(&w, &m).unwrap();
        assert_eq!(project(&once, &m).unwrap(), once);
        assert!(project(&w, &BinaryMask::ones(&[2])).is_err());
    }

    #[test]
    fn nesting_examples() {
        let ok = MaskHierarchy::new(vec![BinaryMask::from_bit_str("101"), BinaryMask::from_bit_str("111")]).unwrap();
        assert!(validate_nesting(&ok).is_ok());
        let bad = MaskHierarchy::new(vec![BinaryMask::from_bit_str("110"), BinaryMask::from_bit_str("011")]).unwrap();
        assert_eq!(
            validate_nesting(&bad),
            NestingReport::Violation {
                lower: 1,
                upper: 2,
                index: 0
            }
        );
        let single = MaskHierarchy::new(vec![BinaryMask::from_bit_str("010")]).unwrap();
        assert!(validate_nesting(&single).is_ok());
    }

    #[test]
    fn density_examples() {
        assert_eq!(BinaryMask::ones(&[3, 3]).density(), 1.0);
        let m = BinaryMask::from_bit_str("100100100");
        assert!((m.density() - 1.0 / 3.0).abs() < 1e-15);
    }
}
