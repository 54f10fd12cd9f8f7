//! Labelled datasets of raw fixed-point inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QnnError, Result};
use crate::fixedpoint::{QFormat, QTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub input_format: QFormat,
    /// Sample-major raw inputs.
    pub raw: Vec<i64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        input_shape: Vec<usize>,
        input_format: QFormat,
        raw: Vec<i64>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        input_format.validate()?;
        let len: usize = input_shape.iter().product();
        if len == 0 || raw.len() != len * labels.len() {
            return Err(QnnError::CountMismatch {
                images: if len == 0 { 0 } else { raw.len() / len },
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|l| **l >= classes) {
            return Err(QnnError::InvalidLabel { label, classes });
        }
        if let Some(r) = raw.iter().find(|r| !input_format.contains(**r)) {
            return Err(QnnError::InvalidFormat(format!(
                "input value {r} outside {input_format}"
            )));
        }
        Ok(Dataset {
            input_shape,
            input_format,
            raw,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn raw_sample(&self, i: usize) -> &[i64] {
        let n = self.sample_len();
        &self.raw[i * n..(i + 1) * n]
    }

    pub fn sample(&self, i: usize) -> QTensor {
        QTensor {
            shape: self.input_shape.clone(),
            raw: self.raw_sample(i).to_vec(),
            format: self.input_format,
        }
    }

    /// Real values of sample `i`.
    pub fn values(&self, i: usize) -> Vec<f64> {
        let s = self.input_format.scale();
        self.raw_sample(i).iter().map(|r| *r as f64 * s).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut raw = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            raw.extend_from_slice(self.raw_sample(i));
        }
        Dataset {
            input_shape: self.input_shape.clone(),
            input_format: self.input_format,
            raw,
            labels: indices.iter().map(|i| self.labels[*i]).collect(),
            classes: self.classes,
        }
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Same samples viewed with another input shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Dataset> {
        if shape.iter().product::<usize>() != self.sample_len() {
            return Err(QnnError::shape(format!(
                "cannot view samples of shape {:?} as {shape:?}",
                self.input_shape
            )));
        }
        self.input_shape = shape;
        Ok(self)
    }
}

/// Two classes in the UQ0.8 square separated along the first coordinate:
/// class 0 has raw `x0 <= 120`, class 1 has raw `x0 >= 136`.
pub fn two_band_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let x0 = if label == 0 {
            rng.gen_range(0..=120)
        } else {
            rng.gen_range(136..=255)
        };
        raw.push(x0);
        raw.push(rng.gen_range(0..=255));
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Dataset {
        input_shape: vec![2],
        input_format: QFormat::unsigned(0, 8),
        raw,
        labels,
        classes: 2,
    }
    .subset(&order)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_band_respects_gap() {
        let d = two_band_dataset(200, 3);
        assert_eq!(d.len(), 200);
        for i in 0..d.len() {
            let x0 = d.raw_sample(i)[0];
            assert_eq!(d.labels[i] == 0, x0 <= 120);
            assert!(x0 <= 120 || x0 >= 136);
        }
        assert_eq!(d, two_band_dataset(200, 3));
    }

    #[test]
    fn rejects_mismatched_counts() {
        let f = QFormat::unsigned(8, 0);
        assert!(Dataset::new(vec![2], f, vec![1, 2, 3], vec![0, 1], 2).is_err());
        assert!(Dataset::new(vec![2], f, vec![1, 2], vec![2], 2).is_err());
        assert!(Dataset::new(vec![2], f, vec![1, 256], vec![0], 2).is_err());
    }
}
