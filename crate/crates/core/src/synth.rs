//! Ground truth for small instances: an exhaustive robustness oracle and a
//! constructive builder of networks that are robust on a 1-D dataset.
//!
//! The builder expands every datapoint to its open ball on the integer grid
//! and gives each expanded point its own indicator gadget
//!
//! ```text
//! g(z) = relu(z - x + 1) - relu(z - x) + relu(x - z + 1) - relu(x - z) - 1
//! ```
//!
//! which is 1 at `z = x` and 0 at every other integer. Gadget outputs are summed
//! into the logit of the point's class, so the class of any expanded point
//! gets logit 1 and every other class gets 0.

use rayon::prelude::*;

use crate::error::{QnnError, Result};
use crate::fixedpoint::{QFormat, QTensor};
use crate::ibp::input_region;
use crate::network::{argmax, classify, forward, Activation, AffineLayer, Layer, QNetwork};

/// Default enumeration budget of [`brute_force_verify`].
pub const DEFAULT_BUDGET: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleVerdict {
    Robust,
    Vulnerable { witness: QTensor },
}

/// Decides robustness of `net` at `x` over the closed ball of raw radius
/// `eps` by evaluating every grid point in it. The witness, if any, is the
/// lexicographically smallest misclassified point.
pub fn brute_force_verify(net: &QNetwork, x: &QTensor, eps: u32, budget: u128) -> Result<OracleVerdict> {
    let label = classify(net, x)?;
    let region = input_region(x, eps);
    let size = region
        .point_count()
        .ok_or(QnnError::BudgetExceeded { size: u128::MAX, budget })?;
    if size > budget {
        return Err(QnnError::BudgetExceeded { size, budget });
    }
    let lo = region.lower.raw.clone();
    let widths: Vec<u64> = lo
        .iter()
        .zip(&region.upper.raw)
        .map(|(l, u)| (u - l + 1) as u64)
        .collect();
    let decode = |mut idx: u64| -> QTensor {
        let mut raw = lo.clone();
        for d in (0..raw.len()).rev() {
            raw[d] += (idx % widths[d]) as i64;
            idx /= widths[d];
        }
        QTensor {
            shape: x.shape.clone(),
            raw,
            format: x.format,
        }
    };
    let found = (0..size as u64).into_par_iter().find_first(|i| {
        let p = decode(*i);
        forward(net, &p).map(|y| argmax(&y.raw) != label).unwrap_or(false)
    });
    Ok(match found {
        Some(i) => OracleVerdict::Vulnerable { witness: decode(i) },
        None => OracleVerdict::Robust,
    })
}

/// One-dimensional labelled dataset over unsigned `bits`-bit integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointDataset1D {
    pub points: Vec<(i64, usize)>,
    pub bits: u32,
    /// Radius for which the gap precondition was checked, if any.
    pub gap_eps: Option<u32>,
}

impl PointDataset1D {
    pub fn new(points: Vec<(i64, usize)>, bits: u32) -> Result<Self> {
        let fmt = Self::format_for(bits)?;
        let mut xs: Vec<i64> = points.iter().map(|p| p.0).collect();
        if let Some(bad) = xs.iter().find(|x| !fmt.contains(**x)) {
            return Err(QnnError::InvalidFormat(format!(
                "datapoint {bad} outside {bits}-bit range"
            )));
        }
        xs.sort_unstable();
        if xs.windows(2).any(|w| w[0] == w[1]) {
            return Err(QnnError::Config("datapoints must be distinct".into()));
        }
        Ok(PointDataset1D {
            points,
            bits,
            gap_eps: None,
        })
    }

    fn format_for(bits: u32) -> Result<QFormat> {
        QFormat::new(bits, 0, false)
    }

    pub fn format(&self) -> QFormat {
        Self::format_for(self.bits).expect("validated")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.points.iter().map(|p| p.1 + 1).max().unwrap_or(1)
    }

    /// Checks `|x_i - x_j| >= 2 eps` for all pairs.
    pub fn check_gap(&mut self, eps: u32) -> Result<()> {
        let mut pts = self.points.clone();
        pts.sort_unstable();
        for w in pts.windows(2) {
            if w[1].0 - w[0].0 < 2 * eps as i64 {
                return Err(QnnError::GapViolation { a: w[0].0, b: w[1].0 });
            }
        }
        self.gap_eps = Some(eps);
        Ok(())
    }

    pub fn input(&self, raw: i64) -> QTensor {
        QTensor {
            shape: vec![1],
            raw: vec![raw],
            format: self.format(),
        }
    }
}

/// Closed raw radius equivalent to the open ball `|x' - x| < eps` on the
/// integer grid. Radius 0 keeps the point itself.
pub fn closed_radius(eps: u32) -> u32 {
    eps.saturating_sub(1)
}

/// Every in-range grid point at distance `< eps` of a datapoint, labelled
/// with that datapoint's class. `eps = 0` returns the datapoints themselves.
pub fn expand_dataset(dataset: &PointDataset1D, eps: u32) -> Result<PointDataset1D> {
    let fmt = dataset.format();
    let r = closed_radius(eps) as i64;
    let mut out: Vec<(i64, usize)> = Vec::new();
    for &(x, y) in &dataset.points {
        for z in (x - r).max(fmt.min_raw())..=(x + r).min(fmt.max_raw()) {
            out.push((z, y));
        }
    }
    out.sort_unstable();
    out.dedup();
    for w in out.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(QnnError::GapViolation { a: w[0].0, b: w[1].0 });
        }
    }
    Ok(PointDataset1D {
        points: out,
        bits: dataset.bits,
        gap_eps: None,
    })
}

/// Four ReLU units plus a constant computing the integer indicator of
/// `x_target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndicatorGadget {
    pub hidden_weights: [i64; 4],
    pub hidden_biases: [i64; 4],
    pub output_weights: [i64; 4],
    /// Constant term, folded into the output neuron's bias.
    pub output_bias: i64,
}

impl IndicatorGadget {
    /// Evaluates the gadget with unbounded integer ReLUs.
    pub fn eval(&self, z: i64) -> i64 {
        (0..4)
            .map(|i| {
                let h = (self.hidden_weights[i] * z + self.hidden_biases[i]).max(0);
                self.output_weights[i] * h
            })
            .sum::<i64>()
            + self.output_bias
    }
}

pub fn indicator_gadget(x_target: i64) -> IndicatorGadget {
    IndicatorGadget {
        // relu(z - x + 1), relu(z - x), relu(x - z + 1), relu(x - z)
        hidden_weights: [1, 1, -1, -1],
        hidden_biases: [1 - x_target, -x_target, x_target + 1, x_target],
        output_weights: [1, -1, 1, -1],
        output_bias: -1,
    }
}

/// Builds a one-hidden-layer network that classifies every point of the open
/// `eps`-ball around each datapoint with that datapoint's class.
pub fn construct_robust_qnn(dataset: &PointDataset1D, eps: u32, classes: Option<usize>) -> Result<QNetwork> {
    let mut ds = dataset.clone();
    ds.check_gap(eps)?;
    let expanded = expand_dataset(&ds, eps)?;
    let m = classes.unwrap_or_else(|| ds.class_count()).max(1);
    if let Some(&(_, y)) = expanded.points.iter().find(|p| p.1 >= m) {
        return Err(QnnError::InvalidLabel { label: y, classes: m });
    }
    let k = ds.bits;
    let n = expanded.len();

    let mut w1 = Vec::with_capacity(4 * n);
    let mut b1 = Vec::with_capacity(4 * n);
    let mut w2 = vec![0i64; m * 4 * n];
    let mut b2 = vec![0i64; m];
    for (g, &(x, y)) in expanded.points.iter().enumerate() {
        let gadget = indicator_gadget(x);
        w1.extend_from_slice(&gadget.hidden_weights);
        b1.extend_from_slice(&gadget.hidden_biases);
        for i in 0..4 {
            w2[y * 4 * n + 4 * g + i] = gadget.output_weights[i];
        }
        b2[y] += gadget.output_bias;
    }

    let wfmt = QFormat::signed(2, 0);
    let b1fmt = QFormat::signed(k + 2, 0);
    let b2fmt = QFormat::signed(32, 0);
    let mut layers = Vec::new();
    if n > 0 {
        layers.push(Layer::Affine(AffineLayer::dense(
            QTensor::new(vec![4 * n, 1], w1, wfmt)?,
            QTensor::new(vec![4 * n], b1, b1fmt)?,
            0,
            k + 1,
            0,
            Activation::ReluN,
        )?));
    }
    let hidden = if n > 0 { 4 * n } else { 1 };
    if n == 0 {
        w2 = vec![0; m];
    }
    layers.push(Layer::Affine(AffineLayer::dense(
        QTensor::new(vec![m, hidden], w2, wfmt)?,
        QTensor::new(vec![m], b2, b2fmt)?,
        0,
        32,
        0,
        Activation::Identity,
    )?));
    QNetwork::new(vec![1], ds.format(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gadget_is_an_indicator() {
        let g = indicator_gadget(37);
        assert_eq!(g.eval(37), 1);
        assert_eq!(g.eval(38), 0);
        assert_eq!(g.eval(32), 0);
        for k in [4u32, 8, 10] {
            let hi = (1i64 << k) - 1;
            for x in [0, 1, hi / 2, hi - 1, hi] {
                let g = indicator_gadget(x);
                let total: i64 = (0..=hi).map(|z| g.eval(z)).sum();
                assert_eq!(total, 1);
                for z in 0..=hi {
                    assert_eq!(g.eval(z), (z == x) as i64);
                }
            }
        }
    }

    #[test]
    fn shifted_ramp_variant_vanishes() {
        // relu(z-x+1) - relu(z-x) + relu(x-z) - relu(x-z-1) - 1 is zero on
        // every integer, so it cannot serve as an indicator.
        let relu = |v: i64| v.max(0);
        for x in [0i64, 5, 100] {
            for z in 0..=255 {
                let v = relu(z - x + 1) - relu(z - x) + relu(x - z) - relu(x - z - 1) - 1;
                assert_eq!(v, 0);
            }
        }
    }

    #[test]
    fn expansion_uses_open_balls() {
        let ds = PointDataset1D::new(vec![(100, 0)], 8).unwrap();
        let pts = |e| expand_dataset(&ds, e).unwrap().points.iter().map(|p| p.0).collect::<Vec<_>>();
        assert_eq!(pts(1), vec![100]);
        assert_eq!(pts(2), vec![99, 100, 101]);
        assert_eq!(pts(0), vec![100]);
        let edge = PointDataset1D::new(vec![(1, 0)], 8).unwrap();
        assert_eq!(expand_dataset(&edge, 4).unwrap().len(), 5);
    }

    #[test]
    fn gap_boundary() {
        let mut ds = PointDataset1D::new(vec![(10, 0), (18, 1)], 8).unwrap();
        assert!(ds.check_gap(4).is_ok());
        assert!(construct_robust_qnn(&ds, 4, None).is_ok());
        assert!(matches!(ds.check_gap(5), Err(QnnError::GapViolation { .. })));
        assert!(matches!(
            construct_robust_qnn(&ds, 5, None),
            Err(QnnError::GapViolation { .. })
        ));
    }

    #[test]
    fn two_point_construction() {
        let ds = PointDataset1D::new(vec![(32, 1), (96, 0)], 8).unwrap();
        let net = construct_robust_qnn(&ds, 8, None).unwrap();
        assert!(net.hidden_neurons() <= 150);
        assert_eq!(net.hidden_neurons(), 4 * 2 * 15);
        for &(x, y) in &ds.points {
            for z in x - 7..=x + 7 {
                assert_eq!(classify(&net, &ds.input(z)).unwrap(), y);
            }
            let v = brute_force_verify(&net, &ds.input(x), closed_radius(8), DEFAULT_BUDGET).unwrap();
            assert_eq!(v, OracleVerdict::Robust);
        }
        // The closed ball of radius 8 reaches an uncovered point.
        let v = brute_force_verify(&net, &ds.input(32), 8, DEFAULT_BUDGET).unwrap();
        assert!(matches!(v, OracleVerdict::Vulnerable { .. }));
    }

    #[test]
    fn singleton_and_exact_fit() {
        let ds = PointDataset1D::new(vec![(200, 2)], 8).unwrap();
        let net = construct_robust_qnn(&ds, 1, Some(3)).unwrap();
        assert!(net.hidden_neurons() <= 5);
        assert_eq!(classify(&net, &ds.input(200)).unwrap(), 2);
        assert_eq!(
            brute_force_verify(&net, &ds.input(200), closed_radius(1), DEFAULT_BUDGET).unwrap(),
            OracleVerdict::Robust
        );

        let ds = PointDataset1D::new(vec![(3, 1), (4, 0), (5, 2), (6, 1)], 8).unwrap();
        let net = construct_robust_qnn(&ds, 0, None).unwrap();
        for &(x, y) in &ds.points {
            assert_eq!(classify(&net, &ds.input(x)).unwrap(), y);
        }
    }

    #[test]
    fn brute_force_examples() {
        // Step function: class 1 iff z >= 102 (logit1 = relu(z - 101) * 2, logit0 = 1).
        let hidden = AffineLayer::dense(
            QTensor::new(vec![1, 1], vec![1], QFormat::signed(2, 0)).unwrap(),
            QTensor::new(vec![1], vec![-101], QFormat::signed(10, 0)).unwrap(),
            0,
            9,
            0,
            Activation::ReluN,
        )
        .unwrap();
        let out = AffineLayer::dense(
            QTensor::new(vec![2, 1], vec![0, 2], QFormat::signed(3, 0)).unwrap(),
            QTensor::new(vec![2], vec![1, 0], QFormat::signed(3, 0)).unwrap(),
            0,
            32,
            0,
            Activation::Identity,
        )
        .unwrap();
        let net = QNetwork::new(
            vec![1],
            QFormat::unsigned(8, 0),
            vec![Layer::Affine(hidden), Layer::Affine(out)],
        )
        .unwrap();
        let x = QTensor::new(vec![1], vec![100], QFormat::unsigned(8, 0)).unwrap();
        assert_eq!(classify(&net, &x).unwrap(), 0);
        match brute_force_verify(&net, &x, 4, DEFAULT_BUDGET).unwrap() {
            OracleVerdict::Vulnerable { witness } => assert_eq!(witness.raw, vec![102]),
            v => panic!("expected vulnerable, got {v:?}"),
        }
        assert_eq!(brute_force_verify(&net, &x, 0, DEFAULT_BUDGET).unwrap(), OracleVerdict::Robust);
        assert!(matches!(
            brute_force_verify(&net, &x, 4, 3),
            Err(QnnError::BudgetExceeded { .. })
        ));
    }
}
