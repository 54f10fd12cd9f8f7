//! Interval bound propagation over the exact integer semantics.
//!
//! Bounds are pushed through each affine layer with the sign split
//! `lower = sum_{w>=0} w*l + sum_{w<0} w*u + b` (and symmetrically for the
//! upper bound), which equals the center/radius form `mu -/+ r` exactly. Floor
//! rescaling and the activation are monotone, so they are applied to each
//! bound independently.

use crate::error::{QnnError, Result};
use crate::fixedpoint::{rescale_floor, saturate, QFormat, QTensor};
use crate::network::{Activation, AffineLayer, Layer, QNetwork};

/// Elementwise box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IntervalTensor {
    pub lower: QTensor,
    pub upper: QTensor,
}

impl IntervalTensor {
    pub fn new(lower: QTensor, upper: QTensor) -> Result<Self> {
        if lower.shape != upper.shape || lower.format != upper.format {
            return Err(QnnError::shape("interval bounds differ in shape or format"));
        }
        if lower.raw.iter().zip(&upper.raw).any(|(l, u)| l > u) {
            return Err(QnnError::shape("interval lower bound exceeds upper bound"));
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Degenerate interval containing only `x`.
    pub fn point(x: &QTensor) -> Self {
        IntervalTensor {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.lower.shape
    }

    pub fn format(&self) -> QFormat {
        self.lower.format
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn is_point(&self) -> bool {
        self.lower.raw == self.upper.raw
    }

    pub fn contains(&self, x: &QTensor) -> bool {
        x.shape == self.lower.shape
            && x.raw
                .iter()
                .zip(self.lower.raw.iter().zip(&self.upper.raw))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    /// `self` is a subset of `other`.
    pub fn is_within(&self, other: &IntervalTensor) -> bool {
        self.lower.shape == other.lower.shape
            && self.lower.raw.iter().zip(&other.lower.raw).all(|(a, b)| a >= b)
            && self.upper.raw.iter().zip(&other.upper.raw).all(|(a, b)| a <= b)
    }

    /// Number of grid points in the box, `None` on overflow.
    pub fn point_count(&self) -> Option<u128> {
        self.lower
            .raw
            .iter()
            .zip(&self.upper.raw)
            .try_fold(1u128, |acc, (l, u)| acc.checked_mul((u - l + 1) as u128))
    }

    fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Ok(IntervalTensor {
            lower: self.lower.reshape(shape.clone())?,
            upper: self.upper.reshape(shape)?,
        })
    }
}

/// Center/radius pair stored doubled so that midpoints stay integral.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterRadius {
    /// `upper + lower`, i.e. twice the center.
    pub center2: Vec<i64>,
    /// `upper - lower`, i.e. twice the radius.
    pub radius2: Vec<i64>,
}

impl CenterRadius {
    pub fn from_interval(region: &IntervalTensor) -> Self {
        let (l, u) = (&region.lower.raw, &region.upper.raw);
        CenterRadius {
            center2: l.iter().zip(u).map(|(a, b)| a + b).collect(),
            radius2: l.iter().zip(u).map(|(a, b)| b - a).collect(),
        }
    }

    /// Pre-activation bounds `2*(mu -/+ r)` of an affine layer computed from
    /// the center/radius form.
    pub fn affine_bounds_doubled(&self, layer: &AffineLayer, input: QFormat) -> Result<(Vec<i64>, Vec<i64>)> {
        let map = layer.map();
        let bias = layer.aligned_bias(input)?;
        let mut mu2: Vec<i64> = bias.iter().map(|b| 2 * b).collect();
        let mut r2 = vec![0i64; map.outputs()];
        let w = &layer.weights.raw;
        map.for_each_term(|o, wi, xi| {
            mu2[o] += w[wi] * self.center2[xi];
            r2[o] += w[wi].abs() * self.radius2[xi];
        });
        let lo = mu2.iter().zip(&r2).map(|(m, r)| m - r).collect();
        let hi = mu2.iter().zip(&r2).map(|(m, r)| m + r).collect();
        Ok((lo, hi))
    }
}

/// Input box `x -/+ eps` (in raw quantization levels), clipped to the
/// representable range.
pub fn input_region(x: &QTensor, eps: u32) -> IntervalTensor {
    let e = eps as i64;
    let lower = x.raw.iter().map(|v| saturate(v - e, x.format)).collect();
    let upper = x.raw.iter().map(|v| saturate(v + e, x.format)).collect();
    IntervalTensor {
        lower: QTensor {
            shape: x.shape.clone(),
            raw: lower,
            format: x.format,
        },
        upper: QTensor {
            shape: x.shape.clone(),
            raw: upper,
            format: x.format,
        },
    }
}

/// Sign-split accumulator bounds of an affine layer, before rescaling.
pub fn affine_accumulator_bounds(
    layer: &AffineLayer,
    region: &IntervalTensor,
) -> Result<(Vec<i64>, Vec<i64>)> {
    layer.check_input(&region.lower)?;
    let mut lo = layer.aligned_bias(region.format())?;
    let mut hi = lo.clone();
    layer.map().accumulate_interval(
        &layer.weights.raw,
        &region.lower.raw,
        &region.upper.raw,
        &mut lo,
        &mut hi,
    );
    Ok((lo, hi))
}

pub fn layer_propagate(layer: &Layer, region: &IntervalTensor) -> Result<IntervalTensor> {
    match layer {
        Layer::Flatten => {
            let n = region.len();
            region.clone().reshape(vec![n])
        }
        Layer::Affine(a) => {
            let (lo, hi) = affine_accumulator_bounds(a, region)?;
            let shape = a.output_shape();
            let format = a.output_format();
            Ok(IntervalTensor {
                lower: QTensor {
                    shape: shape.clone(),
                    raw: lo.into_iter().map(|v| a.finish(v)).collect(),
                    format,
                },
                upper: QTensor {
                    shape,
                    raw: hi.into_iter().map(|v| a.finish(v)).collect(),
                    format,
                },
            })
        }
    }
}

/// Output logit bounds for every input in `region`.
pub fn propagate(net: &QNetwork, region: &IntervalTensor) -> Result<IntervalTensor> {
    check_region(net, region)?;
    let mut cur = region.clone();
    for layer in net.layers() {
        cur = layer_propagate(layer, &cur)?;
    }
    Ok(cur)
}

fn check_region(net: &QNetwork, region: &IntervalTensor) -> Result<()> {
    if region.shape() != net.input_shape() {
        return Err(QnnError::shape(format!(
            "region shape {:?} does not match network input {:?}",
            region.shape(),
            net.input_shape()
        )));
    }
    if region.format() != net.input_format() {
        return Err(QnnError::InvalidFormat("region format differs from network input".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Certification {
    Certified,
    Unknown,
}

/// Certified iff `lower[label] > upper[j]` for every `j != label`.
pub fn check_robust(bounds: &IntervalTensor, label: usize) -> Result<Certification> {
    let m = bounds.len();
    if label >= m {
        return Err(QnnError::InvalidLabel { label, classes: m });
    }
    let lo = bounds.lower.raw[label];
    let ok = bounds
        .upper
        .raw
        .iter()
        .enumerate()
        .all(|(j, u)| j == label || lo > *u);
    Ok(if ok {
        Certification::Certified
    } else {
        Certification::Unknown
    })
}

/// Lower bounds on `logit[label] - logit[j]` for every `j != label` (in
/// increasing `j`), bounding the difference of the final dense rows directly
/// against the penultimate interval. Each entry is at least as tight as the
/// bound from independent logit intervals.
pub fn margin_lower_bounds(net: &QNetwork, region: &IntervalTensor, label: usize) -> Result<Vec<i64>> {
    let m = net.class_count();
    if label >= m {
        return Err(QnnError::InvalidLabel { label, classes: m });
    }
    let (last, body) = match net.layers().split_last() {
        Some((Layer::Affine(a), body)) if a.map().bias_count() == a.map().outputs()
            && matches!(a.kind, crate::network::AffineKind::Dense) =>
        {
            (a, body)
        }
        _ => {
            return Err(QnnError::UnsupportedArchitecture(
                "margin bounds need a final dense layer".into(),
            ))
        }
    };
    check_region(net, region)?;
    let mut hidden = region.clone();
    for layer in body {
        hidden = layer_propagate(layer, &hidden)?;
    }
    let (acc_lo, acc_hi) = affine_accumulator_bounds(last, &hidden)?;
    let logits_lo: Vec<i64> = acc_lo.iter().map(|v| last.finish(*v)).collect();
    let logits_hi: Vec<i64> = acc_hi.iter().map(|v| last.finish(*v)).collect();
    // Saturated logits break the difference identity; fall back to the
    // independent bounds in that case.
    let fmt = last.output_format();
    let saturates = acc_lo
        .iter()
        .chain(&acc_hi)
        .map(|v| rescale_floor(*v, last.rescale_shift))
        .any(|v| !fmt.contains(v));
    debug_assert_eq!(last.activation, Activation::Identity);

    let inputs = last.map().inputs();
    let w = &last.weights.raw;
    let bias = last.aligned_bias(hidden.format())?;
    let (l, u) = (&hidden.lower.raw, &hidden.upper.raw);
    let row_label = &w[label * inputs..(label + 1) * inputs];
    let mut out = Vec::with_capacity(m.saturating_sub(1));
    for j in (0..m).filter(|j| *j != label) {
        let independent = logits_lo[label] - logits_hi[j];
        if saturates {
            out.push(independent);
            continue;
        }
        let row_j = &w[j * inputs..(j + 1) * inputs];
        let mut acc = bias[label] - bias[j];
        for k in 0..inputs {
            let d = row_label[k] - row_j[k];
            acc += if d >= 0 { d * l[k] } else { d * u[k] };
        }
        // floor(a/2^s) - floor(b/2^s) >= floor((a-b)/2^s)
        let elided = rescale_floor(acc, last.rescale_shift);
        out.push(elided.max(independent));
    }
    Ok(out)
}

/// Robustness check using [`margin_lower_bounds`] when the architecture
/// allows it, otherwise [`check_robust`] on propagated logits.
pub fn certify_region(net: &QNetwork, region: &IntervalTensor, label: usize, elide_last: bool) -> Result<Certification> {
    if elide_last {
        match margin_lower_bounds(net, region, label) {
            Ok(margins) => {
                return Ok(if margins.iter().all(|m| *m > 0) {
                    Certification::Certified
                } else {
                    Certification::Unknown
                })
            }
            Err(QnnError::UnsupportedArchitecture(_)) => {}
            Err(e) => return Err(e),
        }
    }
    check_robust(&propagate(net, region)?, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::dense;
    use crate::network::{forward, layer_forward};

    fn ut(raw: Vec<i64>, bits: u32) -> QTensor {
        QTensor::new(vec![raw.len()], raw, QFormat::unsigned(bits, 0)).unwrap()
    }

    fn bounds(lo: Vec<i64>, hi: Vec<i64>) -> IntervalTensor {
        let f = QFormat::signed(32, 0);
        IntervalTensor::new(
            QTensor::new(vec![lo.len()], lo, f).unwrap(),
            QTensor::new(vec![hi.len()], hi, f).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn input_region_examples() {
        let r = input_region(&ut(vec![100], 8), 4);
        assert_eq!((r.lower.raw.clone(), r.upper.raw.clone()), (vec![96], vec![104]));
        let r = input_region(&ut(vec![2], 8), 4);
        assert_eq!((r.lower.raw.clone(), r.upper.raw.clone()), (vec![0], vec![6]));
        let r = input_region(&ut(vec![100], 8), 0);
        assert!(r.is_point());
        let r = input_region(&ut(vec![253], 8), 4);
        assert_eq!(r.upper.raw, vec![255]);
    }

    #[test]
    fn layer_propagate_examples() {
        let l = Layer::Affine(dense(vec![vec![1, -1]], vec![0], 0, 8, Activation::ReluN));
        let region = IntervalTensor::new(ut(vec![2, 1], 8), ut(vec![4, 3], 8)).unwrap();
        // Brute force over the 9 grid points of the box.
        let (mut mn, mut mx) = (i64::MAX, i64::MIN);
        for a in 2..=4 {
            for b in 1..=3 {
                mn = mn.min(a - b);
                mx = mx.max(a - b);
            }
        }
        assert_eq!((mn, mx), (-1, 3));
        let out = layer_propagate(&l, &region).unwrap();
        assert_eq!((out.lower.raw, out.upper.raw), (vec![0], vec![3]));

        let x = ut(vec![3, 9], 8);
        let point = layer_propagate(&l, &IntervalTensor::point(&x)).unwrap();
        let y = layer_forward(&l, &x).unwrap();
        assert_eq!(point.lower, y);
        assert_eq!(point.upper, y);

        let zero = Layer::Affine(dense(vec![vec![0, 0]; 2], vec![-3, 300], 0, 8, Activation::ReluN));
        let out = layer_propagate(&zero, &region).unwrap();
        assert_eq!((out.lower.raw, out.upper.raw), (vec![0, 255], vec![0, 255]));
    }

    #[test]
    fn check_robust_examples() {
        use Certification::*;
        assert_eq!(check_robust(&bounds(vec![5, 0], vec![7, 3]), 0).unwrap(), Certified);
        assert_eq!(check_robust(&bounds(vec![5, 0], vec![7, 6]), 0).unwrap(), Unknown);
        assert_eq!(check_robust(&bounds(vec![3, 1], vec![4, 3]), 0).unwrap(), Unknown);
        assert!(matches!(
            check_robust(&bounds(vec![3, 1], vec![4, 3]), 2),
            Err(QnnError::InvalidLabel { .. })
        ));
    }

    fn two_layer() -> QNetwork {
        QNetwork::new(
            vec![2],
            QFormat::unsigned(4, 0),
            vec![
                Layer::Affine(dense(vec![vec![2, -1], vec![-1, 3]], vec![1, 0], 1, 4, Activation::ReluN)),
                Layer::Affine(dense(
                    vec![vec![3, -1], vec![-2, 2], vec![1, 1]],
                    vec![0, 5, -2],
                    1,
                    32,
                    Activation::Identity,
                )),
            ],
        )
        .unwrap()
    }

    #[test]
    fn margins_on_points_are_exact() {
        let net = two_layer();
        for a in 0..16 {
            for b in 0..16 {
                let x = ut(vec![a, b], 4);
                let y = forward(&net, &x).unwrap().raw;
                let region = IntervalTensor::point(&x);
                for label in 0..3 {
                    let m = margin_lower_bounds(&net, &region, label).unwrap();
                    let expect: Vec<i64> =
                        (0..3).filter(|j| *j != label).map(|j| y[label] - y[j]).collect();
                    assert_eq!(m, expect);
                }
            }
        }
    }

    #[test]
    fn margins_need_final_dense() {
        let net = QNetwork::new(vec![2], QFormat::unsigned(4, 0), vec![Layer::Flatten]).unwrap();
        let r = IntervalTensor::point(&ut(vec![1, 2], 4));
        assert!(matches!(
            margin_lower_bounds(&net, &r, 0),
            Err(QnnError::UnsupportedArchitecture(_))
        ));
        let single = QNetwork::new(
            vec![1],
            QFormat::unsigned(4, 0),
            vec![Layer::Affine(dense(vec![vec![1]], vec![0], 0, 32, Activation::Identity))],
        )
        .unwrap();
        let r = IntervalTensor::point(&ut(vec![3], 4));
        assert!(margin_lower_bounds(&single, &r, 0).unwrap().is_empty());
    }

    #[test]
    fn center_radius_matches_sign_split() {
        let net = two_layer();
        let a = net.layers()[0].as_affine().unwrap();
        for (l, u) in [([0, 0], [15, 15]), ([3, 4], [5, 9]), ([7, 7], [7, 7]), ([1, 0], [2, 13])] {
            let region = IntervalTensor::new(ut(l.to_vec(), 4), ut(u.to_vec(), 4)).unwrap();
            let (lo, hi) = affine_accumulator_bounds(a, &region).unwrap();
            let (lo2, hi2) = CenterRadius::from_interval(&region)
                .affine_bounds_doubled(a, region.format())
                .unwrap();
            assert_eq!(lo.iter().map(|v| 2 * v).collect::<Vec<_>>(), lo2);
            assert_eq!(hi.iter().map(|v| 2 * v).collect::<Vec<_>>(), hi2);
        }
    }
}
