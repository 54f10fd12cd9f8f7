//! Index geometry shared by the exact, interval and float evaluators.
//!
//! Both dense and convolutional layers are linear maps `y = W x`; a
//! [`LinearMap`] enumerates the `(output, weight, input)` triples of that sum
//! so every evaluator (integer point, integer interval, float point, float
//! interval, and their backward passes) walks the same structure.

use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

const PAD: u32 = u32::MAX;

/// Convolution geometry over CHW tensors with a precomputed tap table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub out_h: usize,
    pub out_w: usize,
    /// For output position `p` and tap `t = (c, ky, kx)`, the flat input
    /// index at `taps[p * taps_per_position + t]`, or `PAD`.
    taps: Vec<u32>,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || filters == 0 || in_channels == 0 {
            return Err(QnnError::shape(
                "convolution needs nonzero kernel, stride, filters and channels",
            ));
        }
        let (out_h, pad_top) = Self::axis(in_h, kernel, stride, padding)?;
        let (out_w, pad_left) = Self::axis(in_w, kernel, stride, padding)?;
        let per_pos = in_channels * kernel * kernel;
        let mut taps = Vec::with_capacity(out_h * out_w * per_pos);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for c in 0..in_channels {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad_top as isize;
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= in_h as isize || ix >= in_w as isize {
                                taps.push(PAD);
                            } else {
                                let idx = (c * in_h + iy as usize) * in_w + ix as usize;
                                taps.push(idx as u32);
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGeometry {
            in_channels,
            in_h,
            in_w,
            filters,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
            taps,
        })
    }

    fn axis(len: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
        match padding {
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(len);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if len < kernel {
                    return Err(QnnError::shape(format!(
                        "input extent {len} smaller than kernel {kernel} with valid padding"
                    )));
                }
                Ok(((len - kernel) / stride + 1, 0))
            }
        }
    }

    fn taps_per_position(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinearMap {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeometry),
}

impl LinearMap {
    pub fn inputs(&self) -> usize {
        match self {
            LinearMap::Dense { inputs, .. } => *inputs,
            LinearMap::Conv(g) => g.in_channels * g.in_h * g.in_w,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            LinearMap::Dense { outputs, .. } => *outputs,
            LinearMap::Conv(g) => g.filters * g.positions(),
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            LinearMap::Dense { inputs, outputs } => inputs * outputs,
            LinearMap::Conv(g) => g.filters * g.taps_per_position(),
        }
    }

    /// Number of outputs sharing one bias entry.
    pub fn bias_count(&self) -> usize {
        match self {
            LinearMap::Dense { outputs, .. } => *outputs,
            LinearMap::Conv(g) => g.filters,
        }
    }

    /// Bias index of output `o`.
    #[inline]
    pub fn bias_of(&self, o: usize) -> usize {
        match self {
            LinearMap::Dense { .. } => o,
            LinearMap::Conv(g) => o / g.positions(),
        }
    }

    /// Calls `f(output, weight_index, input_index)` for every term of the
    /// sum, grouped by output in increasing order.
    #[inline]
    pub fn for_each_term(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            LinearMap::Dense { inputs, outputs } => {
                for o in 0..*outputs {
                    let row = o * inputs;
                    for j in 0..*inputs {
                        f(o, row + j, j);
                    }
                }
            }
            LinearMap::Conv(g) => {
                let per_pos = g.taps_per_position();
                let positions = g.positions();
                for filt in 0..g.filters {
                    let wrow = filt * per_pos;
                    for p in 0..positions {
                        let o = filt * positions + p;
                        let taps = &g.taps[p * per_pos..(p + 1) * per_pos];
                        for (t, &xi) in taps.iter().enumerate() {
                            if xi != PAD {
                                f(o, wrow + t, xi as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out[o] += sum_j w[o, j] * x[j]`.
    pub fn accumulate<T: Elem>(&self, w: &[T], x: &[T], out: &mut [T]) {
        debug_assert_eq!(w.len(), self.weight_count());
        debug_assert_eq!(x.len(), self.inputs());
        debug_assert_eq!(out.len(), self.outputs());
        match self {
            // Dense rows are contiguous; keep the accumulator in a register.
            LinearMap::Dense { inputs, .. } => {
                for (o, acc) in out.iter_mut().enumerate() {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let mut s = T::zero();
                    for (a, b) in row.iter().zip(x) {
                        s += *a * *b;
                    }
                    *acc += s;
                }
            }
            LinearMap::Conv(_) => self.for_each_term(|o, wi, xi| out[o] += w[wi] * x[xi]),
        }
    }

    /// Sign-split interval accumulation:
    /// `lo[o] += sum w>=0 ? w*l : w*u`, `hi[o] += sum w>=0 ? w*u : w*l`.
    pub fn accumulate_interval<T: Elem>(
        &self,
        w: &[T],
        l: &[T],
        u: &[T],
        lo: &mut [T],
        hi: &mut [T],
    ) {
        let zero = T::zero();
        self.for_each_term(|o, wi, xi| {
            let wv = w[wi];
            if wv >= zero {
                lo[o] += wv * l[xi];
                hi[o] += wv * u[xi];
            } else {
                lo[o] += wv * u[xi];
                hi[o] += wv * l[xi];
            }
        });
    }

    /// Backward pass of [`accumulate`](Self::accumulate):
    /// `gw[o, j] += gy[o] * x[j]`, `gx[j] += w[o, j] * gy[o]`.
    pub fn backward(&self, w: &[f64], x: &[f64], gy: &[f64], gw: &mut [f64], gx: &mut [f64]) {
        self.for_each_term(|o, wi, xi| {
            let g = gy[o];
            if g != 0.0 {
                gw[wi] += g * x[xi];
                gx[xi] += w[wi] * g;
            }
        });
    }

    /// Backward pass of [`accumulate_interval`](Self::accumulate_interval)
    /// given gradients `gl`, `gu` of the lower and upper outputs. Weights equal
    /// to zero take the nonnegative branch.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_interval(
        &self,
        w: &[f64],
        l: &[f64],
        u: &[f64],
        gl: &[f64],
        gu: &[f64],
        gw: &mut [f64],
        gxl: &mut [f64],
        gxu: &mut [f64],
    ) {
        self.for_each_term(|o, wi, xi| {
            let (a, b) = (gl[o], gu[o]);
            if a == 0.0 && b == 0.0 {
                return;
            }
            let wv = w[wi];
            if wv >= 0.0 {
                gw[wi] += a * l[xi] + b * u[xi];
                gxl[xi] += a * wv;
                gxu[xi] += b * wv;
            } else {
                gw[wi] += a * u[xi] + b * l[xi];
                gxu[xi] += a * wv;
                gxl[xi] += b * wv;
            }
        });
    }
}

/// Numeric element of the evaluators: `i64` for exact semantics, `f64` for
/// the training shadow.
pub trait Elem:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
{
    fn zero() -> Self;
}

impl Elem for i64 {
    fn zero() -> Self {
        0
    }
}

impl Elem for f64 {
    fn zero() -> Self {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::new(1, 28, 28, 4, 5, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (14, 14));
        let g = ConvGeometry::new(1, 7, 7, 1, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (7, 7));
        let g = ConvGeometry::new(1, 7, 7, 1, 3, 1, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (5, 5));
        assert!(ConvGeometry::new(1, 2, 2, 1, 3, 1, Padding::Valid).is_err());
    }

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(
        x: &[i64],
        w: &[i64],
        c: usize,
        h: usize,
        wd: usize,
        f: usize,
        k: usize,
        s: usize,
        pad: Padding,
    ) -> Vec<i64> {
        let (oh, pt) = match pad {
            Padding::Valid => ((h - k) / s + 1, 0),
            Padding::Same => {
                let o = h.div_ceil(s);
                (o, ((o - 1) * s + k).saturating_sub(h) / 2)
            }
        };
        let (ow, pl) = match pad {
            Padding::Valid => ((wd - k) / s + 1, 0),
            Padding::Same => {
                let o = wd.div_ceil(s);
                (o, ((o - 1) * s + k).saturating_sub(wd) / 2)
            }
        };
        let mut out = vec![0; f * oh * ow];
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - pt as isize;
                                let ix = (ox * s + kx) as isize - pl as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[((fi * c + ci) * k + ky) * k + kx]
                                        * x[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(fi * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let (c, h, wd, f, k) = (2, 6, 5, 3, 3);
        let x: Vec<i64> = (0..c * h * wd).map(|i| (i as i64 * 7) % 11 - 5).collect();
        let w: Vec<i64> = (0..f * c * k * k).map(|i| (i as i64 * 5) % 7 - 3).collect();
        for pad in [Padding::Same, Padding::Valid] {
            for s in [1, 2] {
                let g = ConvGeometry::new(c, h, wd, f, k, s, pad).unwrap();
                let map = LinearMap::Conv(g);
                let mut out = vec![0; map.outputs()];
                map.accumulate(&w, &x, &mut out);
                assert_eq!(out, naive_conv(&x, &w, c, h, wd, f, k, s, pad));
            }
        }
    }

    #[test]
    fn interval_accumulation_brackets_points() {
        let map = LinearMap::Dense {
            inputs: 2,
            outputs: 1,
        };
        let w = [1i64, -1];
        let (mut lo, mut hi) = (vec![0], vec![0]);
        map.accumulate_interval(&w, &[2, 1], &[4, 3], &mut lo, &mut hi);
        assert_eq!((lo[0], hi[0]), (-1, 3));
    }

    #[test]
    fn float_backward_is_transpose() {
        let map = LinearMap::Dense {
            inputs: 3,
            outputs: 2,
        };
        let w = [1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let x = [0.5, -1.0, 2.0];
        let gy = [1.0, 2.0];
        let mut gw = vec![0.0; 6];
        let mut gx = vec![0.0; 3];
        map.backward(&w, &x, &gy, &mut gw, &mut gx);
        assert_eq!(gw, vec![0.5, -1.0, 2.0, 1.0, -2.0, 4.0]);
        assert_eq!(gx, vec![-1.0, 3.0, 3.0]);
    }
}
