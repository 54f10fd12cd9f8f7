//! Exact fixed-point arithmetic.
//!
//! Every quantity in a quantized network is an integer `raw` paired with a
//! [`QFormat`]; its real value is `raw * 2^-frac_bits`. Sums of products are
//! accumulated in 64-bit integers and brought back to a narrow format with a
//! floor (arithmetic right) shift.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};

/// A Qm.n fixed-point layout: `int_bits` integer bits (sign included when
/// `signed`) followed by `frac_bits` fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    pub int_bits: u32,
    pub frac_bits: u32,
    pub signed: bool,
}

impl QFormat {
    pub fn new(int_bits: u32, frac_bits: u32, signed: bool) -> Result<Self> {
        let fmt = QFormat {
            int_bits,
            frac_bits,
            signed,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    /// Signed format; panics if the total width is outside `1..=32`.
    pub fn signed(int_bits: u32, frac_bits: u32) -> Self {
        Self::new(int_bits, frac_bits, true).expect("valid signed format")
    }

    /// Unsigned format; panics if the total width is outside `1..=32`.
    pub fn unsigned(int_bits: u32, frac_bits: u32) -> Self {
        Self::new(int_bits, frac_bits, false).expect("valid unsigned format")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.int_bits + self.frac_bits;
        if !(1..=32).contains(&k) {
            return Err(QnnError::InvalidFormat(format!(
                "total width {k} of {self} outside 1..=32"
            )));
        }
        if self.signed && self.int_bits == 0 {
            return Err(QnnError::InvalidFormat(format!(
                "signed format {self} needs an integer bit for the sign"
            )));
        }
        Ok(())
    }

    /// Total bit width k.
    pub fn bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn min_raw(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits() - 1))
        } else {
            0
        }
    }

    pub fn max_raw(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits() - 1)) - 1
        } else {
            (1i64 << self.bits()) - 1
        }
    }

    /// Real value of one raw step, `2^-frac_bits`.
    pub fn scale(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn contains(&self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.scale()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.scale()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.signed { "Q" } else { "UQ" };
        write!(f, "{prefix}{}.{}", self.int_bits, self.frac_bits)
    }
}

impl std::str::FromStr for QFormat {
    type Err = QnnError;

    /// Parses `Qm.n` (signed) or `UQm.n` (unsigned).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || QnnError::InvalidFormat(format!("cannot parse format {s:?}"));
        let (signed, rest) = match s.strip_prefix("UQ") {
            Some(r) => (false, r),
            None => (true, s.strip_prefix('Q').ok_or_else(bad)?),
        };
        let (m, n) = rest.split_once('.').ok_or_else(bad)?;
        QFormat::new(m.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?, signed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    /// `floor(x * 2^f)`, the datapath rounding.
    Floor,
    /// Round half away from zero, used when exporting parameters.
    Nearest,
}

/// A single fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QScalar {
    pub raw: i64,
    pub format: QFormat,
}

impl QScalar {
    pub fn new(raw: i64, format: QFormat) -> Result<Self> {
        if !format.contains(raw) {
            return Err(QnnError::InvalidFormat(format!(
                "raw value {raw} outside range of {format}"
            )));
        }
        Ok(QScalar { raw, format })
    }

    pub fn value(&self) -> f64 {
        dequantize(*self)
    }
}

/// Quantizes `value` into `format`, saturating at the range limits.
pub fn quantize(value: f64, format: QFormat, mode: Rounding) -> Result<QScalar> {
    let (raw, _) = quantize_raw(value, format, mode)?;
    Ok(QScalar { raw, format })
}

/// Like [`quantize`] but returns the raw value and whether saturation kicked in.
pub fn quantize_raw(value: f64, format: QFormat, mode: Rounding) -> Result<(i64, bool)> {
    if !value.is_finite() {
        return Err(QnnError::InvalidValue(value));
    }
    // Multiplying by a power of two is exact in binary floating point.
    let scaled = value * (format.frac_bits as f64).exp2();
    let rounded = match mode {
        Rounding::Floor => scaled.floor(),
        Rounding::Nearest => scaled.round(),
    };
    let lo = format.min_raw() as f64;
    let hi = format.max_raw() as f64;
    if rounded < lo {
        Ok((format.min_raw(), true))
    } else if rounded > hi {
        Ok((format.max_raw(), true))
    } else {
        Ok((rounded as i64, false))
    }
}

pub fn dequantize(q: QScalar) -> f64 {
    q.raw as f64 * q.format.scale()
}

/// `floor(acc / 2^shift)`; rounds toward negative infinity.
pub fn rescale_floor(acc: i64, shift: u32) -> i64 {
    if shift >= 64 {
        if acc < 0 {
            -1
        } else {
            0
        }
    } else {
        acc >> shift
    }
}

/// ReLU-N: `max(0, min(2^N - 1, x))`.
pub fn clamp_relu_n(x: i64, clamp_bits: u32) -> i64 {
    debug_assert!(clamp_bits >= 1);
    let hi = if clamp_bits >= 63 {
        i64::MAX
    } else {
        (1i64 << clamp_bits) - 1
    };
    x.clamp(0, hi)
}

pub fn saturate(x: i64, format: QFormat) -> i64 {
    x.clamp(format.min_raw(), format.max_raw())
}

/// 64-bit accumulator for the sums of products of one output neuron.
///
/// With operands of at most 16 bits each the accumulator is exact for any
/// fan-in below 2^31; 8-bit operands allow fan-in up to 2^47.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WideAccumulator(pub i64);

impl WideAccumulator {
    #[inline]
    pub fn mac(&mut self, w: i64, x: i64) {
        self.0 += w * x;
    }

    #[inline]
    pub fn add(&mut self, v: i64) {
        self.0 += v;
    }

    pub fn value(self) -> i64 {
        self.0
    }

    pub fn rescale(self, shift: u32) -> i64 {
        rescale_floor(self.0, shift)
    }
}

/// Exact integer dot product.
pub fn dot(w: &[i64], x: &[i64]) -> WideAccumulator {
    debug_assert_eq!(w.len(), x.len());
    let mut acc = WideAccumulator::default();
    for (a, b) in w.iter().zip(x) {
        acc.mac(*a, *b);
    }
    acc
}

/// Integer tensor in row-major order with a shared format.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub raw: Vec<i64>,
    pub format: QFormat,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, raw: Vec<i64>, format: QFormat) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != raw.len() {
            return Err(QnnError::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                raw.len()
            )));
        }
        if let Some(bad) = raw.iter().find(|r| !format.contains(**r)) {
            return Err(QnnError::InvalidFormat(format!(
                "raw value {bad} outside range of {format}"
            )));
        }
        Ok(QTensor { shape, raw, format })
    }

    pub fn zeros(shape: Vec<usize>, format: QFormat) -> Self {
        let len = shape.iter().product();
        QTensor {
            shape,
            raw: vec![0; len],
            format,
        }
    }

    /// Quantizes real values element by element.
    pub fn quantize(
        shape: Vec<usize>,
        values: &[f64],
        format: QFormat,
        mode: Rounding,
    ) -> Result<Self> {
        let raw = values
            .iter()
            .map(|v| quantize_raw(*v, format, mode).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()?;
        QTensor::new(shape, raw, format)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.format.scale();
        self.raw.iter().map(|r| *r as f64 * s).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.raw.len() {
            return Err(QnnError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}
