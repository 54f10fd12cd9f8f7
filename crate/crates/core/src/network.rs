//! Exact quantized network semantics.
//!
//! An affine layer computes, for every output neuron,
//!
//! ```text
//! acc  = sum_j w_ij * x_j + (b_i << bias_shift)      (64-bit, exact)
//! x''  = floor(acc / 2^rescale_shift)
//! y_i  = act(x'')                                    (ReLU-N, identity, or table)
//! ```
//!
//! where `bias_shift` aligns the bias format with the accumulator format
//! (`weight_frac + input_frac`).

use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::fixedpoint::{clamp_relu_n, rescale_floor, QFormat, QTensor};
use crate::linear::{ConvGeometry, LinearMap, Padding};

/// Monotone quantized activation applied after floor rescaling.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `max(0, min(2^N - 1, x))`.
    ReluN,
    /// Saturation to a signed N-bit integer; used for logits.
    Identity,
    /// Lookup table over the clamped domain `[0, 2^N - 1]`; must be
    /// nondecreasing with outputs inside `[0, 2^N - 1]`.
    Lut { table: Vec<i64> },
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: i64, clamp_bits: u32) -> i64 {
        match self {
            Activation::ReluN => clamp_relu_n(x, clamp_bits),
            Activation::Identity => {
                let half = 1i64 << (clamp_bits - 1);
                x.clamp(-half, half - 1)
            }
            Activation::Lut { table } => table[clamp_relu_n(x, clamp_bits) as usize],
        }
    }

    /// Range of raw values the activation can emit.
    pub fn output_format(&self, clamp_bits: u32, out_frac_bits: u32) -> Result<QFormat> {
        if out_frac_bits > clamp_bits {
            return Err(QnnError::InvalidFormat(format!(
                "output fraction bits {out_frac_bits} exceed clamp bits {clamp_bits}"
            )));
        }
        let int_bits = clamp_bits - out_frac_bits;
        match self {
            Activation::Identity => QFormat::new(int_bits, out_frac_bits, true),
            _ => QFormat::new(int_bits, out_frac_bits, false),
        }
    }

    pub fn validate(&self, clamp_bits: u32) -> Result<()> {
        if !(1..=32).contains(&clamp_bits) {
            return Err(QnnError::InvalidFormat(format!(
                "clamp bits {clamp_bits} outside 1..=32"
            )));
        }
        if let Activation::Lut { table } = self {
            let hi = (1i64 << clamp_bits) - 1;
            if table.len() as i64 != hi + 1 {
                return Err(QnnError::InvalidFormat(format!(
                    "lookup table has {} entries, expected {}",
                    table.len(),
                    hi + 1
                )));
            }
            if table.windows(2).any(|w| w[0] > w[1]) {
                return Err(QnnError::InvalidFormat(
                    "lookup table activation is not monotone".into(),
                ));
            }
            if table.iter().any(|v| !(0..=hi).contains(v)) {
                return Err(QnnError::InvalidFormat(
                    "lookup table output outside [0, 2^N - 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AffineKind {
    Dense,
    Conv2d {
        input_hw: (usize, usize),
        stride: usize,
        padding: Padding,
    },
}

/// Dense or convolutional layer with quantized parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineLayer {
    pub kind: AffineKind,
    /// `[out, in]` for dense, `[filters, channels, k, k]` for convolution.
    pub weights: QTensor,
    pub bias: QTensor,
    pub rescale_shift: u32,
    pub clamp_bits: u32,
    pub out_frac_bits: u32,
    pub activation: Activation,
    map: LinearMap,
}

impl AffineLayer {
    pub fn dense(
        weights: QTensor,
        bias: QTensor,
        rescale_shift: u32,
        clamp_bits: u32,
        out_frac_bits: u32,
        activation: Activation,
    ) -> Result<Self> {
        if weights.shape.len() != 2 {
            return Err(QnnError::shape(format!(
                "dense weights must be [out, in], got {:?}",
                weights.shape
            )));
        }
        let map = LinearMap::Dense {
            outputs: weights.shape[0],
            inputs: weights.shape[1],
        };
        Self::build(
            AffineKind::Dense,
            map,
            weights,
            bias,
            rescale_shift,
            clamp_bits,
            out_frac_bits,
            activation,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        kernel: QTensor,
        bias: QTensor,
        input_hw: (usize, usize),
        stride: usize,
        padding: Padding,
        rescale_shift: u32,
        clamp_bits: u32,
        out_frac_bits: u32,
        activation: Activation,
    ) -> Result<Self> {
        let s = &kernel.shape;
        if s.len() != 4 || s[2] != s[3] {
            return Err(QnnError::shape(format!(
                "conv kernel must be [F, C, K, K], got {s:?}"
            )));
        }
        let geom = ConvGeometry::new(s[1], input_hw.0, input_hw.1, s[0], s[2], stride, padding)?;
        Self::build(
            AffineKind::Conv2d {
                input_hw,
                stride,
                padding,
            },
            LinearMap::Conv(geom),
            kernel,
            bias,
            rescale_shift,
            clamp_bits,
            out_frac_bits,
            activation,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        kind: AffineKind,
        map: LinearMap,
        weights: QTensor,
        bias: QTensor,
        rescale_shift: u32,
        clamp_bits: u32,
        out_frac_bits: u32,
        activation: Activation,
    ) -> Result<Self> {
        if !weights.format.signed || !bias.format.signed {
            return Err(QnnError::InvalidFormat(
                "weights and biases must use signed formats".into(),
            ));
        }
        if bias.shape != [map.bias_count()] {
            return Err(QnnError::shape(format!(
                "bias shape {:?}, expected [{}]",
                bias.shape,
                map.bias_count()
            )));
        }
        activation.validate(clamp_bits)?;
        activation.output_format(clamp_bits, out_frac_bits)?;
        Ok(AffineLayer {
            kind,
            weights,
            bias,
            rescale_shift,
            clamp_bits,
            out_frac_bits,
            activation,
            map,
        })
    }

    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match (&self.kind, &self.map) {
            (AffineKind::Conv2d { input_hw, .. }, LinearMap::Conv(g)) => {
                vec![g.in_channels, input_hw.0, input_hw.1]
            }
            _ => vec![self.map.inputs()],
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match &self.map {
            LinearMap::Conv(g) => vec![g.filters, g.out_h, g.out_w],
            LinearMap::Dense { outputs, .. } => vec![*outputs],
        }
    }

    pub fn output_format(&self) -> QFormat {
        self.activation
            .output_format(self.clamp_bits, self.out_frac_bits)
            .expect("validated at construction")
    }

    /// Left shift that aligns the bias with the accumulator for the given
    /// input format.
    pub fn bias_shift(&self, input: QFormat) -> Result<u32> {
        let acc_frac = self.weights.format.frac_bits + input.frac_bits;
        acc_frac
            .checked_sub(self.bias.format.frac_bits)
            .ok_or_else(|| {
                QnnError::InvalidFormat(format!(
                    "bias format {} finer than accumulator ({acc_frac} fraction bits)",
                    self.bias.format
                ))
            })
    }

    /// Bias values already shifted into accumulator units, one per output.
    pub(crate) fn aligned_bias(&self, input: QFormat) -> Result<Vec<i64>> {
        let bs = self.bias_shift(input)?;
        Ok((0..self.map.outputs())
            .map(|o| self.bias.raw[self.map.bias_of(o)] << bs)
            .collect())
    }

    /// Floor rescale followed by the activation.
    #[inline]
    pub fn finish(&self, acc: i64) -> i64 {
        let y = self
            .activation
            .apply(rescale_floor(acc, self.rescale_shift), self.clamp_bits);
        debug_assert!(self.output_format().contains(y));
        y
    }

    /// Exact accumulators `x'` (before rescaling) for a point input.
    pub fn preactivation(&self, input: &QTensor) -> Result<Vec<i64>> {
        self.check_input(input)?;
        let mut acc = self.aligned_bias(input.format)?;
        self.map.accumulate(&self.weights.raw, &input.raw, &mut acc);
        Ok(acc)
    }

    pub(crate) fn check_input(&self, input: &QTensor) -> Result<()> {
        let expect = self.input_shape();
        if input.shape != expect {
            return Err(QnnError::shape(format!(
                "layer expects input shape {expect:?}, got {:?}",
                input.shape
            )));
        }
        Ok(())
    }

    /// Worst-case accumulator magnitude for inputs in `input`'s range.
    fn max_accumulator(&self, input: QFormat) -> Result<i128> {
        let xmax = input.min_raw().unsigned_abs().max(input.max_raw().unsigned_abs()) as i128;
        let mut row = vec![0i128; self.map.outputs()];
        let w = &self.weights.raw;
        self.map
            .for_each_term(|o, wi, _| row[o] += w[wi].unsigned_abs() as i128 * xmax);
        let bs = self.bias_shift(input)?;
        let bmax = self
            .bias
            .raw
            .iter()
            .map(|b| (b.unsigned_abs() as i128) << bs)
            .max()
            .unwrap_or(0);
        Ok(row.into_iter().max().unwrap_or(0) + bmax)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Affine(AffineLayer),
    Flatten,
}

impl Layer {
    pub fn output_shape(&self, input_shape: &[usize]) -> Vec<usize> {
        match self {
            Layer::Affine(a) => a.output_shape(),
            Layer::Flatten => vec![input_shape.iter().product()],
        }
    }

    pub fn output_format(&self, input_format: QFormat) -> QFormat {
        match self {
            Layer::Affine(a) => a.output_format(),
            Layer::Flatten => input_format,
        }
    }

    pub fn as_affine(&self) -> Option<&AffineLayer> {
        match self {
            Layer::Affine(a) => Some(a),
            Layer::Flatten => None,
        }
    }
}

/// One layer of the exact integer datapath.
pub fn layer_forward(layer: &Layer, input: &QTensor) -> Result<QTensor> {
    match layer {
        Layer::Flatten => {
            let n = input.len();
            input.clone().reshape(vec![n])
        }
        Layer::Affine(a) => {
            let acc = a.preactivation(input)?;
            let raw = acc.into_iter().map(|v| a.finish(v)).collect();
            Ok(QTensor {
                shape: a.output_shape(),
                raw,
                format: a.output_format(),
            })
        }
    }
}

/// Sequential composition of quantized layers ending in logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QNetwork {
    input_shape: Vec<usize>,
    input_format: QFormat,
    layers: Vec<Layer>,
    class_count: usize,
}

impl QNetwork {
    /// Validates shape and format chaining, accumulator headroom, and that a
    /// final affine layer emits unclamped identity logits.
    pub fn new(input_shape: Vec<usize>, input_format: QFormat, layers: Vec<Layer>) -> Result<Self> {
        input_format.validate()?;
        let mut shape = input_shape.clone();
        let mut format = input_format;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Affine(a) = layer {
                if a.input_shape() != shape {
                    return Err(QnnError::shape(format!(
                        "layer {i} expects input {:?}, previous layer produces {shape:?}",
                        a.input_shape()
                    )));
                }
                let headroom = a.max_accumulator(format)?;
                if headroom >= 1i128 << 62 {
                    return Err(QnnError::InvalidFormat(format!(
                        "layer {i} accumulator may overflow 64 bits"
                    )));
                }
            }
            shape = layer.output_shape(&shape);
            format = layer.output_format(format);
        }
        if let Some(Layer::Affine(last)) = layers.last() {
            if last.activation != Activation::Identity {
                return Err(QnnError::UnsupportedArchitecture(
                    "final layer must use identity activation for logits".into(),
                ));
            }
        }
        let class_count = shape.iter().product();
        Ok(QNetwork {
            input_shape,
            input_format,
            layers,
            class_count,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_format(&self) -> QFormat {
        self.input_format
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Input format seen by each layer.
    pub fn layer_input_formats(&self) -> Vec<QFormat> {
        let mut f = self.input_format;
        self.layers
            .iter()
            .map(|l| {
                let cur = f;
                f = l.output_format(f);
                cur
            })
            .collect()
    }

    pub fn output_format(&self) -> QFormat {
        self.layers
            .iter()
            .fold(self.input_format, |f, l| l.output_format(f))
    }

    /// Total count of affine outputs except the logits.
    pub fn hidden_neurons(&self) -> usize {
        let affine: Vec<_> = self.layers.iter().filter_map(Layer::as_affine).collect();
        affine
            .iter()
            .take(affine.len().saturating_sub(1))
            .map(|a| a.map().outputs())
            .sum()
    }

    pub fn check_input(&self, x: &QTensor) -> Result<()> {
        if x.shape != self.input_shape {
            return Err(QnnError::shape(format!(
                "network expects input shape {:?}, got {:?}",
                self.input_shape, x.shape
            )));
        }
        if x.format != self.input_format {
            return Err(QnnError::InvalidFormat(format!(
                "network expects input format {}, got {}",
                self.input_format, x.format
            )));
        }
        if x.raw.iter().any(|r| !x.format.contains(*r)) {
            return Err(QnnError::InvalidFormat("input raw value out of range".into()));
        }
        Ok(())
    }
}

/// Logits of the exact integer network.
pub fn forward(net: &QNetwork, x: &QTensor) -> Result<QTensor> {
    net.check_input(x)?;
    let mut cur = x.clone();
    for layer in &net.layers {
        cur = layer_forward(layer, &cur)?;
    }
    Ok(cur)
}

/// Smallest index attaining the maximum.
pub fn argmax(logits: &[i64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn classify(net: &QNetwork, x: &QTensor) -> Result<usize> {
    Ok(argmax(&forward(net, x)?.raw))
}
