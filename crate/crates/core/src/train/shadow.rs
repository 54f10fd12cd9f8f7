//! Float shadow of a quantized network.
//!
//! Parameters are stored as `f64` and passed through fake quantization on the
//! way into every layer. Under [`Semantics::Quantized`] the forward pass
//! reproduces the exact integer network value for value whenever parameters and
//! inputs lie on their grids; gradients flow through every rounding step with
//! the straight-through estimator (unit derivative inside the representable
//! range, zero where a value saturates). [`Semantics::Smooth`] drops all
//! rounding, which leaves a piecewise-linear function suitable for
//! finite-difference checks.
//!
//! Backpropagation works at layer granularity: each forward call returns a
//! tape holding the per-layer inputs and activation slopes, and the matching
//! backward call replays it in reverse.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::fixedpoint::{quantize_raw, QFormat, QTensor, Rounding};
use crate::linear::LinearMap;
use crate::network::{Activation, AffineKind, AffineLayer, Layer, QNetwork};

/// Float-domain stand-in for rounding to a fixed-point grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuant {
    pub frac_bits: u32,
    pub min_raw: i64,
    pub max_raw: i64,
    pub rounding: Rounding,
}

impl FakeQuant {
    pub fn for_format(format: QFormat, rounding: Rounding) -> Self {
        FakeQuant {
            frac_bits: format.frac_bits,
            min_raw: format.min_raw(),
            max_raw: format.max_raw(),
            rounding,
        }
    }

    /// Grid value and straight-through derivative (1 in range, 0 when the
    /// rounded value had to be clamped).
    #[inline]
    pub fn apply(&self, x: f64) -> (f64, f64) {
        let scale = (self.frac_bits as f64).exp2();
        let t = x * scale;
        let r = match self.rounding {
            Rounding::Floor => t.floor(),
            Rounding::Nearest => t.round(),
        };
        let (lo, hi) = (self.min_raw as f64, self.max_raw as f64);
        if r < lo {
            (lo / scale, 0.0)
        } else if r > hi {
            (hi / scale, 0.0)
        } else {
            (r / scale, 1.0)
        }
    }
}

/// `clamp(floor(x * 2^f), range) * 2^-f` for `range = (min_raw, max_raw)`.
pub fn fake_quant(x: f64, frac_bits: u32, range: (i64, i64)) -> f64 {
    FakeQuant {
        frac_bits,
        min_raw: range.0,
        max_raw: range.1,
        rounding: Rounding::Floor,
    }
    .apply(x)
    .0
}

/// Registered derivative of [`fake_quant`].
pub fn fake_quant_grad(x: f64, frac_bits: u32, range: (i64, i64)) -> f64 {
    FakeQuant {
        frac_bits,
        min_raw: range.0,
        max_raw: range.1,
        rounding: Rounding::Floor,
    }
    .apply(x)
    .1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Semantics {
    /// Fake quantization everywhere; matches the integer network.
    Quantized,
    /// No rounding; activations are plain clamps.
    Smooth,
}

/// Quantization metadata of one affine layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_format: QFormat,
    pub bias_format: QFormat,
    pub rescale_shift: u32,
    pub clamp_bits: u32,
    pub out_frac_bits: u32,
    pub activation: Activation,
}

impl QuantSpec {
    fn output_range(&self) -> (i64, i64) {
        match self.activation {
            Activation::Identity => {
                let half = 1i64 << (self.clamp_bits - 1);
                (-half, half - 1)
            }
            _ => (0, (1i64 << self.clamp_bits) - 1),
        }
    }

    /// Activation in output raw units: value and slope w.r.t. `t`.
    #[inline]
    fn activate(&self, t: f64, sem: Semantics) -> (f64, f64) {
        let (lo, hi) = self.output_range();
        let (lo, hi) = (lo as f64, hi as f64);
        match (&self.activation, sem) {
            (Activation::Lut { table }, Semantics::Quantized) => {
                let r = t.floor();
                let i = r.clamp(lo, hi) as usize;
                let slope = if r < lo || r > hi {
                    0.0
                } else {
                    lut_slope(table, i)
                };
                (table[i] as f64, slope)
            }
            (Activation::Lut { table }, Semantics::Smooth) => {
                let c = t.clamp(lo, hi);
                let i = (c.floor() as usize).min(table.len() - 1);
                let slope = lut_slope(table, i);
                let y = table[i] as f64 + (c - i as f64) * slope;
                (y, if t > lo && t < hi { slope } else { 0.0 })
            }
            (_, Semantics::Quantized) => {
                let r = t.floor();
                if r < lo {
                    (lo, 0.0)
                } else if r > hi {
                    (hi, 0.0)
                } else {
                    (r, 1.0)
                }
            }
            (_, Semantics::Smooth) => {
                if t <= lo {
                    (lo, 0.0)
                } else if t >= hi {
                    (hi, 0.0)
                } else {
                    (t, 1.0)
                }
            }
        }
    }
}

fn lut_slope(table: &[i64], i: usize) -> f64 {
    if i + 1 < table.len() {
        (table[i + 1] - table[i]) as f64
    } else if i > 0 {
        (table[i] - table[i - 1]) as f64
    } else {
        0.0
    }
}

/// Trainable dense or convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowAffine {
    pub kind: AffineKind,
    pub weight_shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub quant: QuantSpec,
    /// Fraction bits of this layer's input.
    pub input_frac_bits: u32,
    map: LinearMap,
}

impl ShadowAffine {
    pub fn map(&self) -> &LinearMap {
        &self.map
    }

    /// `2^(w_frac + in_frac - shift)`: real accumulator value to output raw
    /// units.
    fn to_raw_units(&self) -> f64 {
        (self.quant.weight_format.frac_bits as f64 + self.input_frac_bits as f64
            - self.quant.rescale_shift as f64)
            .exp2()
    }

    fn out_scale(&self) -> f64 {
        (-(self.quant.out_frac_bits as f64)).exp2()
    }

    fn output_shape(&self) -> Vec<usize> {
        match &self.map {
            LinearMap::Conv(g) => vec![g.filters, g.out_h, g.out_w],
            LinearMap::Dense { outputs, .. } => vec![*outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShadowLayer {
    Affine(ShadowAffine),
    Flatten,
}

/// Float parameters plus quantization metadata mirroring a [`QNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowNetwork {
    pub input_shape: Vec<usize>,
    pub input_format: QFormat,
    pub layers: Vec<ShadowLayer>,
    pub class_count: usize,
}

/// Architecture element used to build a [`ShadowNetwork`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        #[serde(default = "default_padding")]
        padding: crate::linear::Padding,
    },
    Flatten,
    Dense {
        units: usize,
    },
}

fn default_padding() -> crate::linear::Padding {
    crate::linear::Padding::Same
}

/// Number formats shared by all layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub weights: QFormat,
    pub biases: QFormat,
    /// Unsigned post-activation format; its width is the ReLU-N clamp.
    pub activations: QFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub input_format: QFormat,
    pub layers: Vec<LayerSpec>,
    pub formats: FormatSpec,
}

/// Gradients (or Adam moments) laid out like the network parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamSet {
    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ShadowNetwork {
    /// Random initialization (He-uniform weights, zero biases). Every affine
    /// layer but the last uses ReLU-N over the activation format; the last
    /// emits identity logits at the activation scale.
    pub fn from_arch(arch: &ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        let act = arch.formats.activations;
        if act.signed {
            return Err(QnnError::Config("activation format must be unsigned".into()));
        }
        let last_affine = arch
            .layers
            .iter()
            .rposition(|l| !matches!(l, LayerSpec::Flatten))
            .ok_or_else(|| QnnError::Config("architecture has no affine layer".into()))?;
        let mut shape = arch.input_shape.clone();
        let mut in_frac = arch.input_format.frac_bits;
        let mut layers = Vec::new();
        for (i, spec) in arch.layers.iter().enumerate() {
            let is_last = i == last_affine;
            let quant = QuantSpec {
                weight_format: arch.formats.weights,
                bias_format: arch.formats.biases,
                rescale_shift: 0,
                clamp_bits: if is_last { 32 } else { act.bits() },
                out_frac_bits: act.frac_bits,
                activation: if is_last {
                    Activation::Identity
                } else {
                    Activation::ReluN
                },
            };
            let align = (arch.formats.weights.frac_bits + in_frac) as i64 - act.frac_bits as i64;
            if align < 0 {
                return Err(QnnError::Config(format!(
                    "layer {i}: accumulator has fewer fraction bits than the activation format"
                )));
            }
            let quant = QuantSpec {
                rescale_shift: align as u32,
                ..quant
            };
            let (kind, map, wshape) = match spec {
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    layers.push(ShadowLayer::Flatten);
                    continue;
                }
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(QnnError::Config(format!(
                            "layer {i}: dense layer needs a flat input, got {shape:?}"
                        )));
                    }
                    let map = LinearMap::Dense {
                        inputs: shape[0],
                        outputs: *units,
                    };
                    (AffineKind::Dense, map, vec![*units, shape[0]])
                }
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(QnnError::Config(format!(
                            "layer {i}: convolution needs a CHW input, got {shape:?}"
                        )));
                    }
                    let g = crate::linear::ConvGeometry::new(
                        shape[0], shape[1], shape[2], *filters, *kernel, *stride, *padding,
                    )?;
                    (
                        AffineKind::Conv2d {
                            input_hw: (shape[1], shape[2]),
                            stride: *stride,
                            padding: *padding,
                        },
                        LinearMap::Conv(g),
                        vec![*filters, shape[0], *kernel, *kernel],
                    )
                }
            };
            let fan_in = map.weight_count() / map.bias_count();
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = (0..map.weight_count())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let bias = vec![0.0; map.bias_count()];
            let layer = ShadowAffine {
                kind,
                weight_shape: wshape,
                weights,
                bias,
                quant,
                input_frac_bits: in_frac,
                map,
            };
            shape = layer.output_shape();
            in_frac = act.frac_bits;
            layers.push(ShadowLayer::Affine(layer));
        }
        let class_count = shape.iter().product();
        Ok(ShadowNetwork {
            input_shape: arch.input_shape.clone(),
            input_format: arch.input_format,
            layers,
            class_count,
        })
    }

    /// Float view of an exact network with dequantized parameters.
    pub fn from_qnetwork(net: &QNetwork) -> Self {
        let formats = net.layer_input_formats();
        let layers = net
            .layers()
            .iter()
            .zip(formats)
            .map(|(l, f)| match l {
                Layer::Flatten => ShadowLayer::Flatten,
                Layer::Affine(a) => ShadowLayer::Affine(ShadowAffine {
                    kind: a.kind.clone(),
                    weight_shape: a.weights.shape.clone(),
                    weights: a.weights.dequantize(),
                    bias: a.bias.dequantize(),
                    quant: QuantSpec {
                        weight_format: a.weights.format,
                        bias_format: a.bias.format,
                        rescale_shift: a.rescale_shift,
                        clamp_bits: a.clamp_bits,
                        out_frac_bits: a.out_frac_bits,
                        activation: a.activation.clone(),
                    },
                    input_frac_bits: f.frac_bits,
                    map: a.map().clone(),
                }),
            })
            .collect();
        ShadowNetwork {
            input_shape: net.input_shape().to_vec(),
            input_format: net.input_format(),
            layers,
            class_count: net.class_count(),
        }
    }

    /// Rebuilds the index geometry after deserializing parameters.
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    pub fn params(&self) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    ShadowLayer::Affine(a) => LayerParams {
                        weights: a.weights.clone(),
                        bias: a.bias.clone(),
                    },
                    ShadowLayer::Flatten => LayerParams::default(),
                })
                .collect(),
        }
    }

    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        if params.layers.len() != self.layers.len() {
            return Err(QnnError::shape("parameter set does not match layer count"));
        }
        for (l, p) in self.layers.iter_mut().zip(&params.layers) {
            if let ShadowLayer::Affine(a) = l {
                if p.weights.len() != a.weights.len() || p.bias.len() != a.bias.len() {
                    return Err(QnnError::shape("parameter set does not match layer sizes"));
                }
                a.weights.clone_from(&p.weights);
                a.bias.clone_from(&p.bias);
            }
        }
        Ok(())
    }

    pub fn zero_params(&self) -> ParamSet {
        let mut p = self.params();
        p.scale(0.0);
        p
    }

    pub fn affine_layers(&self) -> impl Iterator<Item = &ShadowAffine> {
        self.layers.iter().filter_map(|l| match l {
            ShadowLayer::Affine(a) => Some(a),
            ShadowLayer::Flatten => None,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Real-valued network input for a raw tensor.
    pub fn input_values(&self, x: &QTensor) -> Vec<f64> {
        x.dequantize()
    }

    /// Quantizes parameters once for a batch of forward/backward passes.
    pub fn prepare(&self, sem: Semantics) -> Prepared<'_> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                ShadowLayer::Flatten => None,
                ShadowLayer::Affine(a) => Some(PreparedAffine::new(a, sem)),
            })
            .collect();
        Prepared {
            net: self,
            sem,
            layers,
        }
    }
}

#[derive(Debug, Clone)]
struct PreparedAffine {
    wq: Vec<f64>,
    wmask: Vec<f64>,
    bq: Vec<f64>,
    bmask: Vec<f64>,
}

impl PreparedAffine {
    fn new(a: &ShadowAffine, sem: Semantics) -> Self {
        match sem {
            Semantics::Smooth => PreparedAffine {
                wq: a.weights.clone(),
                wmask: vec![1.0; a.weights.len()],
                bq: a.bias.clone(),
                bmask: vec![1.0; a.bias.len()],
            },
            Semantics::Quantized => {
                let fw = FakeQuant::for_format(a.quant.weight_format, Rounding::Nearest);
                let fb = FakeQuant::for_format(a.quant.bias_format, Rounding::Nearest);
                let (wq, wmask) = a.weights.iter().map(|w| fw.apply(*w)).unzip();
                let (bq, bmask) = a.bias.iter().map(|b| fb.apply(*b)).unzip();
                PreparedAffine {
                    wq,
                    wmask,
                    bq,
                    bmask,
                }
            }
        }
    }
}

/// Network with parameters fake-quantized for one optimization step.
pub struct Prepared<'a> {
    net: &'a ShadowNetwork,
    sem: Semantics,
    layers: Vec<Option<PreparedAffine>>,
}

/// Per-layer record of a point forward pass.
#[derive(Debug, Clone)]
pub struct PointTape {
    inputs: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

/// Per-layer record of an interval forward pass.
#[derive(Debug, Clone)]
pub struct IntervalTape {
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
    slopes_lower: Vec<Vec<f64>>,
    slopes_upper: Vec<Vec<f64>>,
    elided: Option<usize>,
}

/// Output bounds of the interval forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBounds {
    /// With elision these bound `logit[j] - logit[label]`; otherwise they bound
    /// the logits themselves.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Hidden neurons whose upper bound hit the top of the activation range.
    pub saturated: usize,
    pub hidden: usize,
}

impl<'a> Prepared<'a> {
    pub fn network(&self) -> &ShadowNetwork {
        self.net
    }

    pub fn semantics(&self) -> Semantics {
        self.sem
    }

    fn pre_activation(&self, a: &ShadowAffine, p: &PreparedAffine, x: &[f64]) -> Vec<f64> {
        let map = a.map();
        let mut pre: Vec<f64> = (0..map.outputs()).map(|o| p.bq[map.bias_of(o)]).collect();
        map.accumulate(&p.wq, x, &mut pre);
        pre
    }

    /// Logits (real values) for a real input vector.
    pub fn forward_point(&self, x: &[f64]) -> (Vec<f64>, PointTape) {
        let mut tape = PointTape {
            inputs: Vec::with_capacity(self.layers.len()),
            slopes: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for (layer, prep) in self.net.layers.iter().zip(&self.layers) {
            match (layer, prep) {
                (ShadowLayer::Affine(a), Some(p)) => {
                    let pre = self.pre_activation(a, p, &cur);
                    let (g, s) = (a.to_raw_units(), a.out_scale());
                    let mut slopes = Vec::with_capacity(pre.len());
                    let out = pre
                        .iter()
                        .map(|v| {
                            let (y, d) = a.quant.activate(v * g, self.sem);
                            slopes.push(d * g * s);
                            y * s
                        })
                        .collect();
                    tape.inputs.push(std::mem::replace(&mut cur, out));
                    tape.slopes.push(slopes);
                }
                _ => {
                    tape.inputs.push(Vec::new());
                    tape.slopes.push(Vec::new());
                }
            }
        }
        (cur, tape)
    }

    /// Accumulates parameter gradients (w.r.t. the quantized values) into
    /// `grads` and returns the input gradient.
    pub fn backward_point(&self, tape: &PointTape, g_logits: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        let mut g = g_logits.to_vec();
        for (i, (layer, prep)) in self.net.layers.iter().zip(&self.layers).enumerate().rev() {
            if let (ShadowLayer::Affine(a), Some(p)) = (layer, prep) {
                let map = a.map();
                let gpre: Vec<f64> = g.iter().zip(&tape.slopes[i]).map(|(a, b)| a * b).collect();
                let gl = &mut grads.layers[i];
                for (o, v) in gpre.iter().enumerate() {
                    gl.bias[map.bias_of(o)] += v;
                }
                let mut gx = vec![0.0; map.inputs()];
                map.backward(&p.wq, &tape.inputs[i], &gpre, &mut gl.weights, &mut gx);
                g = gx;
            }
        }
        g
    }

    /// Interval forward pass from real input bounds. With `elide = Some(label)`
    /// the final dense layer is folded into bounds on `logit[j] - logit[label]`.
    pub fn forward_interval(&self, l: &[f64], u: &[f64], elide: Option<usize>) -> Result<(TrainBounds, IntervalTape)> {
        let n = self.layers.len();
        let mut tape = IntervalTape {
            lower: Vec::with_capacity(n),
            upper: Vec::with_capacity(n),
            slopes_lower: Vec::with_capacity(n),
            slopes_upper: Vec::with_capacity(n),
            elided: None,
        };
        let last_affine = self.net.layers.iter().rposition(|l| matches!(l, ShadowLayer::Affine(_)));
        let (mut cl, mut cu) = (l.to_vec(), u.to_vec());
        let (mut saturated, mut hidden) = (0, 0);
        for (i, (layer, prep)) in self.net.layers.iter().zip(&self.layers).enumerate() {
            let (a, p) = match (layer, prep) {
                (ShadowLayer::Affine(a), Some(p)) => (a, p),
                _ => {
                    tape.lower.push(Vec::new());
                    tape.upper.push(Vec::new());
                    tape.slopes_lower.push(Vec::new());
                    tape.slopes_upper.push(Vec::new());
                    continue;
                }
            };
            let (g, s) = (a.to_raw_units(), a.out_scale());
            if Some(i) == last_affine {
                if let (Some(label), AffineKind::Dense) = (elide, &a.kind) {
                    if label >= self.net.class_count {
                        return Err(QnnError::InvalidLabel {
                            label,
                            classes: self.net.class_count,
                        });
                    }
                    let (lo, hi, sl, su) = self.elided_margins(a, p, &cl, &cu, label, g, s);
                    tape.lower.push(cl);
                    tape.upper.push(cu);
                    tape.slopes_lower.push(sl);
                    tape.slopes_upper.push(su);
                    tape.elided = Some(label);
                    return Ok((
                        TrainBounds {
                            lower: lo,
                            upper: hi,
                            saturated,
                            hidden,
                        },
                        tape,
                    ));
                }
            }
            let map = a.map();
            let mut lo: Vec<f64> = (0..map.outputs()).map(|o| p.bq[map.bias_of(o)]).collect();
            let mut hi = lo.clone();
            map.accumulate_interval(&p.wq, &cl, &cu, &mut lo, &mut hi);
            let (out_hi_raw, is_hidden) = (a.quant.output_range().1 as f64, Some(i) != last_affine);
            let mut sl = Vec::with_capacity(lo.len());
            let mut su = Vec::with_capacity(hi.len());
            let lo_out: Vec<f64> = lo
                .iter()
                .map(|v| {
                    let (y, d) = a.quant.activate(v * g, self.sem);
                    sl.push(d * g * s);
                    y * s
                })
                .collect();
            let hi_out: Vec<f64> = hi
                .iter()
                .map(|v| {
                    let t = v * g;
                    if is_hidden && t.floor() > out_hi_raw {
                        saturated += 1;
                    }
                    let (y, d) = a.quant.activate(t, self.sem);
                    su.push(d * g * s);
                    y * s
                })
                .collect();
            if is_hidden {
                hidden += lo_out.len();
            }
            tape.lower.push(std::mem::replace(&mut cl, lo_out));
            tape.upper.push(std::mem::replace(&mut cu, hi_out));
            tape.slopes_lower.push(sl);
            tape.slopes_upper.push(su);
        }
        Ok((
            TrainBounds {
                lower: cl,
                upper: cu,
                saturated,
                hidden,
            },
            tape,
        ))
    }

    /// Bounds on `logit[j] - logit[label]` through the last dense layer.
    #[allow(clippy::too_many_arguments)]
    fn elided_margins(
        &self,
        a: &ShadowAffine,
        p: &PreparedAffine,
        l: &[f64],
        u: &[f64],
        label: usize,
        g: f64,
        s: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let inputs = a.map().inputs();
        let m = self.net.class_count;
        let wl = &p.wq[label * inputs..(label + 1) * inputs];
        let (mut lo, mut hi) = (vec![0.0; m], vec![0.0; m]);
        let (mut sl, mut su) = (vec![0.0; m], vec![0.0; m]);
        for j in (0..m).filter(|j| *j != label) {
            let wj = &p.wq[j * inputs..(j + 1) * inputs];
            // margin = logit[label] - logit[j]
            let db = p.bq[label] - p.bq[j];
            let (mut mlo, mut mhi) = (db, db);
            for k in 0..inputs {
                let d = wl[k] - wj[k];
                if d >= 0.0 {
                    mlo += d * l[k];
                    mhi += d * u[k];
                } else {
                    mlo += d * u[k];
                    mhi += d * l[k];
                }
            }
            let (mlo_t, mhi_t) = (mlo * g, mhi * g);
            let (mlo_q, mhi_q) = match self.sem {
                Semantics::Quantized => (mlo_t.floor(), mhi_t.ceil()),
                Semantics::Smooth => (mlo_t, mhi_t),
            };
            // logit[j] - logit[label] lies in [-mhi, -mlo].
            lo[j] = -mhi_q * s;
            hi[j] = -mlo_q * s;
            sl[j] = g * s;
            su[j] = g * s;
        }
        (lo, hi, sl, su)
    }

    /// Backward pass of [`forward_interval`](Self::forward_interval) given
    /// gradients of the output bounds.
    pub fn backward_interval(&self, tape: &IntervalTape, g_lower: &[f64], g_upper: &[f64], grads: &mut ParamSet) {
        let mut gl = g_lower.to_vec();
        let mut gu = g_upper.to_vec();
        let depth = tape.lower.len();
        let layers = self.net.layers.iter().zip(&self.layers).take(depth);
        for (i, (layer, prep)) in layers.enumerate().rev() {
            let (a, p) = match (layer, prep) {
                (ShadowLayer::Affine(a), Some(p)) => (a, p),
                _ => continue,
            };
            if let (Some(label), true) = (tape.elided, i + 1 == depth) {
                let (ngl, ngu) = self.elided_backward(a, p, tape, i, label, &gl, &gu, grads);
                gl = ngl;
                gu = ngu;
                continue;
            }
            let map = a.map();
            let gpl: Vec<f64> = gl.iter().zip(&tape.slopes_lower[i]).map(|(a, b)| a * b).collect();
            let gpu: Vec<f64> = gu.iter().zip(&tape.slopes_upper[i]).map(|(a, b)| a * b).collect();
            let g = &mut grads.layers[i];
            for o in 0..map.outputs() {
                g.bias[map.bias_of(o)] += gpl[o] + gpu[o];
            }
            let mut gxl = vec![0.0; map.inputs()];
            let mut gxu = vec![0.0; map.inputs()];
            map.backward_interval(
                &p.wq,
                &tape.lower[i],
                &tape.upper[i],
                &gpl,
                &gpu,
                &mut g.weights,
                &mut gxl,
                &mut gxu,
            );
            gl = gxl;
            gu = gxu;
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn elided_backward(
        &self,
        a: &ShadowAffine,
        p: &PreparedAffine,
        tape: &IntervalTape,
        i: usize,
        label: usize,
        g_lower: &[f64],
        g_upper: &[f64],
        grads: &mut ParamSet,
    ) -> (Vec<f64>, Vec<f64>) {
        let inputs = a.map().inputs();
        let m = self.net.class_count;
        let (l, u) = (&tape.lower[i], &tape.upper[i]);
        let mut gxl = vec![0.0; inputs];
        let mut gxu = vec![0.0; inputs];
        let g = &mut grads.layers[i];
        for j in (0..m).filter(|j| *j != label) {
            // lower[j] = -mhi, upper[j] = -mlo (times the slope)
            let gmhi = -g_lower[j] * tape.slopes_lower[i][j];
            let gmlo = -g_upper[j] * tape.slopes_upper[i][j];
            if gmhi == 0.0 && gmlo == 0.0 {
                continue;
            }
            g.bias[label] += gmhi + gmlo;
            g.bias[j] -= gmhi + gmlo;
            for k in 0..inputs {
                let d = p.wq[label * inputs + k] - p.wq[j * inputs + k];
                let (at_lo, at_hi) = if d >= 0.0 { (l[k], u[k]) } else { (u[k], l[k]) };
                let gd = gmlo * at_lo + gmhi * at_hi;
                g.weights[label * inputs + k] += gd;
                g.weights[j * inputs + k] -= gd;
                if d >= 0.0 {
                    gxl[k] += gmlo * d;
                    gxu[k] += gmhi * d;
                } else {
                    gxu[k] += gmlo * d;
                    gxl[k] += gmhi * d;
                }
            }
        }
        (gxl, gxu)
    }

    /// Zeroes gradient entries of saturated parameters (clipped STE).
    pub fn mask_gradients(&self, grads: &mut ParamSet) {
        for (p, g) in self.layers.iter().zip(&mut grads.layers) {
            if let Some(p) = p {
                for (v, m) in g.weights.iter_mut().zip(&p.wmask) {
                    *v *= m;
                }
                for (v, m) in g.bias.iter_mut().zip(&p.bmask) {
                    *v *= m;
                }
            }
        }
    }
}

/// Quantizes shadow parameters (nearest rounding) into an exact network.
/// Returns the network and the number of parameters that saturated.
pub fn export_quantized(shadow: &ShadowNetwork) -> Result<(QNetwork, usize)> {
    let mut saturated = 0;
    let mut layers = Vec::with_capacity(shadow.layers.len());
    for l in &shadow.layers {
        match l {
            ShadowLayer::Flatten => layers.push(Layer::Flatten),
            ShadowLayer::Affine(a) => {
                let mut quant = |vals: &[f64], fmt: QFormat| -> Result<Vec<i64>> {
                    vals.iter()
                        .map(|v| {
                            let (r, sat) = quantize_raw(*v, fmt, Rounding::Nearest)?;
                            saturated += sat as usize;
                            Ok(r)
                        })
                        .collect()
                };
                let w = QTensor::new(
                    a.weight_shape.clone(),
                    quant(&a.weights, a.quant.weight_format)?,
                    a.quant.weight_format,
                )?;
                let b = QTensor::new(
                    vec![a.bias.len()],
                    quant(&a.bias, a.quant.bias_format)?,
                    a.quant.bias_format,
                )?;
                let q = &a.quant;
                let layer = match &a.kind {
                    AffineKind::Dense => AffineLayer::dense(
                        w,
                        b,
                        q.rescale_shift,
                        q.clamp_bits,
                        q.out_frac_bits,
                        q.activation.clone(),
                    )?,
                    AffineKind::Conv2d {
                        input_hw,
                        stride,
                        padding,
                    } => AffineLayer::conv2d(
                        w,
                        b,
                        *input_hw,
                        *stride,
                        *padding,
                        q.rescale_shift,
                        q.clamp_bits,
                        q.out_frac_bits,
                        q.activation.clone(),
                    )?,
                };
                layers.push(Layer::Affine(layer));
            }
        }
    }
    Ok((
        QNetwork::new(shadow.input_shape.clone(), shadow.input_format, layers)?,
        saturated,
    ))
}
