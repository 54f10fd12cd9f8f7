//! Random tiny networks and regions for oracle cross-checks.

use rand::Rng;

use crate::fixedpoint::{QFormat, QTensor};
use crate::ibp::IntervalTensor;
use crate::network::{Activation, AffineLayer, Layer, QNetwork};

/// Shape limits for [`random_network`].
#[derive(Debug, Clone)]
pub struct TinyNetSpec {
    pub inputs: (usize, usize),
    pub bits: (u32, u32),
    pub hidden_layers: (usize, usize),
    pub max_width: usize,
    pub classes: (usize, usize),
    /// Probability that a hidden layer uses a random monotone lookup table.
    pub lut_probability: f64,
}

impl Default for TinyNetSpec {
    fn default() -> Self {
        TinyNetSpec {
            inputs: (1, 3),
            bits: (4, 6),
            hidden_layers: (1, 2),
            max_width: 8,
            classes: (2, 3),
            lut_probability: 0.1,
        }
    }
}

fn pick(rng: &mut impl Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, format: QFormat) -> QTensor {
    let n = shape.iter().product();
    let raw = (0..n)
        .map(|_| rng.gen_range(format.min_raw()..=format.max_raw()))
        .collect();
    QTensor { shape, raw, format }
}

fn random_dense(
    rng: &mut impl Rng,
    inputs: usize,
    outputs: usize,
    input_format: QFormat,
    bits: (u32, u32),
    logits: bool,
    lut_probability: f64,
) -> AffineLayer {
    let kw = rng.gen_range(bits.0..=bits.1);
    let wf = rng.gen_range(0..kw);
    let wfmt = QFormat::signed(kw - wf, wf);
    let acc_frac = wf + input_format.frac_bits;
    let kb = rng.gen_range(bits.0..=bits.1 + 2);
    let bf = rng.gen_range(0..kb).min(acc_frac);
    let bfmt = QFormat::signed(kb - bf, bf);
    let (clamp_bits, out_frac, activation) = if logits {
        (32, 0, Activation::Identity)
    } else {
        let n = rng.gen_range(bits.0..=bits.1);
        let act = if rng.gen_bool(lut_probability) {
            let hi = (1i64 << n) - 1;
            let mut table: Vec<i64> = (0..=hi).map(|_| rng.gen_range(0..=hi)).collect();
            table.sort_unstable();
            Activation::Lut { table }
        } else {
            Activation::ReluN
        };
        (n, rng.gen_range(0..=n), act)
    };
    // Shift near the alignment value so outputs spread over the range.
    let align = acc_frac as i64 - out_frac as i64;
    let shift = (align + rng.gen_range(-1..=2)).clamp(0, 16) as u32;
    AffineLayer::dense(
        random_tensor(rng, vec![outputs, inputs], wfmt),
        random_tensor(rng, vec![outputs], bfmt),
        shift,
        clamp_bits,
        out_frac,
        activation,
    )
    .expect("random dense layer")
}

/// A random fully-connected network within `spec`.
pub fn random_network(rng: &mut impl Rng, spec: &TinyNetSpec) -> QNetwork {
    let n_in = pick(rng, spec.inputs);
    let k_in = rng.gen_range(spec.bits.0..=spec.bits.1);
    let f_in = rng.gen_range(0..=k_in);
    let input_format = QFormat::unsigned(k_in - f_in, f_in);
    let hidden = pick(rng, spec.hidden_layers);
    let classes = pick(rng, spec.classes);
    let mut layers = Vec::new();
    let (mut width, mut fmt) = (n_in, input_format);
    for _ in 0..hidden {
        let out = rng.gen_range(1..=spec.max_width);
        let l = random_dense(rng, width, out, fmt, spec.bits, false, spec.lut_probability);
        fmt = l.output_format();
        width = out;
        layers.push(Layer::Affine(l));
    }
    layers.push(Layer::Affine(random_dense(
        rng,
        width,
        classes,
        fmt,
        spec.bits,
        true,
        0.0,
    )));
    QNetwork::new(vec![n_in], input_format, layers).expect("random network")
}

/// Uniform random grid point in the network's input range.
pub fn random_input(rng: &mut impl Rng, net: &QNetwork) -> QTensor {
    random_tensor(rng, net.input_shape().to_vec(), net.input_format())
}

/// Random box inside the input range.
pub fn random_region(rng: &mut impl Rng, net: &QNetwork) -> IntervalTensor {
    let a = random_input(rng, net);
    let b = random_input(rng, net);
    let lower = a.raw.iter().zip(&b.raw).map(|(x, y)| *x.min(y)).collect();
    let upper = a.raw.iter().zip(&b.raw).map(|(x, y)| *x.max(y)).collect();
    IntervalTensor {
        lower: QTensor { raw: lower, ..a.clone() },
        upper: QTensor { raw: upper, ..a },
    }
}

/// Random grid point inside `region`.
pub fn random_point_in(rng: &mut impl Rng, region: &IntervalTensor) -> QTensor {
    let raw = region
        .lower
        .raw
        .iter()
        .zip(&region.upper.raw)
        .map(|(l, u)| rng.gen_range(*l..=*u))
        .collect();
    QTensor {
        raw,
        ..region.lower.clone()
    }
}

/// A random network, input and radius whose closed ball holds at most
/// `max_ball` grid points (before clipping to the input range).
pub fn random_instance(rng: &mut impl Rng, spec: &TinyNetSpec, max_ball: u64) -> (QNetwork, QTensor, u32) {
    let net = random_network(rng, spec);
    let x = random_input(rng, &net);
    let dims = net.input_len() as u32;
    let range = (net.input_format().max_raw() - net.input_format().min_raw()) as u64;
    let mut max_eps = 0u64;
    while max_eps < range && (2 * (max_eps + 1) + 1).saturating_pow(dims) <= max_ball {
        max_eps += 1;
    }
    let eps = rng.gen_range(0..=max_eps) as u32;
    (net, x, eps)
}
