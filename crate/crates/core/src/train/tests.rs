use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::two_band_dataset;
use crate::fixedpoint::QFormat;
use crate::ibp::{input_region, margin_lower_bounds, propagate};
use crate::linear::Padding;
use crate::network::forward;
use crate::random::{random_input, random_network, TinyNetSpec};

fn toy_arch() -> ArchSpec {
    ArchSpec {
        input_shape: vec![2],
        input_format: QFormat::unsigned(0, 8),
        layers: vec![LayerSpec::Dense { units: 8 }, LayerSpec::Dense { units: 2 }],
        formats: FormatSpec {
            weights: QFormat::signed(2, 6),
            biases: QFormat::signed(5, 3),
            activations: QFormat::unsigned(3, 5),
        },
    }
}

fn conv_arch() -> ArchSpec {
    ArchSpec {
        input_shape: vec![1, 5, 5],
        input_format: QFormat::unsigned(0, 8),
        layers: vec![
            LayerSpec::Conv {
                filters: 2,
                kernel: 3,
                stride: 2,
                padding: Padding::Same,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Dense { units: 3 },
        ],
        formats: FormatSpec {
            weights: QFormat::signed(2, 6),
            biases: QFormat::signed(5, 3),
            activations: QFormat::unsigned(3, 5),
        },
    }
}

#[test]
fn fake_quant_examples() {
    let wide = (i64::MIN / 4, i64::MAX / 4);
    assert_eq!(fake_quant(0.3, 2, wide), 0.25);
    assert_eq!(fake_quant(0.75, 2, wide), 0.75);
    assert_eq!(fake_quant_grad(0.3, 2, wide), 1.0);
    assert_eq!(fake_quant(9.0, 2, (0, 7)), 1.75);
    assert_eq!(fake_quant_grad(9.0, 2, (0, 7)), 0.0);
    assert_eq!(fake_quant(-0.1, 2, (0, 7)), 0.0);
    assert_eq!(fake_quant_grad(-0.1, 2, (0, 7)), 0.0);
}

#[test]
fn fake_quant_is_piecewise_constant_with_unit_slope() {
    let fq = FakeQuant::for_format(QFormat::signed(2, 4), crate::fixedpoint::Rounding::Floor);
    for i in 0..200 {
        let x = -2.0 + i as f64 * 0.0173;
        let (y, g) = fq.apply(x);
        assert_eq!(fq.apply(y).0, y);
        assert!(y <= x + 1e-12 || g == 0.0);
        assert!(g == 1.0 || x < -2.0 || x >= 2.0 - 1.0 / 16.0);
    }
}

fn random_case(seed: u64) -> (crate::network::QNetwork, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = TinyNetSpec {
        inputs: (1, 4),
        ..TinyNetSpec::default()
    };
    (random_network(&mut rng, &spec), rng)
}

#[test]
fn shadow_forward_matches_exact_network() {
    for seed in 0..60 {
        let (net, mut rng) = random_case(seed);
        let shadow = ShadowNetwork::from_qnetwork(&net);
        let (exported, sat) = export_quantized(&shadow).unwrap();
        assert_eq!(sat, 0);
        assert_eq!(exported, net);
        let prepared = shadow.prepare(Semantics::Quantized);
        let out_scale = net.output_format().scale();
        for _ in 0..100 {
            let x = random_input(&mut rng, &net);
            let exact = forward(&net, &x).unwrap();
            let (logits, _) = prepared.forward_point(&x.dequantize());
            let raw: Vec<i64> = logits.iter().map(|v| v / out_scale).map(|v| v as i64).collect();
            for (v, r) in logits.iter().zip(&raw) {
                assert_eq!(*v, *r as f64 * out_scale);
            }
            assert_eq!(raw, exact.raw, "seed {seed}");
        }
    }
}

#[test]
fn train_bounds_match_exact_propagation() {
    for seed in 0..60 {
        let (net, mut rng) = random_case(seed);
        let shadow = ShadowNetwork::from_qnetwork(&net);
        let out_scale = net.output_format().scale();
        for _ in 0..20 {
            let x = random_input(&mut rng, &net);
            let eps = rng.gen_range(0..4u32);
            let exact = propagate(&net, &input_region(&x, eps)).unwrap();
            let (b, _) = ibp_forward_train(&shadow, &x.dequantize(), eps as f64, None).unwrap();
            let lo: Vec<i64> = b.lower.iter().map(|v| (v / out_scale) as i64).collect();
            let hi: Vec<i64> = b.upper.iter().map(|v| (v / out_scale) as i64).collect();
            assert_eq!(lo, exact.lower.raw, "seed {seed}");
            assert_eq!(hi, exact.upper.raw, "seed {seed}");
            assert!(b.lower.iter().zip(&b.upper).all(|(l, u)| l <= u));

            // The folded margin never beats the exact certifier's margin.
            let label = rng.gen_range(0..net.class_count());
            let exact_m = margin_lower_bounds(&net, &input_region(&x, eps), label).unwrap();
            let (e, _) = ibp_forward_train(&shadow, &x.dequantize(), eps as f64, Some(label)).unwrap();
            let folded: Vec<f64> = (0..net.class_count())
                .filter(|j| *j != label)
                .map(|j| -e.upper[j] / out_scale)
                .collect();
            for (f, m) in folded.iter().zip(&exact_m) {
                assert!(*f <= *m as f64, "seed {seed}: {f} > {m}");
            }
        }
    }
}

#[test]
fn zero_radius_gives_point_bounds() {
    let (net, mut rng) = random_case(5);
    let shadow = ShadowNetwork::from_qnetwork(&net);
    let x = random_input(&mut rng, &net).dequantize();
    let (b, _) = ibp_forward_train(&shadow, &x, 0.0, None).unwrap();
    let (p, _) = shadow.prepare(Semantics::Quantized).forward_point(&x);
    assert_eq!(b.lower, p);
    assert_eq!(b.upper, p);
    assert!(ibp_forward_train(&shadow, &x, -1.0, None).is_err());
}

/// Random linear functional of the network output, differentiated two ways.
fn check_gradients(shadow: &ShadowNetwork, x: &[f64], eps: Option<(f64, Option<usize>)>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = shadow.class_count;
    let c: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = shadow.input_format.scale();
    let objective = |net: &ShadowNetwork| -> (f64, ParamSet) {
        let p = net.prepare(Semantics::Smooth);
        let mut grads = net.zero_params();
        match eps {
            None => {
                let (y, tape) = p.forward_point(x);
                p.backward_point(&tape, &c[..m], &mut grads);
                (y.iter().zip(&c).map(|(a, b)| a * b).sum(), grads)
            }
            Some((e, label)) => {
                let l: Vec<f64> = x.iter().map(|v| v - e * s).collect();
                let u: Vec<f64> = x.iter().map(|v| v + e * s).collect();
                let (b, tape) = p.forward_interval(&l, &u, label).unwrap();
                p.backward_interval(&tape, &c[..m], &c[m..], &mut grads);
                let v = b.lower.iter().zip(&c[..m]).map(|(a, b)| a * b).sum::<f64>()
                    + b.upper.iter().zip(&c[m..]).map(|(a, b)| a * b).sum::<f64>();
                (v, grads)
            }
        }
    };
    let (_, analytic) = objective(shadow);
    let base = shadow.params();
    let h = 1e-6;
    let mut checked = 0;
    for (li, layer) in base.layers.iter().enumerate() {
        for (is_bias, len) in [(false, layer.weights.len()), (true, layer.bias.len())] {
            for k in 0..len {
                let probe = |delta: f64| {
                    let mut p = base.clone();
                    let v = if is_bias {
                        &mut p.layers[li].bias[k]
                    } else {
                        &mut p.layers[li].weights[k]
                    };
                    *v += delta;
                    objective(&shadow.with_params(&p).unwrap()).0
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let a = if is_bias {
                    analytic.layers[li].bias[k]
                } else {
                    analytic.layers[li].weights[k]
                };
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
                assert!(err < 1e-4, "layer {li} bias {is_bias} idx {k}: fd {fd} analytic {a}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

fn jitter(shadow: &ShadowNetwork, rng: &mut ChaCha8Rng) -> ShadowNetwork {
    let mut p = shadow.params();
    for l in &mut p.layers {
        for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    shadow.with_params(&p).unwrap()
}

#[test]
fn smooth_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..15 {
        let (net, mut r) = random_case(100 + seed);
        let shadow = jitter(&ShadowNetwork::from_qnetwork(&net), &mut rng);
        let x: Vec<f64> = random_input(&mut r, &net)
            .dequantize()
            .iter()
            .map(|v| v + rng.gen_range(0.0..0.003))
            .collect();
        let label = rng.gen_range(0..net.class_count());
        check_gradients(&shadow, &x, None, seed);
        check_gradients(&shadow, &x, Some((1.3, None)), seed);
        check_gradients(&shadow, &x, Some((0.7, Some(label))), seed);
    }
    let conv = ShadowNetwork::from_arch(&conv_arch(), &mut rng).unwrap();
    let conv = jitter(&conv, &mut rng);
    let x: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..1.0)).collect();
    check_gradients(&conv, &x, None, 1);
    check_gradients(&conv, &x, Some((2.0, Some(1))), 2);
}

#[test]
fn decoupled_weight_decay_with_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shadow = ShadowNetwork::from_arch(&toy_arch(), &mut rng).unwrap();
    let mut params = shadow.params();
    for l in &mut params.layers {
        l.bias.iter_mut().for_each(|b| *b = 0.5);
    }
    let before = params.clone();
    let zero = shadow.zero_params();
    let mut adam = Adam::new(&shadow, 0.9, 0.999, 1e-8);
    adam.step(&mut params, &zero, 0.01, 0.1);
    for (a, b) in params.layers.iter().zip(&before.layers) {
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert_eq!(*x, y * (1.0 - 0.01 * 0.1));
        }
        assert_eq!(a.bias, b.bias);
    }
    let mut adam = Adam::new(&shadow, 0.9, 0.999, 1e-8);
    let mut p2 = before.clone();
    adam.step(&mut p2, &zero, 0.01, 0.0);
    assert_eq!(p2, before);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        eps_start_step: Some(50),
        eps_end_step: Some(10),
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let c = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(c.eps_window(), (100, 900));
    assert_eq!(c.epsilon(500), 2.0);
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        pretrain_steps: 300,
        pretrain_lr: 0.01,
        total_steps: 200,
        learning_rate: 0.002,
        eps_target: 4.0,
        seed: 9,
        log_every: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_separates_toy_data() {
    let data = two_band_dataset(400, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut shadow = ShadowNetwork::from_arch(&toy_arch(), &mut rng).unwrap();
    let init = evaluate_point(&shadow, &data).unwrap();
    let cfg = TrainConfig {
        pretrain_steps: 2000,
        ..toy_config()
    };
    let rows = pretrain(&mut shadow, &data, &cfg).unwrap();
    assert_eq!(rows.len(), 2000);
    let done = evaluate_point(&shadow, &data).unwrap();
    assert!(done.loss < init.loss);
    assert_eq!(done.clean_acc, 1.0, "accuracy {}", done.clean_acc);

    let mut unchanged = ShadowNetwork::from_arch(&toy_arch(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let before = unchanged.clone();
    pretrain(&mut unchanged, &data, &TrainConfig { pretrain_steps: 0, ..cfg }).unwrap();
    assert_eq!(unchanged, before);
}

#[test]
fn robust_training_certifies_toy_data() {
    let data = two_band_dataset(400, 1);
    let cfg = TrainConfig {
        total_steps: 800,
        ..toy_config()
    };
    let out = train(&data, &toy_arch(), &cfg, |_| {}).unwrap();
    let steps: Vec<u64> = out.metrics.iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*steps.last().unwrap(), 1100);
    let net = &out.network;
    let mut certified = 0;
    for i in 0..data.len() {
        let region = input_region(&data.sample(i), 4);
        let m = margin_lower_bounds(net, &region, data.labels[i]).unwrap();
        certified += m.iter().all(|v| *v > 0) as usize;
    }
    assert_eq!(certified, data.len());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = two_band_dataset(100, 4);
    let cfg = TrainConfig {
        pretrain_steps: 20,
        total_steps: 20,
        ..toy_config()
    };
    let run = |split: Option<usize>| {
        let mut t = Trainer::new(&data, toy_arch(), cfg.clone()).unwrap();
        let mut n = 0;
        while t.advance().unwrap().is_some() {
            n += 1;
            if Some(n) == split {
                let json = t.checkpoint().to_json().unwrap();
                t = Trainer::resume(&data, Checkpoint::from_json(&json).unwrap()).unwrap();
            }
        }
        t.checkpoint().to_json().unwrap()
    };
    let a = run(None);
    assert_eq!(a, run(None));
    assert_eq!(a, run(Some(7)));
    assert_eq!(a, run(Some(25)));
}

#[test]
fn zero_robust_steps_exports_pretrained_network() {
    let data = two_band_dataset(100, 4);
    let cfg = TrainConfig {
        pretrain_steps: 10,
        total_steps: 0,
        ..toy_config()
    };
    let out = train(&data, &toy_arch(), &cfg, |_| {}).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shadow = ShadowNetwork::from_arch(&toy_arch(), &mut rng).unwrap();
    pretrain(&mut shadow, &data, &cfg).unwrap();
    assert_eq!(out.network, export_quantized(&shadow).unwrap().0);
}
