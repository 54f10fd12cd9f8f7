//! Projected sign-gradient attack on the float shadow, validated exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fixedpoint::QTensor;
use crate::ibp::IntervalTensor;
use crate::network::{classify, QNetwork};
use crate::train::Prepared;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub steps: u32,
    /// Step length as a fraction of the region's largest half-width.
    pub step_fraction: f64,
    pub restarts: u32,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            steps: 20,
            step_fraction: 0.25,
            restarts: 2,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from the region bounds, so the attack on a given region is
/// the same regardless of when or where it runs.
pub fn region_seed(region: &IntervalTensor, seed: u64) -> u64 {
    region
        .lower
        .raw
        .iter()
        .chain(&region.upper.raw)
        .fold(splitmix(seed), |h, v| splitmix(h ^ *v as u64))
}

fn exact_witness(net: &QNetwork, raw: Vec<i64>, region: &IntervalTensor, class: usize) -> Option<QTensor> {
    let x = QTensor {
        raw,
        ..region.lower.clone()
    };
    match classify(net, &x) {
        Ok(c) if c != class => Some(x),
        _ => None,
    }
}

/// Searches `region` for a grid point that the exact network does not
/// assign to `class`. Every candidate is rounded to the input grid and
/// checked with the exact forward pass before it is returned.
pub fn pgd_attack(
    net: &QNetwork,
    shadow: &Prepared<'_>,
    region: &IntervalTensor,
    class: usize,
    cfg: &PgdConfig,
    seed: u64,
) -> Option<QTensor> {
    let lo: Vec<f64> = region.lower.raw.iter().map(|v| *v as f64).collect();
    let hi: Vec<f64> = region.upper.raw.iter().map(|v| *v as f64).collect();
    let half = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (h - l) / 2.0)
        .fold(0.0, f64::max);
    let step = (cfg.step_fraction * half).max(0.5);
    let scale = region.format().scale();
    let mut rng = ChaCha8Rng::seed_from_u64(region_seed(region, seed));
    let classes = net.class_count();
    let round = |x: &[f64]| -> Vec<i64> {
        x.iter()
            .zip(region.lower.raw.iter().zip(&region.upper.raw))
            .map(|(v, (l, u))| (v.round() as i64).clamp(*l, *u))
            .collect()
    };
    // Parameter gradients are a by-product here and are discarded.
    let mut sink = shadow.network().zero_params();
    for restart in 0..cfg.restarts.max(1) {
        let mut x: Vec<f64> = if restart == 0 {
            lo.iter().zip(&hi).map(|(l, h)| (l + h) / 2.0).collect()
        } else {
            lo.iter()
                .zip(&hi)
                .map(|(l, h)| if h > l { rng.gen_range(*l..=*h) } else { *l })
                .collect()
        };
        for _ in 0..=cfg.steps {
            if let Some(w) = exact_witness(net, round(&x), region, class) {
                return Some(w);
            }
            let real: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let (logits, tape) = shadow.forward_point(&real);
            // Ascend the best competitor's margin over the reference class.
            let rival = (0..classes)
                .filter(|j| *j != class)
                .max_by(|a, b| logits[*a].total_cmp(&logits[*b]).then(b.cmp(a)));
            let Some(rival) = rival else { return None };
            let mut g = vec![0.0; classes];
            g[rival] = 1.0;
            g[class] = -1.0;
            let gx = shadow.backward_point(&tape, &g, &mut sink);
            let mut moved = false;
            for ((v, d), (l, h)) in x.iter_mut().zip(&gx).zip(lo.iter().zip(&hi)) {
                if *d != 0.0 {
                    let nv = (*v + step * d.signum()).clamp(*l, *h);
                    moved |= nv != *v;
                    *v = nv;
                }
            }
            if !moved {
                break;
            }
        }
    }
    None
}
