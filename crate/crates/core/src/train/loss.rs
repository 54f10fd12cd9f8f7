//! Per-sample losses with their gradients.

/// Robust hinge loss on output bounds:
/// `sum_{i != label} (upper[i] - lower[label]) * [lower[label] - upper[i] <= 0]`.
///
/// Also accepts margin-relative bounds where `lower[label] = 0`.
pub fn qaibp_loss(lower: &[f64], upper: &[f64], label: usize) -> f64 {
    qaibp_loss_grad(lower, upper, label).0
}

/// Loss plus its gradients w.r.t. `lower` and `upper`.
pub fn qaibp_loss_grad(lower: &[f64], upper: &[f64], label: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut gl = vec![0.0; lower.len()];
    let mut gu = vec![0.0; upper.len()];
    let yl = lower[label];
    let mut loss = 0.0;
    for (i, &yu) in upper.iter().enumerate() {
        if i != label && yl - yu <= 0.0 {
            loss += yu - yl;
            gu[i] += 1.0;
            gl[label] -= 1.0;
        }
    }
    (loss, gl, gu)
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Every non-label upper bound lies strictly below the label lower bound.
pub fn is_certified(lower: &[f64], upper: &[f64], label: usize) -> bool {
    upper
        .iter()
        .enumerate()
        .all(|(i, u)| i == label || lower[label] > *u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(qaibp_loss(&[5.0, 0.0], &[5.0, 3.0], 0), 0.0);
        assert_eq!(qaibp_loss(&[1.0, 0.0], &[1.0, 3.0], 0), 2.0);
        assert_eq!(qaibp_loss(&[3.0, 0.0], &[3.0, 3.0], 0), 0.0);
        assert!(!is_certified(&[3.0, 0.0], &[3.0, 3.0], 0));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let z = [1.0, -2.0, 0.5];
        let (l, g) = cross_entropy_grad(&z, 2);
        let s: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        assert!((l - (s.ln() - 0.5)).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hinge_agrees_with_direct_sum(
            b in prop::collection::vec((-8i32..8, 0i32..8), 2..6),
            label_seed in 0usize..100,
        ) {
            let lower: Vec<f64> = b.iter().map(|(l, _)| *l as f64 / 4.0).collect();
            let upper: Vec<f64> = b.iter().map(|(l, w)| (*l + *w) as f64 / 4.0).collect();
            let label = label_seed % b.len();
            let mut direct = 0.0;
            for i in 0..b.len() {
                if i == label { continue; }
                let ind = if lower[label] - upper[i] <= 0.0 { 1.0 } else { 0.0 };
                direct += (upper[i] - lower[label]) * ind;
            }
            let loss = qaibp_loss(&lower, &upper, label);
            prop_assert_eq!(loss, direct);
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, (0..b.len()).all(|i| i == label || lower[label] >= upper[i]));
        }
    }
}
