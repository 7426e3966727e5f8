//! Truncated quantile targets and the quantile Huber loss.

use crate::nn::Matrix;

/// Quantile fractions `(2m - 1) / (2M)` for `m = 1..=M`.
pub fn quantile_fractions(m: usize) -> Vec<f64> {
    (1..=m).map(|i| (2 * i - 1) as f64 / (2 * m) as f64).collect()
}

/// Pools the per-net next-state quantiles of every sample, sorts them
/// ascending, drops the `drop_total` largest, and forms
/// `r + gamma (1 - done) (z - alpha logp)` for each kept value.
///
/// `next_quantiles` holds one `batch x M` matrix per net; `rewards`,
/// `dones` and `next_log_prob` have one entry per sample.
pub fn quantile_targets(
    next_quantiles: &[Matrix],
    rewards: &[f64],
    dones: &[bool],
    next_log_prob: &[f64],
    alpha: f64,
    gamma: f64,
    drop_total: usize,
) -> Matrix {
    let batch = rewards.len();
    let pooled = next_quantiles.iter().map(|q| q.ncols()).sum::<usize>();
    let kept = pooled - drop_total;
    let mut out = Matrix::zeros((batch, kept));
    let mut buf = Vec::with_capacity(pooled);
    for b in 0..batch {
        buf.clear();
        for q in next_quantiles {
            buf.extend(q.row(b).iter().copied());
        }
        buf.sort_by(f64::total_cmp);
        let not_done = if dones[b] { 0.0 } else { 1.0 };
        for (j, &z) in buf[..kept].iter().enumerate() {
            out[[b, j]] = rewards[b] + gamma * not_done * (z - alpha * next_log_prob[b]);
        }
    }
    out
}

fn huber(u: f64, kappa: f64) -> (f64, f64) {
    if u.abs() <= kappa {
        (0.5 * u * u, u)
    } else {
        (kappa * (u.abs() - 0.5 * kappa), kappa * u.signum())
    }
}

/// Mean asymmetric Huber loss over every (sample, predicted quantile, target)
/// triple, and its gradient with respect to `pred`.
///
/// `pred` is `batch x M`, `targets` is `batch x N`.
pub fn quantile_huber_loss(pred: &Matrix, targets: &Matrix, kappa: f64) -> (f64, Matrix) {
    let (batch, m) = pred.dim();
    let n = targets.ncols();
    let taus = quantile_fractions(m);
    let count = (batch * m * n) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(pred.raw_dim());
    for b in 0..batch {
        for (i, &tau) in taus.iter().enumerate() {
            let p = pred[[b, i]];
            let mut g = 0.0;
            for j in 0..n {
                let u = targets[[b, j]] - p;
                let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
                let (h, dh) = huber(u, kappa);
                loss += w * h / kappa;
                // du/dp = -1
                g -= w * dh / kappa;
            }
            grad[[b, i]] = g / count;
        }
    }
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fractions() {
        assert_eq!(quantile_fractions(2), vec![0.25, 0.75]);
        let t = quantile_fractions(25);
        assert_eq!(t.len(), 25);
        assert!((t[0] - 0.02).abs() < 1e-15 && (t[24] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn default_truncation_keeps_46() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<Matrix> = (0..2)
            .map(|_| Matrix::from_shape_fn((3, 25), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let t = quantile_targets(&q, &[0.0; 3], &[false; 3], &[0.0; 3], 0.0, 1.0, 4);
        assert_eq!(t.ncols(), 46);
        for b in 0..3 {
            let mut pooled: Vec<f64> = q.iter().flat_map(|m| m.row(b).to_vec()).collect();
            pooled.sort_by(f64::total_cmp);
            assert_eq!(t.row(b).to_vec(), pooled[..46].to_vec());
        }
    }

    #[test]
    fn terminal_targets_equal_reward() {
        let q = vec![Matrix::from_elem((2, 5), 7.0), Matrix::from_elem((2, 5), -3.0)];
        let t = quantile_targets(&q, &[0.5, -1.0], &[true, true], &[2.0, 2.0], 0.3, 0.9, 2);
        assert!(t.row(0).iter().all(|&v| v == 0.5));
        assert!(t.row(1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn target_formula() {
        let q = vec![Matrix::from_shape_vec((1, 3), vec![3.0, 1.0, 2.0]).unwrap()];
        let t = quantile_targets(&q, &[1.0], &[false], &[-0.5], 0.2, 0.9, 1);
        let expect = |z: f64| 1.0 + 0.9 * (z + 0.2 * 0.5);
        assert_eq!(t.row(0).to_vec(), vec![expect(1.0), expect(2.0)]);
    }

    #[test]
    fn huber_zero_when_equal() {
        let p = Matrix::from_elem((2, 1), 0.4);
        let (l, g) = quantile_huber_loss(&p, &p, 1.0);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huber_single_pair_by_hand() {
        // one quantile: tau = 0.5; residual 0.3 > 0 weighs 0.5
        let p = Matrix::from_elem((1, 1), 0.2);
        let t = Matrix::from_elem((1, 1), 0.5);
        let (l, _) = quantile_huber_loss(&p, &t, 1.0);
        assert!((l - 0.5 * 0.3f64.powi(2) / 2.0).abs() < 1e-15);
        // two quantiles: tau = 0.25 with a negative residual weighs 0.75
        let p = Matrix::from_shape_vec((1, 2), vec![0.9, 0.9]).unwrap();
        let t = Matrix::from_elem((1, 1), 0.5);
        let (l, _) = quantile_huber_loss(&p, &t, 1.0);
        let r2 = 0.4f64.powi(2) / 2.0;
        assert!((l - (0.75 * r2 + 0.25 * r2) / 2.0).abs() < 1e-15);
        // residual beyond the threshold is linear
        let p = Matrix::from_elem((1, 1), 0.0);
        let t = Matrix::from_elem((1, 1), 3.0);
        let (l, _) = quantile_huber_loss(&p, &t, 1.0);
        assert!((l - 0.5 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn huber_nonnegative_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p = Matrix::from_shape_fn((2, 3), |_| rng.random_range(-3.0..3.0));
            let t = Matrix::from_shape_fn((2, 4), |_| rng.random_range(-3.0..3.0));
            assert!(quantile_huber_loss(&p, &t, 1.0).0 >= 0.0);
        }
        for _ in 0..20 {
            let p = Matrix::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
            let t = Matrix::from_shape_fn((3, 5), |_| rng.random_range(-3.0..3.0));
            let (_, g) = quantile_huber_loss(&p, &t, 1.0);
            let n = numeric_grad(&p, |pp| quantile_huber_loss(pp, &t, 1.0).0);
            assert!(rel_error(&g, &n) < 1e-4);
        }
    }
}
