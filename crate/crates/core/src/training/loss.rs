use std::collections::BTreeSet;

use ndarray::Array1;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 2.0;

/// Positive-weighted binary cross-entropy, averaged over the N types:
/// `-(1/N) sum_j [alpha g_j log q_j + (1 - g_j) log(1 - q_j)]`.
pub fn bce_loss(q1: &Array1<f64>, gold: &BTreeSet<usize>, alpha: f64) -> f64 {
    let n = q1.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = q1
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let q = q.clamp(EPS, 1.0 - EPS);
            if gold.contains(&j) {
                alpha * q.ln()
            } else {
                (1.0 - q).ln()
            }
        })
        .sum();
    -total / n as f64
}

/// Derivative of [`bce_loss`] with respect to `q1` (zero where clamped).
pub fn bce_grad(q1: &Array1<f64>, gold: &BTreeSet<usize>, alpha: f64) -> Array1<f64> {
    let n = q1.len() as f64;
    Array1::from_iter(q1.iter().enumerate().map(|(j, &q)| {
        if !(EPS..=1.0 - EPS).contains(&q) {
            return 0.0;
        }
        if gold.contains(&j) {
            -alpha / (q * n)
        } else {
            1.0 / ((1.0 - q) * n)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let l = bce_loss(&array![1.0 - EPS, EPS], &BTreeSet::from([0]), 1.0);
        assert!(l < 1e-6);
    }

    #[test]
    fn uninformative_prediction() {
        let g = BTreeSet::from([0]);
        let l = bce_loss(&array![0.5, 0.5], &g, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l2 = bce_loss(&array![0.5, 0.5], &g, 2.0);
        assert!((l2 - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let g = BTreeSet::from([1, 2]);
        let q = array![0.3, 0.6, 0.05, 0.9];
        let grad = bce_grad(&q, &g, 2.5);
        let h = 1e-7;
        for j in 0..4 {
            let mut p = q.clone();
            p[j] += h;
            let mut m = q.clone();
            m[j] -= h;
            let fd = (bce_loss(&p, &g, 2.5) - bce_loss(&m, &g, 2.5)) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6);
        }
    }
}
