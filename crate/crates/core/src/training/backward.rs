//! Reverse pass through the unrolled mean-field recurrence.
//!
//! Every damped update is differentiated exactly as executed; the
//! intermediate logits are recomputed from the stored trajectory rather
//! than kept, which costs one extra field evaluation per iteration.

use ndarray::{Array1, Array2};

use crate::math::{axpy, dot, sigmoid};
use crate::mfvi::{logit_difference, MarginalState, MfviConfig, SelfTerm, Workspace};
use crate::potentials::{rows, LowRankPotentials};
use crate::unary::UnaryScores;

/// Gradients w.r.t. the unary scores and both factor matrices.
#[derive(Debug, Clone)]
pub struct MfviGrads {
    pub theta1: Array1<f64>,
    pub e0: Array2<f64>,
    pub e1: Array2<f64>,
}

/// Back-propagates `(grad_q0, grad_q1)`, the loss gradient at the last
/// state of `trajectory`, to `theta1`, `E0` and `E1`.
pub fn mfvi_backward(
    trajectory: &[MarginalState],
    scores: &UnaryScores,
    pot: &LowRankPotentials,
    config: &MfviConfig,
    grad_q0: &Array1<f64>,
    grad_q1: &Array1<f64>,
) -> MfviGrads {
    let n = pot.num_types();
    let r = pot.rank();
    let lambda = config.step_size;
    let diag = (config.self_term == SelfTerm::Excluded).then(|| pot.self_couplings());

    let mut g_theta1 = vec![0.0; n];
    let mut g_e0 = Array2::<f64>::zeros((n, r));
    let mut g_e1 = Array2::<f64>::zeros((n, r));
    let mut gq0 = grad_q0.to_vec();
    let mut gq1 = grad_q1.to_vec();
    let mut gd = vec![0.0; n];
    let mut gu = vec![0.0; r];
    let mut work = Workspace::new(n, r);

    for state in trajectory[..trajectory.len() - 1].iter().rev() {
        let q0 = state.q0.as_slice().expect("contiguous");
        let q1 = state.q1.as_slice().expect("contiguous");
        logit_difference(q0, q1, scores, pot, diag.as_ref(), &mut work);

        // Damping: q' = q + lambda (qhat - q).
        for j in 0..n {
            let h1 = sigmoid(work.diff[j]);
            let h0 = sigmoid(-work.diff[j]);
            gd[j] = lambda * (gq1[j] * h1 * (1.0 - h1) - gq0[j] * h0 * (1.0 - h0));
            gq1[j] *= 1.0 - lambda;
            gq0[j] *= 1.0 - lambda;
            g_theta1[j] += gd[j];
        }

        // d = theta1 - theta0 + E1 u + E0 u with u = E1^T q1 - E0^T q0.
        let u = &work.field.u;
        gu.iter_mut().for_each(|x| *x = 0.0);
        let ge0 = g_e0.as_slice_mut().expect("contiguous");
        let ge1 = g_e1.as_slice_mut().expect("contiguous");
        for (j, (e0j, e1j)) in rows(&pot.e0).zip(rows(&pot.e1)).enumerate() {
            axpy(&mut gu, gd[j], e0j);
            axpy(&mut gu, gd[j], e1j);
            axpy(&mut ge0[j * r..(j + 1) * r], gd[j], u);
            axpy(&mut ge1[j * r..(j + 1) * r], gd[j], u);
        }
        for (j, (e0j, e1j)) in rows(&pot.e0).zip(rows(&pot.e1)).enumerate() {
            axpy(&mut ge1[j * r..(j + 1) * r], q1[j], &gu);
            axpy(&mut ge0[j * r..(j + 1) * r], -q0[j], &gu);
            gq1[j] += dot(e1j, &gu);
            gq0[j] -= dot(e0j, &gu);
        }

        if let Some(dg) = &diag {
            for (j, (e0j, e1j)) in rows(&pot.e0).zip(rows(&pot.e1)).enumerate() {
                let g = gd[j];
                gq1[j] -= g * (dg.n1[j] + dg.cross[j]);
                gq0[j] += g * (dg.n0[j] + dg.cross[j]);
                let g_cross = g * (q0[j] - q1[j]);
                let g_n1 = -g * q1[j];
                let g_n0 = g * q0[j];
                let row0 = &mut ge0[j * r..(j + 1) * r];
                axpy(row0, 2.0 * g_n0, e0j);
                axpy(row0, g_cross, e1j);
                let row1 = &mut ge1[j * r..(j + 1) * r];
                axpy(row1, 2.0 * g_n1, e1j);
                axpy(row1, g_cross, e0j);
            }
        }
    }

    // Initialization: q1 = sigmoid(theta1 - theta0), q0 = sigmoid(theta0 - theta1).
    let init = &trajectory[0];
    for j in 0..n {
        let (p1, p0) = (init.q1[j], init.q0[j]);
        g_theta1[j] += gq1[j] * p1 * (1.0 - p1) - gq0[j] * p0 * (1.0 - p0);
    }

    MfviGrads {
        theta1: Array1::from(g_theta1),
        e0: g_e0,
        e1: g_e1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfvi::run;
    use crate::training::loss::{bce_grad, bce_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn loss_of(scores: &UnaryScores, pot: &LowRankPotentials, cfg: &MfviConfig, gold: &BTreeSet<usize>) -> f64 {
        let traj = run(scores, pot, cfg).unwrap();
        bce_loss(&traj.last().unwrap().q1, gold, 2.0)
    }

    #[test]
    fn single_layer_closed_form() {
        let scores = UnaryScores::new(Array1::from(vec![0.3, -1.2, 2.0]));
        let pot = LowRankPotentials::zeros(3, 2);
        let cfg = MfviConfig {
            iterations: 0,
            ..Default::default()
        };
        let gold = BTreeSet::from([0]);
        let traj = run(&scores, &pot, &cfg).unwrap();
        let q = &traj[0].q1;
        let g = mfvi_backward(&traj, &scores, &pot, &cfg, &Array1::zeros(3), &bce_grad(q, &gold, 2.0));
        // d/dtheta = (1/N) [(1 - g) q - alpha g (1 - q)]
        let expected = [-(2.0 / 3.0) * (1.0 - q[0]), q[1] / 3.0, q[2] / 3.0];
        for (got, want) in g.theta1.iter().zip(expected) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_state_gives_zero_factor_gradient() {
        let scores = UnaryScores::new(Array1::zeros(4));
        let pot = LowRankPotentials::zeros(4, 3);
        let cfg = MfviConfig::default();
        let traj = run(&scores, &pot, &cfg).unwrap();
        let ones = Array1::from_elem(4, 1.0);
        let g = mfvi_backward(&traj, &scores, &pot, &cfg, &ones, &ones);
        assert!(g.e0.iter().chain(g.e1.iter()).all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn matches_finite_differences() {
        for self_term in [SelfTerm::Included, SelfTerm::Excluded] {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let n = 6;
            let r = 2;
            let theta = crate::embeddings::gaussian_matrix(&mut rng, 1, n, 1.0).row(0).to_owned();
            let scores = UnaryScores::new(theta);
            let pot = LowRankPotentials::new(
                crate::embeddings::gaussian_matrix(&mut rng, n, r, 0.6),
                crate::embeddings::gaussian_matrix(&mut rng, n, r, 0.6),
            )
            .unwrap();
            let cfg = MfviConfig {
                iterations: 3,
                step_size: 0.6,
                self_term,
                ..Default::default()
            };
            let gold = BTreeSet::from([1, 4]);
            let traj = run(&scores, &pot, &cfg).unwrap();
            let g = mfvi_backward(&traj, &scores, &pot, &cfg, &Array1::zeros(n), &bce_grad(&traj[3].q1, &gold, 2.0));
            let h = 1e-6;
            for j in 0..n {
                let mut sp = scores.clone();
                sp.theta1[j] += h;
                let mut sm = scores.clone();
                sm.theta1[j] -= h;
                let fd = (loss_of(&sp, &pot, &cfg, &gold) - loss_of(&sm, &pot, &cfg, &gold)) / (2.0 * h);
                assert!((fd - g.theta1[j]).abs() < 1e-8, "{self_term:?} theta1[{j}]");
                for c in 0..r {
                    for which in 0..2 {
                        let mut pp = pot.clone();
                        let mut pm = pot.clone();
                        let (gp, a, b) = if which == 0 {
                            (&g.e0, &mut pp.e0, &mut pm.e0)
                        } else {
                            (&g.e1, &mut pp.e1, &mut pm.e1)
                        };
                        a[[j, c]] += h;
                        b[[j, c]] -= h;
                        let fd = (loss_of(&scores, &pp, &cfg, &gold) - loss_of(&scores, &pm, &cfg, &gold)) / (2.0 * h);
                        assert!((fd - gp[[j, c]]).abs() < 1e-8, "{self_term:?} E{which}[{j},{c}]");
                    }
                }
            }
        }
    }
}
