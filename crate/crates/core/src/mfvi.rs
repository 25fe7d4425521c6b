//! Damped mean-field inference over the low-rank pairwise CRF.
//!
//! The marginals start at the per-type softmax of the unary scores and are
//! updated `T` times:
//!
//! ```text
//! l1 = theta1 + E1 (E1^T q1) - E1 (E0^T q0)
//! l0 = theta0 + E0 (E0^T q0) - E0 (E1^T q1)
//! q  <- q + lambda * (softmax(l0, l1) - q)
//! ```
//!
//! Each iteration is O(NR). The full trajectory is kept so that every
//! iterate can be decoded and so the recurrence can be differentiated.

use std::collections::BTreeSet;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::potentials::{FieldScratch, LowRankPotentials, SelfCouplings};
use crate::unary::UnaryScores;

pub const DEFAULT_ITERATIONS: usize = 4;
pub const DEFAULT_STEP_SIZE: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Whether a type's own diagonal potential enters its mean-field update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelfTerm {
    /// Sum over all k, as in the factorized vector update.
    #[default]
    Included,
    /// Sum over k != j; diagonal contributions are subtracted.
    Excluded,
}

impl std::str::FromStr for SelfTerm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "included" => Ok(SelfTerm::Included),
            "excluded" => Ok(SelfTerm::Excluded),
            _ => Err(Error::Config(format!("unknown self-term mode `{s}` (included|excluded)"))),
        }
    }
}

impl std::fmt::Display for SelfTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelfTerm::Included => "included",
            SelfTerm::Excluded => "excluded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfviConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub threshold: f64,
    pub force_nonempty: bool,
    pub self_term: SelfTerm,
}

impl Default for MfviConfig {
    fn default() -> Self {
        MfviConfig {
            iterations: DEFAULT_ITERATIONS,
            step_size: DEFAULT_STEP_SIZE,
            threshold: DEFAULT_THRESHOLD,
            force_nonempty: false,
            self_term: SelfTerm::Included,
        }
    }
}

impl MfviConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.step_size) {
            return Err(Error::Config(format!("step size {} outside [0, 1]", self.step_size)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Bernoulli marginals `(q0[j], q1[j])` for every type.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalState {
    pub q0: Array1<f64>,
    pub q1: Array1<f64>,
}

impl MarginalState {
    pub fn len(&self) -> usize {
        self.q1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q1.is_empty()
    }
}

/// Per-type softmax of `(theta0, theta1)`.
pub fn init_marginals(scores: &UnaryScores) -> MarginalState {
    let q1 = ndarray::Zip::from(&scores.theta1)
        .and(&scores.theta0)
        .map_collect(|&t1, &t0| sigmoid(t1 - t0));
    let q0 = ndarray::Zip::from(&scores.theta1)
        .and(&scores.theta0)
        .map_collect(|&t1, &t0| sigmoid(t0 - t1));
    MarginalState { q0, q1 }
}

/// Reusable buffers for one instance's iterations.
pub(crate) struct Workspace {
    pub(crate) field: FieldScratch,
    pub(crate) f0: Vec<f64>,
    pub(crate) f1: Vec<f64>,
    pub(crate) diff: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(n: usize, rank: usize) -> Self {
        Workspace {
            field: FieldScratch::new(rank),
            f0: vec![0.0; n],
            f1: vec![0.0; n],
            diff: vec![0.0; n],
        }
    }
}

/// Fills `work.diff` with `l1 - l0` for the state `(q0, q1)`; the
/// R-vector `u = E1^T q1 - E0^T q0` is left in `work.field.u`.
pub(crate) fn logit_difference(
    q0: &[f64],
    q1: &[f64],
    scores: &UnaryScores,
    pot: &LowRankPotentials,
    diag: Option<&SelfCouplings>,
    work: &mut Workspace,
) {
    pot.pairwise_field_into(q0, q1, &mut work.field, &mut work.f0, &mut work.f1);
    if let Some(d) = diag {
        for j in 0..q1.len() {
            work.f1[j] -= d.n1[j] * q1[j] - d.cross[j] * q0[j];
            work.f0[j] -= d.n0[j] * q0[j] - d.cross[j] * q1[j];
        }
    }
    let t1 = scores.theta1.as_slice().expect("contiguous");
    let t0 = scores.theta0.as_slice().expect("contiguous");
    for j in 0..q1.len() {
        work.diff[j] = (t1[j] + work.f1[j]) - (t0[j] + work.f0[j]);
    }
}

fn step_with(
    state: &MarginalState,
    scores: &UnaryScores,
    pot: &LowRankPotentials,
    step_size: f64,
    diag: Option<&SelfCouplings>,
    work: &mut Workspace,
) -> MarginalState {
    let q0 = state.q0.as_slice().expect("contiguous");
    let q1 = state.q1.as_slice().expect("contiguous");
    logit_difference(q0, q1, scores, pot, diag, work);
    let mut next = state.clone();
    for (j, &d) in work.diff.iter().enumerate() {
        next.q1[j] = q1[j] + step_size * (sigmoid(d) - q1[j]);
        next.q0[j] = q0[j] + step_size * (sigmoid(-d) - q0[j]);
    }
    next
}

/// One damped update with the self-term included.
pub fn mfvi_step(state: &MarginalState, scores: &UnaryScores, pot: &LowRankPotentials, step_size: f64) -> MarginalState {
    let mut work = Workspace::new(state.len(), pot.rank());
    step_with(state, scores, pot, step_size, None, &mut work)
}

fn check_shapes(scores: &UnaryScores, pot: &LowRankPotentials) -> Result<()> {
    if scores.len() != pot.num_types() {
        return Err(Error::Dimension(format!(
            "{} unary scores for {} potential rows",
            scores.len(),
            pot.num_types()
        )));
    }
    Ok(())
}

/// `T + 1` states: the initialization followed by every iterate.
pub fn run(scores: &UnaryScores, pot: &LowRankPotentials, config: &MfviConfig) -> Result<Vec<MarginalState>> {
    config.validate()?;
    check_shapes(scores, pot)?;
    let diag = (config.self_term == SelfTerm::Excluded).then(|| pot.self_couplings());
    let mut work = Workspace::new(scores.len(), pot.rank());
    let mut trajectory = Vec::with_capacity(config.iterations + 1);
    trajectory.push(init_marginals(scores));
    for _ in 0..config.iterations {
        let next = step_with(
            trajectory.last().expect("non-empty"),
            scores,
            pot,
            config.step_size,
            diag.as_ref(),
            &mut work,
        );
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Iterates until the largest change in `q1` drops below `tol` or
/// `max_iterations` is reached. Returns the final state and the number of
/// iterations taken.
pub fn run_to_convergence(
    scores: &UnaryScores,
    pot: &LowRankPotentials,
    config: &MfviConfig,
    tol: f64,
    max_iterations: usize,
) -> Result<(MarginalState, usize)> {
    config.validate()?;
    check_shapes(scores, pot)?;
    let diag = (config.self_term == SelfTerm::Excluded).then(|| pot.self_couplings());
    let mut work = Workspace::new(scores.len(), pot.rank());
    let mut state = init_marginals(scores);
    for it in 1..=max_iterations {
        let next = step_with(&state, scores, pot, config.step_size, diag.as_ref(), &mut work);
        let delta = next
            .q1
            .iter()
            .zip(&state.q1)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        state = next;
        if delta < tol {
            return Ok((state, it));
        }
    }
    Ok((state, max_iterations))
}

/// Types whose `q1` strictly exceeds `threshold`. With `force_nonempty`, an
/// empty result is replaced by the single most probable type (lowest id on ties).
pub fn decode(state: &MarginalState, threshold: f64, force_nonempty: bool) -> BTreeSet<usize> {
    let chosen: BTreeSet<usize> = state
        .q1
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(j, _)| j)
        .collect();
    if chosen.is_empty() && force_nonempty && !state.is_empty() {
        let mut best = 0;
        for (j, &p) in state.q1.iter().enumerate() {
            if p > state.q1[best] {
                best = j;
            }
        }
        return BTreeSet::from([best]);
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(n: usize, r: usize, scale: f64, seed: u64) -> (UnaryScores, LowRankPotentials) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = crate::embeddings::gaussian_matrix(&mut rng, 1, n, 1.0).row(0).to_owned();
        let e0 = crate::embeddings::gaussian_matrix(&mut rng, n, r, scale);
        let e1 = crate::embeddings::gaussian_matrix(&mut rng, n, r, scale);
        (UnaryScores::new(theta), LowRankPotentials::new(e0, e1).unwrap())
    }

    #[test]
    fn init_is_a_two_way_softmax() {
        let s = UnaryScores::new(array![0.0, 3f64.ln()]);
        let q = init_marginals(&s);
        assert_eq!(q.q1[0], 0.5);
        assert!((q.q1[1] - 0.75).abs() < 1e-15);
        let big = init_marginals(&UnaryScores::new(array![1e3]));
        assert!((big.q1[0] - 1.0).abs() < 1e-9);
        assert!(big.q0[0].is_finite());
    }

    #[test]
    fn zero_step_is_identity() {
        let (s, p) = random_model(5, 2, 1.0, 3);
        let q = init_marginals(&s);
        assert_eq!(mfvi_step(&q, &s, &p, 0.0), q);
    }

    #[test]
    fn zero_potentials_full_step_returns_init() {
        let (s, _) = random_model(5, 2, 1.0, 4);
        let p = LowRankPotentials::zeros(5, 2);
        let q = MarginalState {
            q0: Array1::from_elem(5, 0.3),
            q1: Array1::from_elem(5, 0.7),
        };
        assert_eq!(mfvi_step(&q, &s, &p, 1.0), init_marginals(&s));
    }

    /// Dense mean-field oracle: explicit N x N matrices, sum over every k.
    fn dense_step(q: &MarginalState, s: &UnaryScores, p: &LowRankPotentials, lambda: f64) -> MarginalState {
        let n = q.len();
        let r = p.rank();
        let g = |a: &Array2<f64>, b: &Array2<f64>, j: usize, k: usize| (0..r).map(|c| a[[j, c]] * b[[k, c]]).sum::<f64>();
        let mut out = q.clone();
        for j in 0..n {
            let mut l1 = s.theta1[j];
            let mut l0 = s.theta0[j];
            for k in 0..n {
                l1 += g(&p.e1, &p.e1, j, k) * q.q1[k] - g(&p.e1, &p.e0, j, k) * q.q0[k];
                l0 += g(&p.e0, &p.e0, j, k) * q.q0[k] - g(&p.e0, &p.e1, j, k) * q.q1[k];
            }
            let m = l1.max(l0);
            let z = (l1 - m).exp() + (l0 - m).exp();
            out.q1[j] = q.q1[j] + lambda * ((l1 - m).exp() / z - q.q1[j]);
            out.q0[j] = q.q0[j] + lambda * ((l0 - m).exp() / z - q.q0[j]);
        }
        out
    }

    #[test]
    fn step_matches_dense_oracle() {
        let (s, p) = random_model(4, 2, 0.8, 12);
        let mut q = init_marginals(&s);
        for _ in 0..3 {
            let fast = mfvi_step(&q, &s, &p, 0.7);
            let dense = dense_step(&q, &s, &p, 0.7);
            for j in 0..4 {
                assert!((fast.q1[j] - dense.q1[j]).abs() < 1e-8);
                assert!((fast.q0[j] - dense.q0[j]).abs() < 1e-8);
            }
            q = fast;
        }
    }

    #[test]
    fn run_shapes_and_fixpoints() {
        let (s, p) = random_model(6, 3, 0.5, 1);
        let cfg = MfviConfig {
            iterations: 0,
            ..Default::default()
        };
        let traj = run(&s, &p, &cfg).unwrap();
        assert_eq!(traj, vec![init_marginals(&s)]);

        let cfg = MfviConfig {
            iterations: 5,
            ..Default::default()
        };
        let zero = LowRankPotentials::zeros(6, 3);
        let traj = run(&s, &zero, &cfg).unwrap();
        assert_eq!(traj.len(), 6);
        assert!(traj.iter().all(|q| *q == traj[0]));

        let bad = UnaryScores::new(Array1::zeros(5));
        assert!(run(&bad, &p, &cfg).is_err());
        let cfg = MfviConfig {
            step_size: 1.5,
            ..Default::default()
        };
        assert!(run(&s, &p, &cfg).is_err());
    }

    #[test]
    fn converged_state_is_stationary() {
        for self_term in [SelfTerm::Included, SelfTerm::Excluded] {
            let (s, p) = random_model(7, 3, 0.3, 21);
            let cfg = MfviConfig {
                step_size: 1.0,
                self_term,
                ..Default::default()
            };
            let (q, it) = run_to_convergence(&s, &p, &cfg, 1e-10, 10_000).unwrap();
            assert!(it < 10_000);
            let mut work = Workspace::new(7, 3);
            let diag = (self_term == SelfTerm::Excluded).then(|| p.self_couplings());
            logit_difference(
                q.q0.as_slice().unwrap(),
                q.q1.as_slice().unwrap(),
                &s,
                &p,
                diag.as_ref(),
                &mut work,
            );
            for j in 0..7 {
                assert!((q.q1[j] - sigmoid(work.diff[j])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn decode_threshold_and_forcing() {
        let q = |v: Vec<f64>| MarginalState {
            q0: Array1::from(v.iter().map(|x| 1.0 - x).collect::<Vec<_>>()),
            q1: Array1::from(v),
        };
        assert_eq!(decode(&q(vec![0.6, 0.4, 0.5]), 0.5, false), BTreeSet::from([0]));
        assert_eq!(decode(&q(vec![0.5, 0.5, 0.5]), 0.5, true), BTreeSet::from([0]));
        assert!(decode(&q(vec![0.5, 0.5, 0.5]), 0.5, false).is_empty());
        assert_eq!(decode(&q(vec![0.1, 0.3, 0.3]), 0.5, true), BTreeSet::from([1]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trajectories_stay_normalized(seed in any::<u64>(), lambda in 0.0f64..=1.0, scale in 0.0f64..2.0, excluded in any::<bool>()) {
                let (s, p) = random_model(9, 3, scale, seed);
                let cfg = MfviConfig {
                    iterations: 8,
                    step_size: lambda,
                    self_term: if excluded { SelfTerm::Excluded } else { SelfTerm::Included },
                    ..Default::default()
                };
                for q in run(&s, &p, &cfg).unwrap() {
                    for j in 0..9 {
                        prop_assert!((q.q0[j] + q.q1[j] - 1.0).abs() <= 1e-9);
                        prop_assert!((0.0..=1.0).contains(&q.q1[j]));
                    }
                }
            }
        }
    }
}
