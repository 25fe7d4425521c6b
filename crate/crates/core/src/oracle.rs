//! Exact inference by enumerating all 2^N joint assignments.
//!
//! Only usable for small N, where it serves as ground truth for the
//! mean-field marginals. Assignments are visited in Gray-code order so each
//! score is obtained from its predecessor with an O(N) update.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::potentials::LowRankPotentials;
use crate::unary::UnaryScores;

pub const MAX_EXACT_TYPES: usize = 20;

/// A fully materialized pairwise CRF over binary variables.
///
/// The score of an assignment is `sum_j theta(y_j) + sum_{j<k} theta_p(y_j, y_k)`
/// where `theta_p(a, b)` reads entry `[j, k]` of the matrix for `(a, b)`.
/// With `include_self_term`, `1/2 * theta_p(y_j, y_j)` from the diagonal is
/// added per variable, which is the joint model that the self-inclusive
/// mean-field update approximates.
#[derive(Debug, Clone)]
pub struct DensePcrf {
    pub theta1: Vec<f64>,
    pub theta0: Vec<f64>,
    pub theta00: Array2<f64>,
    pub theta11: Array2<f64>,
    pub theta01: Array2<f64>,
    pub theta10: Array2<f64>,
    pub include_self_term: bool,
}

/// Exact marginals and log-partition function.
#[derive(Debug, Clone)]
pub struct ExactMarginals {
    pub q1: Vec<f64>,
    pub log_z: f64,
}

impl DensePcrf {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        theta1: Vec<f64>,
        theta0: Vec<f64>,
        theta00: Array2<f64>,
        theta11: Array2<f64>,
        theta01: Array2<f64>,
        theta10: Array2<f64>,
        include_self_term: bool,
    ) -> Result<Self> {
        let n = theta1.len();
        if theta0.len() != n {
            return Err(Error::Dimension("theta0 and theta1 lengths differ".into()));
        }
        for m in [&theta00, &theta11, &theta01, &theta10] {
            if m.dim() != (n, n) {
                return Err(Error::Dimension(format!("pairwise matrix {:?}, expected ({n}, {n})", m.dim())));
            }
        }
        let tol = 1e-9;
        for j in 0..n {
            for k in 0..n {
                let scale = 1.0 + theta01[[j, k]].abs();
                if (theta00[[j, k]] - theta00[[k, j]]).abs() > tol * (1.0 + theta00[[j, k]].abs())
                    || (theta11[[j, k]] - theta11[[k, j]]).abs() > tol * (1.0 + theta11[[j, k]].abs())
                    || (theta01[[j, k]] - theta10[[k, j]]).abs() > tol * scale
                {
                    return Err(Error::Dimension(format!(
                        "pairwise matrices violate symmetry at ({j}, {k})"
                    )));
                }
            }
        }
        Ok(DensePcrf {
            theta1,
            theta0,
            theta00,
            theta11,
            theta01,
            theta10,
            include_self_term,
        })
    }

    /// Materializes the model implied by low-rank factors.
    pub fn from_factors(scores: &UnaryScores, pot: &LowRankPotentials, include_self_term: bool) -> Result<Self> {
        let n = pot.num_types();
        let r = pot.rank();
        let gram = |a: &Array2<f64>, b: &Array2<f64>, sign: f64| {
            Array2::from_shape_fn((n, n), |(j, k)| sign * (0..r).map(|c| a[[j, c]] * b[[k, c]]).sum::<f64>())
        };
        Self::new(
            scores.theta1.to_vec(),
            scores.theta0.to_vec(),
            gram(&pot.e0, &pot.e0, 1.0),
            gram(&pot.e1, &pot.e1, 1.0),
            gram(&pot.e0, &pot.e1, -1.0),
            gram(&pot.e1, &pot.e0, -1.0),
            include_self_term,
        )
    }

    pub fn num_vars(&self) -> usize {
        self.theta1.len()
    }

    fn matrix(&self, a: bool, b: bool) -> &Array2<f64> {
        match (a, b) {
            (false, false) => &self.theta00,
            (true, true) => &self.theta11,
            (false, true) => &self.theta01,
            (true, false) => &self.theta10,
        }
    }

    fn unary(&self, j: usize, y: bool) -> f64 {
        if y {
            self.theta1[j]
        } else {
            self.theta0[j]
        }
    }

    /// Pair potential with the lower index first.
    fn pair(&self, j: usize, yj: bool, k: usize, yk: bool) -> f64 {
        if j < k {
            self.matrix(yj, yk)[[j, k]]
        } else {
            self.matrix(yk, yj)[[k, j]]
        }
    }

    fn self_term(&self, j: usize, y: bool) -> f64 {
        if self.include_self_term {
            0.5 * self.matrix(y, y)[[j, j]]
        } else {
            0.0
        }
    }

    /// Unnormalized log-probability of `y`.
    pub fn score_assignment(&self, y: &[bool]) -> f64 {
        let n = self.num_vars();
        assert_eq!(y.len(), n, "assignment length");
        let mut s = 0.0;
        for j in 0..n {
            s += self.unary(j, y[j]) + self.self_term(j, y[j]);
            for k in j + 1..n {
                s += self.matrix(y[j], y[k])[[j, k]];
            }
        }
        s
    }

    fn guard(&self) -> Result<()> {
        let n = self.num_vars();
        if n > MAX_EXACT_TYPES {
            return Err(Error::TooLarge { n, max: MAX_EXACT_TYPES });
        }
        Ok(())
    }

    /// Score of every assignment, indexed by the bitmask with bit j = y_j.
    pub fn enumerate_scores(&self) -> Result<Vec<f64>> {
        self.guard()?;
        let n = self.num_vars();
        let total = 1usize << n;
        let mut scores = vec![0.0; total];
        let mut y = vec![false; n];
        let mut mask = 0usize;
        let mut current = self.score_assignment(&y);
        scores[0] = current;
        for step in 1..total {
            let j = step.trailing_zeros() as usize;
            let (old, new) = (y[j], !y[j]);
            let mut delta = self.unary(j, new) - self.unary(j, old) + self.self_term(j, new) - self.self_term(j, old);
            for (k, &yk) in y.iter().enumerate() {
                if k != j {
                    delta += self.pair(j, new, k, yk) - self.pair(j, old, k, yk);
                }
            }
            y[j] = new;
            mask ^= 1 << j;
            current += delta;
            scores[mask] = current;
        }
        Ok(scores)
    }

    pub fn exact_marginals(&self) -> Result<ExactMarginals> {
        let scores = self.enumerate_scores()?;
        let log_z = log_sum_exp(&scores);
        let n = self.num_vars();
        let mut q1 = vec![0.0; n];
        for (mask, &s) in scores.iter().enumerate() {
            let p = (s - log_z).exp();
            for (j, q) in q1.iter_mut().enumerate() {
                if mask >> j & 1 == 1 {
                    *q += p;
                }
            }
        }
        Ok(ExactMarginals { q1, log_z })
    }

    /// Highest-scoring assignment; ties go to the lexicographically smallest
    /// vector `(y_0, y_1, ...)`.
    pub fn exact_map(&self) -> Result<Vec<bool>> {
        let scores = self.enumerate_scores()?;
        let n = self.num_vars();
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Incremental scores carry rounding; rescore near-ties directly.
        let slack = 1e-9 * (1.0 + best.abs());
        let decode = |mask: usize| (0..n).map(|j| mask >> j & 1 == 1).collect::<Vec<_>>();
        let lex_key = |mask: usize| (0..n).fold(0usize, |acc, j| acc << 1 | (mask >> j & 1));
        let mut winner: Option<(f64, usize, usize)> = None;
        for (mask, &s) in scores.iter().enumerate() {
            if s < best - slack {
                continue;
            }
            let exact = self.score_assignment(&decode(mask));
            let key = lex_key(mask);
            winner = match winner {
                Some((ws, wk, _)) if ws > exact || (ws == exact && wk < key) => winner,
                _ => Some((exact, key, mask)),
            };
        }
        Ok(decode(winner.expect("at least one assignment").2))
    }

    /// Marginals when every pairwise matrix is zero: `sigmoid(theta1 - theta0)`.
    pub fn independent_marginals(&self) -> Vec<f64> {
        self.theta1
            .iter()
            .zip(&self.theta0)
            .map(|(a, b)| sigmoid(a - b))
            .collect()
    }
}
