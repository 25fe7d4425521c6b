//! Low-rank pairwise log-potentials.
//!
//! Two feed-forward maps send the type embeddings `E` (N x D) to factor
//! matrices `E0`, `E1` (N x R). The four N x N log-potential matrices are
//! only ever implied:
//!
//! ```text
//! T00 = E0 E0^T    T11 = E1 E1^T    T01 = -E0 E1^T    T10 = -E1 E0^T
//! ```
//!
//! so `T00`, `T11` are symmetric and `T01 = T10^T` for every parameter
//! value. Inference touches them only through products with marginal
//! vectors, which cost O(NR).

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{axpy, dot};
use crate::rng;

pub const DEFAULT_RANK: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Shape of the embedding transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// `W2 tanh(dropout(W1 e))`.
    Hidden,
    /// A single linear map, no hidden layer and no tanh.
    Linear,
    /// `E` used directly as both factors (R = D). Known not to train well.
    Identity,
}

impl std::str::FromStr for FfnKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" => Ok(FfnKind::Hidden),
            "linear" => Ok(FfnKind::Linear),
            "identity" | "none" => Ok(FfnKind::Identity),
            _ => Err(Error::Config(format!("unknown ffn kind `{s}` (hidden|linear|identity)"))),
        }
    }
}

impl std::fmt::Display for FfnKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FfnKind::Hidden => "hidden",
            FfnKind::Linear => "linear",
            FfnKind::Identity => "identity",
        })
    }
}

/// Parameters of one embedding transform. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    /// `w1`: H x D, `w2`: R x H.
    Hidden { w1: Array2<f64>, w2: Array2<f64> },
    /// `w`: R x D.
    Linear { w: Array2<f64> },
    Identity,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl Ffn {
    /// Glorot-uniform initialization.
    pub fn init<R: Rng>(kind: FfnKind, dim: usize, hidden: usize, rank: usize, rng: &mut R) -> Result<Self> {
        match kind {
            FfnKind::Hidden => {
                if hidden == 0 || rank == 0 {
                    return Err(Error::Config("hidden width and rank must be positive".into()));
                }
                Ok(Ffn::Hidden {
                    w1: xavier(rng, hidden, dim),
                    w2: xavier(rng, rank, hidden),
                })
            }
            FfnKind::Linear => {
                if rank == 0 {
                    return Err(Error::Config("rank must be positive".into()));
                }
                Ok(Ffn::Linear { w: xavier(rng, rank, dim) })
            }
            FfnKind::Identity => Ok(Ffn::Identity),
        }
    }

    pub fn kind(&self) -> FfnKind {
        match self {
            Ffn::Hidden { .. } => FfnKind::Hidden,
            Ffn::Linear { .. } => FfnKind::Linear,
            Ffn::Identity => FfnKind::Identity,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Ffn::Hidden { w1, w2 } => Ffn::Hidden {
                w1: Array2::zeros(w1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
            },
            Ffn::Linear { w } => Ffn::Linear { w: Array2::zeros(w.raw_dim()) },
            Ffn::Identity => Ffn::Identity,
        }
    }

    /// Named weight tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        match self {
            Ffn::Hidden { w1, w2 } => vec![("w1", w1), ("w2", w2)],
            Ffn::Linear { w } => vec![("w", w)],
            Ffn::Identity => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        match self {
            Ffn::Hidden { w1, w2 } => vec![("w1", w1), ("w2", w2)],
            Ffn::Linear { w } => vec![("w", w)],
            Ffn::Identity => vec![],
        }
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        let expected = match self {
            Ffn::Hidden { w1, w2 } => {
                if w2.ncols() != w1.nrows() {
                    return Err(Error::Dimension(format!(
                        "W2 has {} columns but W1 has {} rows",
                        w2.ncols(),
                        w1.nrows()
                    )));
                }
                w1.ncols()
            }
            Ffn::Linear { w } => w.ncols(),
            Ffn::Identity => dim,
        };
        if expected != dim {
            return Err(Error::Dimension(format!(
                "embedding rows have {dim} entries, transform expects {expected}"
            )));
        }
        Ok(())
    }

    /// Applies the transform row-wise. `mask` (N x H, already scaled by
    /// 1/(1-p)) multiplies the hidden pre-activation when present.
    pub fn forward(&self, emb: &Array2<f64>, mask: Option<Array2<f64>>) -> Result<(Array2<f64>, FfnTape)> {
        self.check_input(emb.ncols())?;
        Ok(match self {
            Ffn::Hidden { w1, w2 } => {
                let mut pre = emb.dot(&w1.t());
                if let Some(m) = &mask {
                    pre *= m;
                }
                let act = pre.mapv(f64::tanh);
                let out = act.dot(&w2.t());
                (out, FfnTape { mask, act: Some(act) })
            }
            Ffn::Linear { w } => (emb.dot(&w.t()), FfnTape { mask: None, act: None }),
            Ffn::Identity => (emb.clone(), FfnTape { mask: None, act: None }),
        })
    }

    /// Reverse pass: returns (parameter gradient, gradient w.r.t. `emb`).
    pub fn backward(&self, emb: &Array2<f64>, tape: &FfnTape, grad_out: &Array2<f64>) -> (Ffn, Array2<f64>) {
        match self {
            Ffn::Hidden { w1, w2 } => {
                let act = tape.act.as_ref().expect("hidden tape keeps activations");
                let g_w2 = grad_out.t().dot(act);
                let mut g_pre = grad_out.dot(w2);
                g_pre.zip_mut_with(act, |g, &a| *g *= 1.0 - a * a);
                if let Some(m) = &tape.mask {
                    g_pre *= m;
                }
                let g_w1 = g_pre.t().dot(emb);
                let g_emb = g_pre.dot(w1);
                (Ffn::Hidden { w1: g_w1, w2: g_w2 }, g_emb)
            }
            Ffn::Linear { w } => (Ffn::Linear { w: grad_out.t().dot(emb) }, grad_out.dot(w)),
            Ffn::Identity => (Ffn::Identity, grad_out.clone()),
        }
    }

    fn hidden_width(&self) -> Option<usize> {
        match self {
            Ffn::Hidden { w1, .. } => Some(w1.nrows()),
            _ => None,
        }
    }
}

/// Values saved by [`Ffn::forward`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct FfnTape {
    mask: Option<Array2<f64>>,
    act: Option<Array2<f64>>,
}

/// Dropout setting for factor computation. Inference always uses `Off`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dropout {
    Off,
    Train { rate: f64, seed: u64 },
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64, stream: &str) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = Bernoulli::new(1.0 - rate).expect("probability in range");
    let scale = 1.0 / (1.0 - rate);
    let mut rng = rng::substream(seed, stream);
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        if keep.sample(&mut rng) {
            scale
        } else {
            0.0
        }
    }))
}

/// Factor matrices `E0`, `E1`, each N x R.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPotentials {
    pub e0: Array2<f64>,
    pub e1: Array2<f64>,
}

/// Tapes of both transforms.
#[derive(Debug, Clone)]
pub struct FactorTape {
    pub tape0: FfnTape,
    pub tape1: FfnTape,
}

/// `E0 = FFN0(E)`, `E1 = FFN1(E)`. Dropout masks are drawn from `seed`
/// (independently per transform) only in training mode.
pub fn compute_factors(emb: &Array2<f64>, ffn0: &Ffn, ffn1: &Ffn, dropout: Dropout) -> Result<LowRankPotentials> {
    compute_factors_with_tape(emb, ffn0, ffn1, dropout).map(|(p, _)| p)
}

pub fn compute_factors_with_tape(
    emb: &Array2<f64>,
    ffn0: &Ffn,
    ffn1: &Ffn,
    dropout: Dropout,
) -> Result<(LowRankPotentials, FactorTape)> {
    let mask = |ffn: &Ffn, stream: &str| -> Result<Option<Array2<f64>>> {
        match (dropout, ffn.hidden_width()) {
            (Dropout::Train { rate, seed }, Some(h)) if rate > 0.0 => {
                dropout_mask(emb.nrows(), h, rate, seed, stream).map(Some)
            }
            _ => Ok(None),
        }
    };
    let m0 = mask(ffn0, "dropout-ffn0")?;
    let m1 = mask(ffn1, "dropout-ffn1")?;
    let (e0, tape0) = ffn0.forward(emb, m0)?;
    let (e1, tape1) = ffn1.forward(emb, m1)?;
    if e0.dim() != e1.dim() {
        return Err(Error::Dimension(format!(
            "factor shapes differ: {:?} vs {:?}",
            e0.dim(),
            e1.dim()
        )));
    }
    Ok((LowRankPotentials::new(e0, e1)?, FactorTape { tape0, tape1 }))
}

/// Gradients of the factors pushed back through both transforms.
/// Returns (grad ffn0, grad ffn1, grad E).
pub fn backward_factors(
    emb: &Array2<f64>,
    ffn0: &Ffn,
    ffn1: &Ffn,
    tape: &FactorTape,
    grad_e0: &Array2<f64>,
    grad_e1: &Array2<f64>,
) -> (Ffn, Ffn, Array2<f64>) {
    let (g0, mut g_emb) = ffn0.backward(emb, &tape.tape0, grad_e0);
    let (g1, g_emb1) = ffn1.backward(emb, &tape.tape1, grad_e1);
    g_emb += &g_emb1;
    (g0, g1, g_emb)
}

/// Restricted potential matrices for a list of type ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Submatrices {
    pub ids: Vec<usize>,
    pub theta00: Array2<f64>,
    pub theta11: Array2<f64>,
    pub theta01: Array2<f64>,
    pub theta10: Array2<f64>,
}

impl Submatrices {
    /// Largest |A - A^T| over the two symmetric matrices.
    pub fn symmetry_error(&self) -> f64 {
        let asym = |m: &Array2<f64>| {
            let mut worst = 0.0f64;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
                }
            }
            worst
        };
        asym(&self.theta00).max(asym(&self.theta11))
    }

    /// Largest |T01 - T10^T|.
    pub fn transpose_error(&self) -> f64 {
        let t = self.theta10.t();
        self.theta01
            .iter()
            .zip(t.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Diagonal entries of the implied matrices, `|E0_j|^2`, `|E1_j|^2` and `E0_j . E1_j`.
#[derive(Debug, Clone)]
pub struct SelfCouplings {
    pub n0: Array1<f64>,
    pub n1: Array1<f64>,
    pub cross: Array1<f64>,
}

impl LowRankPotentials {
    pub fn new(e0: Array2<f64>, e1: Array2<f64>) -> Result<Self> {
        if e0.dim() != e1.dim() {
            return Err(Error::Dimension(format!(
                "factor shapes differ: {:?} vs {:?}",
                e0.dim(),
                e1.dim()
            )));
        }
        Ok(LowRankPotentials {
            e0: standard_layout(e0),
            e1: standard_layout(e1),
        })
    }

    pub fn zeros(n: usize, rank: usize) -> Self {
        LowRankPotentials {
            e0: Array2::zeros((n, rank)),
            e1: Array2::zeros((n, rank)),
        }
    }

    pub fn num_types(&self) -> usize {
        self.e0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.e0.ncols()
    }

    /// Mean-field contributions of the pairwise terms:
    ///
    /// `f1 = E1 (E1^T q1) - E1 (E0^T q0)`, `f0 = E0 (E0^T q0) - E0 (E1^T q1)`.
    ///
    /// Every k, including k = j, contributes.
    pub fn pairwise_field(&self, q0: ArrayView1<f64>, q1: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let n = self.num_types();
        let mut f0 = Array1::zeros(n);
        let mut f1 = Array1::zeros(n);
        let mut scratch = FieldScratch::new(self.rank());
        self.pairwise_field_into(
            q0.as_slice().expect("contiguous"),
            q1.as_slice().expect("contiguous"),
            &mut scratch,
            f0.as_slice_mut().unwrap(),
            f1.as_slice_mut().unwrap(),
        );
        (f0, f1)
    }

    /// Allocation-free form of [`pairwise_field`](Self::pairwise_field).
    /// Leaves `u = E1^T q1 - E0^T q0` in `scratch`.
    pub fn pairwise_field_into(&self, q0: &[f64], q1: &[f64], scratch: &mut FieldScratch, f0: &mut [f64], f1: &mut [f64]) {
        project_difference(&self.e0, &self.e1, q0, q1, scratch);
        let u = &scratch.u;
        for (j, (e0j, e1j)) in rows(&self.e0).zip(rows(&self.e1)).enumerate() {
            let s1 = dot(e1j, u);
            let s0 = dot(e0j, u);
            f1[j] = s1;
            f0[j] = -s0;
        }
    }

    pub fn self_couplings(&self) -> SelfCouplings {
        let n = self.num_types();
        let mut sc = SelfCouplings {
            n0: Array1::zeros(n),
            n1: Array1::zeros(n),
            cross: Array1::zeros(n),
        };
        for (j, (e0j, e1j)) in rows(&self.e0).zip(rows(&self.e1)).enumerate() {
            sc.n0[j] = dot(e0j, e0j);
            sc.n1[j] = dot(e1j, e1j);
            sc.cross[j] = dot(e0j, e1j);
        }
        sc
    }

    /// The four potential matrices restricted to `ids` (rows and columns in
    /// the given order).
    pub fn recover_submatrices(&self, ids: &[usize]) -> Result<Submatrices> {
        let n = self.num_types();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), ids);
        let a0 = pick(&self.e0);
        let a1 = pick(&self.e1);
        let gram = |x: &Array2<f64>, y: &Array2<f64>, sign: f64| {
            let xr: Vec<&[f64]> = rows(x).collect();
            let yr: Vec<&[f64]> = rows(y).collect();
            Array2::from_shape_fn((ids.len(), ids.len()), |(i, j)| sign * dot(xr[i], yr[j]))
        };
        Ok(Submatrices {
            ids: ids.to_vec(),
            theta00: gram(&a0, &a0, 1.0),
            theta11: gram(&a1, &a1, 1.0),
            theta01: gram(&a0, &a1, -1.0),
            theta10: gram(&a1, &a0, -1.0),
        })
    }
}

/// R-dimensional work buffers for field evaluation.
#[derive(Debug, Clone)]
pub struct FieldScratch {
    pub(crate) a0: Vec<f64>,
    pub(crate) a1: Vec<f64>,
    pub(crate) u: Vec<f64>,
}

impl FieldScratch {
    pub fn new(rank: usize) -> Self {
        FieldScratch {
            a0: vec![0.0; rank],
            a1: vec![0.0; rank],
            u: vec![0.0; rank],
        }
    }
}

/// `a0 = E0^T q0`, `a1 = E1^T q1`, `u = a1 - a0`.
fn project_difference(e0: &Array2<f64>, e1: &Array2<f64>, q0: &[f64], q1: &[f64], s: &mut FieldScratch) {
    s.a0.iter_mut().for_each(|x| *x = 0.0);
    s.a1.iter_mut().for_each(|x| *x = 0.0);
    for ((e0j, e1j), (&p0, &p1)) in rows(e0).zip(rows(e1)).zip(q0.iter().zip(q1)) {
        axpy(&mut s.a0, p0, e0j);
        axpy(&mut s.a1, p1, e1j);
    }
    for ((u, a1), a0) in s.u.iter_mut().zip(&s.a1).zip(&s.a0) {
        *u = a1 - a0;
    }
}

fn standard_layout(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

/// Row slices of a row-major matrix.
pub(crate) fn rows(m: &Array2<f64>) -> impl Iterator<Item = &[f64]> {
    m.as_slice()
        .expect("standard layout")
        .chunks_exact(m.ncols().max(1))
        .take(m.nrows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ShapeBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_factors(n: usize, r: usize, seed: u64) -> LowRankPotentials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e0 = crate::embeddings::gaussian_matrix(&mut rng, n, r, 1.0);
        let e1 = crate::embeddings::gaussian_matrix(&mut rng, n, r, 1.0);
        LowRankPotentials::new(e0, e1).unwrap()
    }

    #[test]
    fn column_major_factors_are_accepted() {
        let dense = random_factors(5, 3, 11);
        let column_major = |m: &Array2<f64>| {
            let mut out = Array2::zeros(m.raw_dim().f());
            out.assign(m);
            out
        };
        let e0 = column_major(&dense.e0);
        let e1 = column_major(&dense.e1);
        assert!(!e0.is_standard_layout());
        let pot = LowRankPotentials::new(e0, e1).unwrap();
        let q1 = Array1::from_elem(5, 0.3);
        let q0 = q1.mapv(|x| 1.0 - x);
        assert_eq!(pot.pairwise_field(q0.view(), q1.view()), dense.pairwise_field(q0.view(), q1.view()));
    }

    #[test]
    fn zero_first_layer_gives_zero_factors() {
        let emb = array![[0.3, -1.0], [2.0, 0.5]];
        let ffn = Ffn::Hidden {
            w1: Array2::zeros((3, 2)),
            w2: Array2::ones((2, 3)),
        };
        let p = compute_factors(&emb, &ffn, &ffn, Dropout::Off).unwrap();
        assert!(p.e0.iter().chain(p.e1.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_transform() {
        let emb = array![[0.5]];
        let ffn = Ffn::Hidden {
            w1: array![[1.0]],
            w2: array![[1.0]],
        };
        let p = compute_factors(&emb, &ffn, &ffn, Dropout::Off).unwrap();
        assert!((p.e0[[0, 0]] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((p.e0[[0, 0]] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn inference_factors_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = crate::embeddings::gaussian_matrix(&mut rng, 7, 4, 1.0);
        let f0 = Ffn::init(FfnKind::Hidden, 4, 5, 3, &mut rng).unwrap();
        let f1 = Ffn::init(FfnKind::Hidden, 4, 5, 3, &mut rng).unwrap();
        let a = compute_factors(&emb, &f0, &f1, Dropout::Off).unwrap();
        let b = compute_factors(&emb, &f0, &f1, Dropout::Off).unwrap();
        assert_eq!(a, b);
        let c = compute_factors(&emb, &f0, &f1, Dropout::Train { rate: 0.5, seed: 1 }).unwrap();
        let d = compute_factors(&emb, &f0, &f1, Dropout::Train { rate: 0.5, seed: 1 }).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let emb = Array2::zeros((3, 4));
        let ffn = Ffn::Linear { w: Array2::zeros((2, 5)) };
        assert!(matches!(
            compute_factors(&emb, &ffn, &ffn, Dropout::Off),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn field_vanishes_for_zero_factors() {
        let p = LowRankPotentials::zeros(3, 2);
        let q = Array1::from(vec![0.2, 0.5, 0.9]);
        let (f0, f1) = p.pairwise_field(q.mapv(|x| 1.0 - x).view(), q.view());
        assert!(f0.iter().chain(f1.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn rank_one_hand_example() {
        let p = LowRankPotentials::new(Array2::zeros((2, 1)), array![[1.0], [1.0]]).unwrap();
        let q1 = array![1.0, 0.0];
        let q0 = array![0.0, 1.0];
        let (_, f1) = p.pairwise_field(q0.view(), q1.view());
        assert_eq!(f1.to_vec(), vec![1.0, 1.0]);
    }

    /// Dense oracle: builds all four N x N matrices explicitly and sums over k.
    fn dense_field(p: &LowRankPotentials, q0: &[f64], q1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = p.num_types();
        let r = p.rank();
        let th = |a: &Array2<f64>, b: &Array2<f64>, s: f64| {
            let mut m = vec![vec![0.0; n]; n];
            for j in 0..n {
                for k in 0..n {
                    let mut acc = 0.0;
                    for c in 0..r {
                        acc += a[[j, c]] * b[[k, c]];
                    }
                    m[j][k] = s * acc;
                }
            }
            m
        };
        let t00 = th(&p.e0, &p.e0, 1.0);
        let t11 = th(&p.e1, &p.e1, 1.0);
        let t01 = th(&p.e0, &p.e1, -1.0);
        let t10 = th(&p.e1, &p.e0, -1.0);
        let mut f0 = vec![0.0; n];
        let mut f1 = vec![0.0; n];
        for j in 0..n {
            for k in 0..n {
                f1[j] += t11[j][k] * q1[k] + t10[j][k] * q0[k];
                f0[j] += t00[j][k] * q0[k] + t01[j][k] * q1[k];
            }
        }
        (f0, f1)
    }

    #[test]
    fn factorized_field_matches_dense_oracle() {
        let p = random_factors(6, 2, 17);
        let q1: Vec<f64> = (0..6).map(|j| 0.1 + 0.13 * j as f64).collect();
        let q0: Vec<f64> = q1.iter().map(|x| 1.0 - x).collect();
        let (f0, f1) = p.pairwise_field(Array1::from(q0.clone()).view(), Array1::from(q1.clone()).view());
        let (d0, d1) = dense_field(&p, &q0, &q1);
        for j in 0..6 {
            assert!((f1[j] - d1[j]).abs() <= 1e-10 * d1[j].abs().max(1.0));
            assert!((f0[j] - d0[j]).abs() <= 1e-10 * d0[j].abs().max(1.0));
        }
    }

    #[test]
    fn submatrices_have_the_table_properties() {
        let p = random_factors(10, 3, 2);
        let s = p.recover_submatrices(&[4, 1, 7]).unwrap();
        assert!(s.symmetry_error() <= 1e-12);
        assert_eq!(s.transpose_error(), 0.0);
        // independent dense products
        for (a, &i) in s.ids.iter().enumerate() {
            for (b, &k) in s.ids.iter().enumerate() {
                let d = |x: &Array2<f64>, y: &Array2<f64>| (0..3).map(|c| x[[i, c]] * y[[k, c]]).sum::<f64>();
                assert!((s.theta00[[a, b]] - d(&p.e0, &p.e0)).abs() < 1e-12);
                assert!((s.theta11[[a, b]] - d(&p.e1, &p.e1)).abs() < 1e-12);
                assert!((s.theta01[[a, b]] + d(&p.e0, &p.e1)).abs() < 1e-12);
                assert!((s.theta10[[a, b]] + d(&p.e1, &p.e0)).abs() < 1e-12);
            }
        }
        assert!(matches!(p.recover_submatrices(&[10]), Err(Error::Index { .. })));
    }

    #[test]
    fn unit_norm_rows_give_unit_diagonal() {
        let p = LowRankPotentials::new(array![[0.6, 0.8], [1.0, 0.0]], Array2::zeros((2, 2))).unwrap();
        let s = p.recover_submatrices(&[0]).unwrap();
        assert!((s.theta00[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ffn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let emb = crate::embeddings::gaussian_matrix(&mut rng, 5, 4, 0.7);
        for kind in [FfnKind::Hidden, FfnKind::Linear, FfnKind::Identity] {
            let ffn = Ffn::init(kind, 4, 3, 4, &mut rng).unwrap();
            let mask = dropout_mask(5, 3, 0.3, 4, "t").unwrap();
            let m = matches!(kind, FfnKind::Hidden).then(|| mask.clone());
            let (out, tape) = ffn.forward(&emb, m.clone()).unwrap();
            let weights = crate::embeddings::gaussian_matrix(&mut rng, out.nrows(), out.ncols(), 1.0);
            let (g_ffn, g_emb) = ffn.backward(&emb, &tape, &weights);
            let loss = |f: &Ffn, e: &Array2<f64>| (f.forward(e, m.clone()).unwrap().0 * &weights).sum();
            let h = 1e-6;
            for idx in [(0, 0), (4, 3), (2, 1)] {
                let mut ep = emb.clone();
                ep[idx] += h;
                let mut em = emb.clone();
                em[idx] -= h;
                let fd = (loss(&ffn, &ep) - loss(&ffn, &em)) / (2.0 * h);
                assert!((fd - g_emb[idx]).abs() < 1e-7, "{kind:?} emb {idx:?}");
            }
            for ((_, g), (name, _)) in g_ffn.tensors().into_iter().zip(ffn.tensors()) {
                let mut fp = ffn.clone();
                fp.tensors_mut().into_iter().find(|(n, _)| *n == name).unwrap().1[(0, 1)] += h;
                let mut fm = ffn.clone();
                fm.tensors_mut().into_iter().find(|(n, _)| *n == name).unwrap().1[(0, 1)] -= h;
                let fd = (loss(&fp, &emb) - loss(&fm, &emb)) / (2.0 * h);
                assert!((fd - g[(0, 1)]).abs() < 1e-7, "{kind:?} {name}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn submatrix_symmetry_holds(seed in any::<u64>(), n in 1usize..12, r in 1usize..5) {
                let p = random_factors(n, r, seed);
                let ids: Vec<usize> = (0..n).rev().collect();
                let s = p.recover_submatrices(&ids).unwrap();
                prop_assert!(s.symmetry_error() <= 1e-6);
                prop_assert_eq!(s.transpose_error(), 0.0);
            }
        }
    }
}
