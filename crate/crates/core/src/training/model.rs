use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::mfvi_backward;
use super::loss::{bce_grad, bce_loss, DEFAULT_ALPHA};
use crate::dataset::TypingInstance;
use crate::embeddings::WordVectorTable;
use crate::error::{Error, Result};
use crate::mfvi::{self, MarginalState, MfviConfig};
use crate::potentials::{self, Dropout, Ffn, FfnKind, LowRankPotentials};
use crate::rng;
use crate::unary::{bag_features, BagEncoderParams, LogitsTable, UnaryScores};

/// Where unary scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnaryKind {
    /// Precomputed logits looked up by instance id.
    Precomputed,
    /// Trainable bag-of-embeddings encoder.
    Bag { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ffn: FfnKind,
    /// Hidden width of the embedding transforms; 0 means "same as the embedding dimension".
    pub hidden: usize,
    pub rank: usize,
    pub dropout: f64,
    pub mfvi: MfviConfig,
    pub alpha: f64,
    pub unary: UnaryKind,
    /// Unary-only baseline: no inference iterations, threshold on q^0.
    pub no_pcrf: bool,
    pub random_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ffn: FfnKind::Hidden,
            hidden: 0,
            rank: potentials::DEFAULT_RANK,
            dropout: potentials::DEFAULT_DROPOUT,
            mfvi: MfviConfig::default(),
            alpha: DEFAULT_ALPHA,
            unary: UnaryKind::Precomputed,
            no_pcrf: false,
            random_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// Inference settings actually used, with the baseline override applied.
    pub fn effective_mfvi(&self) -> MfviConfig {
        MfviConfig {
            iterations: if self.no_pcrf { 0 } else { self.mfvi.iterations },
            ..self.mfvi
        }
    }

    pub fn describe(&self) -> String {
        if self.no_pcrf {
            "unary-only baseline (T=0, threshold on q^0)".to_owned()
        } else {
            format!(
                "NPCRF head: ffn={} R={} T={} lambda={} self-term={}",
                self.ffn, self.rank, self.mfvi.iterations, self.mfvi.step_size, self.mfvi.self_term
            )
        }
    }
}

/// Every trainable tensor. Gradients are stored in the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// N x D type embeddings.
    pub embeddings: Array2<f64>,
    pub ffn0: Ffn,
    pub ffn1: Ffn,
    pub unary: Option<BagEncoderParams>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
            ffn0: self.ffn0.zeros_like(),
            ffn1: self.ffn1.zeros_like(),
            unary: self.unary.as_ref().map(|u| BagEncoderParams::zeros(u.bias.len(), u.projection.ncols())),
        }
    }

    /// Named tensors as (name, shape, data) in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "embeddings".to_owned(),
            self.embeddings.shape().to_vec(),
            self.embeddings.as_slice().expect("standard layout"),
        )];
        for (prefix, ffn) in [("ffn0", &self.ffn0), ("ffn1", &self.ffn1)] {
            for (name, t) in ffn.tensors() {
                out.push((format!("{prefix}.{name}"), t.shape().to_vec(), t.as_slice().expect("standard layout")));
            }
        }
        if let Some(u) = &self.unary {
            out.push((
                "unary.projection".to_owned(),
                u.projection.shape().to_vec(),
                u.projection.as_slice().expect("standard layout"),
            ));
            out.push(("unary.bias".to_owned(), u.bias.shape().to_vec(), u.bias.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![(
            "embeddings".to_owned(),
            self.embeddings.as_slice_mut().expect("standard layout"),
        )];
        for (prefix, ffn) in [("ffn0", &mut self.ffn0), ("ffn1", &mut self.ffn1)] {
            for (name, t) in ffn.tensors_mut() {
                out.push((format!("{prefix}.{name}"), t.as_slice_mut().expect("standard layout")));
            }
        }
        if let Some(u) = &mut self.unary {
            out.push(("unary.projection".to_owned(), u.projection.as_slice_mut().expect("standard layout")));
            out.push(("unary.bias".to_owned(), u.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::math::axpy(a, 1.0, b);
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, a) in self.tensors_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn num_types(&self) -> usize {
        self.embeddings.nrows()
    }
}

/// Source of unary scores at run time.
#[derive(Clone, Copy)]
pub enum UnarySource<'a> {
    Logits(&'a LogitsTable),
    Words(&'a WordVectorTable),
}

/// Parameters plus configuration: everything needed to run the head.
#[derive(Debug, Clone, PartialEq)]
pub struct NpcrfModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Per-instance result of a forward/backward pass.
struct InstanceGrad {
    loss: f64,
    theta1: Array1<f64>,
    features: Option<Array1<f64>>,
    e0: Array2<f64>,
    e1: Array2<f64>,
}

impl NpcrfModel {
    /// Initializes the transforms (and bag encoder, if any) from the `init`
    /// stream of `seed`. `word_dim` is required for the bag encoder.
    pub fn init(config: ModelConfig, embeddings: Array2<f64>, word_dim: Option<usize>, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        if !(config.alpha.is_finite() && config.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", config.alpha)));
        }
        config.mfvi.validate()?;
        let dim = embeddings.ncols();
        let hidden = if config.hidden == 0 { dim } else { config.hidden };
        let mut rng = rng::substream(seed, "model-init");
        let ffn0 = Ffn::init(config.ffn, dim, hidden, config.rank, &mut rng)?;
        let ffn1 = Ffn::init(config.ffn, dim, hidden, config.rank, &mut rng)?;
        let unary = match config.unary {
            UnaryKind::Precomputed => None,
            UnaryKind::Bag { .. } => {
                let wd = word_dim.ok_or_else(|| Error::Config("bag encoder needs word vectors".into()))?;
                let n = embeddings.nrows();
                let a = (6.0 / (n + wd) as f64).sqrt();
                let dist = rand_distr::Uniform::new_inclusive(-a, a).expect("finite bound");
                use rand_distr::Distribution;
                Some(BagEncoderParams {
                    projection: Array2::from_shape_simple_fn((n, wd), || dist.sample(&mut rng)),
                    bias: Array1::zeros(n),
                })
            }
        };
        Ok(NpcrfModel {
            config,
            params: ModelParams {
                embeddings,
                ffn0,
                ffn1,
                unary,
            },
        })
    }

    pub fn num_types(&self) -> usize {
        self.params.num_types()
    }

    /// Inference-mode factors.
    pub fn factors(&self) -> Result<LowRankPotentials> {
        potentials::compute_factors(&self.params.embeddings, &self.params.ffn0, &self.params.ffn1, Dropout::Off)
    }

    /// Unary scores and, for the bag encoder, the pooled features.
    pub fn unary_scores(&self, instance: &TypingInstance, source: UnarySource<'_>) -> Result<(UnaryScores, Option<Array1<f64>>)> {
        match (&self.params.unary, self.config.unary, source) {
            (None, UnaryKind::Precomputed, UnarySource::Logits(table)) => {
                let s = table.score_id(&instance.id)?;
                if s.len() != self.num_types() {
                    return Err(Error::Dimension(format!(
                        "logits have {} entries, model has {} types",
                        s.len(),
                        self.num_types()
                    )));
                }
                Ok((s, None))
            }
            (Some(p), UnaryKind::Bag { window }, UnarySource::Words(words)) => {
                if words.dim() != p.projection.ncols() {
                    return Err(Error::Dimension(format!(
                        "word vectors have dimension {}, encoder expects {}",
                        words.dim(),
                        p.projection.ncols()
                    )));
                }
                let h = bag_features(instance, words, window);
                let theta1 = p.projection.dot(&h) + &p.bias;
                Ok((UnaryScores::new(theta1), Some(h)))
            }
            _ => Err(Error::Config("unary source does not match the model's unary scorer".into())),
        }
    }

    /// Full inference trajectory for one instance.
    pub fn predict_trajectory(&self, instance: &TypingInstance, source: UnarySource<'_>, pot: &LowRankPotentials) -> Result<Vec<MarginalState>> {
        let (scores, _) = self.unary_scores(instance, source)?;
        mfvi::run(&scores, pot, &self.config.effective_mfvi())
    }

    /// Trajectories for many instances, in input order.
    pub fn predict_all(&self, instances: &[TypingInstance], source: UnarySource<'_>) -> Result<Vec<Vec<MarginalState>>> {
        let pot = self.factors()?;
        instances
            .par_iter()
            .map(|inst| self.predict_trajectory(inst, source, &pot))
            .collect()
    }

    /// Decoded prediction for every instance under the model's threshold.
    pub fn decode_final(&self, trajectory: &[MarginalState]) -> BTreeSet<usize> {
        let m = &self.config.mfvi;
        mfvi::decode(trajectory.last().expect("non-empty trajectory"), m.threshold, m.force_nonempty)
    }

    fn instance_grad(&self, inst: &TypingInstance, source: UnarySource<'_>, pot: &LowRankPotentials) -> Result<InstanceGrad> {
        let cfg = self.config.effective_mfvi();
        let (scores, features) = self.unary_scores(inst, source)?;
        let traj = mfvi::run(&scores, pot, &cfg)?;
        let last = traj.last().expect("non-empty");
        let loss = bce_loss(&last.q1, &inst.gold, self.config.alpha);
        let gq1 = bce_grad(&last.q1, &inst.gold, self.config.alpha);
        let g = mfvi_backward(&traj, &scores, pot, &cfg, &Array1::zeros(gq1.len()), &gq1);
        Ok(InstanceGrad {
            loss,
            theta1: g.theta1,
            features,
            e0: g.e0,
            e1: g.e1,
        })
    }

    /// Mean loss over `batch` and its gradient for every parameter.
    ///
    /// Instances are processed in parallel chunks and summed in input
    /// order, so the result does not depend on the thread count.
    pub fn loss_and_grad(&self, batch: &[&TypingInstance], source: UnarySource<'_>, dropout: Dropout) -> Result<(f64, ModelParams)> {
        let p = &self.params;
        let (pot, tape) = potentials::compute_factors_with_tape(&p.embeddings, &p.ffn0, &p.ffn1, dropout)?;
        let mut grads = p.zeros_like();
        let mut g_e0 = Array2::<f64>::zeros(pot.e0.raw_dim());
        let mut g_e1 = Array2::<f64>::zeros(pot.e1.raw_dim());
        let mut loss = 0.0;
        const CHUNK: usize = 16;
        for chunk in batch.chunks(CHUNK) {
            let results: Vec<InstanceGrad> = chunk
                .par_iter()
                .map(|inst| self.instance_grad(inst, source, &pot))
                .collect::<Result<_>>()?;
            for ig in results {
                loss += ig.loss;
                g_e0 += &ig.e0;
                g_e1 += &ig.e1;
                if let (Some(u), Some(h)) = (grads.unary.as_mut(), ig.features.as_ref()) {
                    u.bias += &ig.theta1;
                    for (mut row, &g) in u.projection.rows_mut().into_iter().zip(ig.theta1.iter()) {
                        row.scaled_add(g, h);
                    }
                }
            }
        }
        let (g0, g1, g_emb) = potentials::backward_factors(&p.embeddings, &p.ffn0, &p.ffn1, &tape, &g_e0, &g_e1);
        let factor_grads = ModelParams {
            embeddings: g_emb,
            ffn0: g0,
            ffn1: g1,
            unary: grads.unary.as_ref().map(|u| BagEncoderParams::zeros(u.bias.len(), u.projection.ncols())),
        };
        grads.add_assign(&factor_grads);
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    }

    /// Mean loss only (used by finite-difference checks).
    pub fn loss(&self, batch: &[&TypingInstance], source: UnarySource<'_>, dropout: Dropout) -> Result<f64> {
        let p = &self.params;
        let pot = potentials::compute_factors(&p.embeddings, &p.ffn0, &p.ffn1, dropout)?;
        let cfg = self.config.effective_mfvi();
        let mut total = 0.0;
        for inst in batch {
            let (scores, _) = self.unary_scores(inst, source)?;
            let traj = mfvi::run(&scores, &pot, &cfg)?;
            total += bce_loss(&traj.last().expect("non-empty").q1, &inst.gold, self.config.alpha);
        }
        Ok(total / batch.len().max(1) as f64)
    }
}
