//! Set-based precision, recall and F1.
//!
//! Macro scores average per-instance values. Instances with an empty
//! prediction are left out of the precision average, and instances with an
//! empty gold set are left out of the recall average. Micro scores pool
//! counts over the corpus; an empty denominator yields 0.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::Serialize;

use crate::mfvi::{decode, MarginalState};

pub type TypeSet = BTreeSet<usize>;

/// Convention note written into every report.
pub const CONVENTION: &str = "macro P averages instances with non-empty predictions; \
macro R averages instances with non-empty gold; micro P/R pool counts; empty denominators give 0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }

    /// All values in [0, 1] and F1 between min(P, R) and max(P, R).
    pub fn is_consistent(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let lo = self.precision.min(self.recall);
        let hi = self.precision.max(self.recall);
        let tol = 1e-12;
        unit(self.precision)
            && unit(self.recall)
            && unit(self.f1)
            && self.f1 <= hi + tol
            && (lo == 0.0 || self.f1 >= lo - tol)
    }
}

fn overlap(p: &TypeSet, g: &TypeSet) -> usize {
    p.intersection(g).count()
}

pub fn macro_prf(preds: &[TypeSet], golds: &[TypeSet]) -> Prf {
    assert_eq!(preds.len(), golds.len(), "prediction and gold counts differ");
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let hit = overlap(p, g) as f64;
        if !p.is_empty() {
            p_sum += hit / p.len() as f64;
            p_n += 1;
        }
        if !g.is_empty() {
            r_sum += hit / g.len() as f64;
            r_n += 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Prf::new(avg(p_sum, p_n), avg(r_sum, r_n))
}

pub fn micro_prf(preds: &[TypeSet], golds: &[TypeSet]) -> Prf {
    assert_eq!(preds.len(), golds.len(), "prediction and gold counts differ");
    let (mut hit, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        hit += overlap(p, g);
        np += p.len();
        ng += g.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Prf::new(ratio(hit, np), ratio(hit, ng))
}

/// Scores of one decoded prediction list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub macro_scores: Prf,
    pub micro_scores: Prf,
    pub avg_pred_per_instance: f64,
}

impl EvalRow {
    pub fn evaluate(preds: &[TypeSet], golds: &[TypeSet]) -> Self {
        let total: usize = preds.iter().map(BTreeSet::len).sum();
        EvalRow {
            macro_scores: macro_prf(preds, golds),
            micro_scores: micro_prf(preds, golds),
            avg_pred_per_instance: if preds.is_empty() {
                0.0
            } else {
                total as f64 / preds.len() as f64
            },
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.macro_scores.is_consistent() && self.micro_scores.is_consistent()
    }
}

/// Final-iterate scores plus one row per iteration, under both decoding
/// conventions (strict threshold, and forced non-empty).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub convention: &'static str,
    pub threshold: f64,
    pub instances: usize,
    pub final_row: EvalRow,
    pub per_iteration: Vec<EvalRow>,
    pub per_iteration_forced: Vec<EvalRow>,
}

/// Decodes every state of every trajectory and scores each iteration.
pub fn per_iteration_eval(trajectories: &[Vec<MarginalState>], golds: &[TypeSet], threshold: f64, force_nonempty: bool) -> Vec<EvalRow> {
    assert_eq!(trajectories.len(), golds.len(), "trajectory and gold counts differ");
    let steps = trajectories.first().map_or(0, Vec::len);
    assert!(
        trajectories.iter().all(|t| t.len() == steps),
        "trajectories have different lengths"
    );
    (0..steps)
        .map(|t| {
            let preds: Vec<TypeSet> = trajectories
                .iter()
                .map(|traj| decode(&traj[t], threshold, force_nonempty))
                .collect();
            EvalRow::evaluate(&preds, golds)
        })
        .collect()
}

impl EvalReport {
    /// `force_nonempty` selects the convention used for `final_row`.
    pub fn build(trajectories: &[Vec<MarginalState>], golds: &[TypeSet], threshold: f64, force_nonempty: bool) -> Self {
        let strict = per_iteration_eval(trajectories, golds, threshold, false);
        let forced = per_iteration_eval(trajectories, golds, threshold, true);
        let chosen = if force_nonempty { &forced } else { &strict };
        let final_row = chosen.last().copied().unwrap_or_else(|| EvalRow::evaluate(&[], &[]));
        EvalReport {
            convention: CONVENTION,
            threshold,
            instances: golds.len(),
            final_row,
            per_iteration: strict,
            per_iteration_forced: forced,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.final_row.is_consistent()
            && self.per_iteration.iter().all(EvalRow::is_consistent)
            && self.per_iteration_forced.iter().all(EvalRow::is_consistent)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} instances, threshold {}", self.instances, self.threshold);
        let _ = writeln!(out, "# {}", self.convention);
        let f = &self.final_row;
        let _ = writeln!(
            out,
            "final  Ma-P {:6.2}  Ma-R {:6.2}  Ma-F1 {:6.2}  Mi-P {:6.2}  Mi-R {:6.2}  Mi-F1 {:6.2}  avg|pred| {:.2}",
            100.0 * f.macro_scores.precision,
            100.0 * f.macro_scores.recall,
            100.0 * f.macro_scores.f1,
            100.0 * f.micro_scores.precision,
            100.0 * f.micro_scores.recall,
            100.0 * f.micro_scores.f1,
            f.avg_pred_per_instance
        );
        for (label, rows) in [("strict", &self.per_iteration), ("forced", &self.per_iteration_forced)] {
            let _ = writeln!(out, "\niteration ({label})   Ma-P    Ma-R   Ma-F1   avg|pred|");
            for (t, r) in rows.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "q^{t:<17} {:6.2}  {:6.2}  {:6.2}  {:8.2}",
                    100.0 * r.macro_scores.precision,
                    100.0 * r.macro_scores.recall,
                    100.0 * r.macro_scores.f1,
                    r.avg_pred_per_instance
                );
            }
        }
        out
    }
}
