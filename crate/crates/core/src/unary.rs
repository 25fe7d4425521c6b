//! Unary scorers. A scorer maps an instance to `theta1`, the per-type score
//! of the label being present; the score of absence is fixed at zero.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::TypingInstance;
use crate::embeddings::WordVectorTable;
use crate::error::{Error, Result};
use crate::math::axpy;

pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct UnaryScores {
    pub theta1: Array1<f64>,
    pub theta0: Array1<f64>,
}

impl UnaryScores {
    pub fn new(theta1: Array1<f64>) -> Self {
        let theta0 = Array1::zeros(theta1.len());
        UnaryScores { theta1, theta0 }
    }

    pub fn len(&self) -> usize {
        self.theta1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta1.is_empty()
    }
}

/// Anything that can produce unary scores for an instance.
pub trait UnaryScorer {
    fn num_types(&self) -> usize;
    fn score(&self, instance: &TypingInstance) -> Result<UnaryScores>;
}

#[derive(Debug, Serialize, Deserialize)]
struct LogitsRow {
    id: serde_json::Value,
    theta1: Vec<f64>,
}

fn id_key(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Precomputed logits keyed by instance id, e.g. exported from an external
/// backbone. JSONL rows: `{"id": ..., "theta1": [...]}`.
#[derive(Debug, Clone, Default)]
pub struct LogitsTable {
    num_types: usize,
    rows: HashMap<String, Array1<f64>>,
}

impl LogitsTable {
    pub fn new(num_types: usize) -> Self {
        LogitsTable {
            num_types,
            rows: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, theta1: Vec<f64>) -> Result<()> {
        let id = id.into();
        if theta1.len() != self.num_types {
            return Err(Error::Dimension(format!(
                "logits for `{id}` have {} entries, vocabulary has {}",
                theta1.len(),
                self.num_types
            )));
        }
        if theta1.iter().any(|x| !x.is_finite()) {
            return Err(Error::Dimension(format!("logits for `{id}` are not finite")));
        }
        self.rows.insert(id, Array1::from(theta1));
        Ok(())
    }

    pub fn load(path: &Path, num_types: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = LogitsTable::new(num_types);
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: LogitsRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            table.insert(id_key(&row.id), row.theta1)?;
        }
        Ok(table)
    }

    /// Writes rows in the given id order.
    pub fn write(&self, path: &Path, ids: &[String]) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for id in ids {
            let theta1 = self.rows.get(id).ok_or_else(|| Error::MissingInstance(id.clone()))?;
            let row = LogitsRow {
                id: serde_json::Value::String(id.clone()),
                theta1: theta1.to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&row).expect("serializable"))
                .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Scores for one instance id, read verbatim.
    pub fn score_id(&self, id: &str) -> Result<UnaryScores> {
        self.rows
            .get(id)
            .map(|t| UnaryScores::new(t.clone()))
            .ok_or_else(|| Error::MissingInstance(id.to_owned()))
    }
}

impl UnaryScorer for LogitsTable {
    fn num_types(&self) -> usize {
        self.num_types
    }

    fn score(&self, instance: &TypingInstance) -> Result<UnaryScores> {
        self.score_id(&instance.id)
    }
}

/// Trainable affine map of the bag-of-words features.
#[derive(Debug, Clone, PartialEq)]
pub struct BagEncoderParams {
    /// N x D
    pub projection: Array2<f64>,
    /// N
    pub bias: Array1<f64>,
}

impl BagEncoderParams {
    pub fn zeros(num_types: usize, dim: usize) -> Self {
        BagEncoderParams {
            projection: Array2::zeros((num_types, dim)),
            bias: Array1::zeros(num_types),
        }
    }
}

fn mean_into<'a>(out: &mut [f64], vecs: impl Iterator<Item = &'a [f64]>) {
    let mut acc = vec![0.0; out.len()];
    let mut count = 0usize;
    for v in vecs {
        axpy(&mut acc, 1.0, v);
        count += 1;
    }
    if count > 0 {
        for (o, a) in out.iter_mut().zip(acc) {
            *o += a / count as f64;
        }
    }
}

/// `h = mean(mention words) + mean(context words)`, where the context is the
/// last `window` left tokens and the first `window` right tokens. Unknown
/// words are skipped; an empty group contributes zeros.
pub fn bag_features(instance: &TypingInstance, words: &WordVectorTable, window: usize) -> Array1<f64> {
    let mut h = Array1::zeros(words.dim());
    let out = h.as_slice_mut().expect("contiguous");
    mean_into(out, instance.mention_words().filter_map(|w| words.get(w)));
    let left = &instance.left_context[instance.left_context.len().saturating_sub(window)..];
    let right = &instance.right_context[..instance.right_context.len().min(window)];
    mean_into(out, left.iter().chain(right).filter_map(|w| words.get(w)));
    h
}

pub fn bag_encode(
    instance: &TypingInstance,
    words: &WordVectorTable,
    params: &BagEncoderParams,
    window: usize,
) -> UnaryScores {
    let h = bag_features(instance, words, window);
    UnaryScores::new(params.projection.dot(&h) + &params.bias)
}

/// A bag encoder bound to its word table.
pub struct BagEncoder<'a> {
    pub words: &'a WordVectorTable,
    pub params: &'a BagEncoderParams,
    pub window: usize,
}

impl UnaryScorer for BagEncoder<'_> {
    fn num_types(&self) -> usize {
        self.params.bias.len()
    }

    fn score(&self, instance: &TypingInstance) -> Result<UnaryScores> {
        Ok(bag_encode(instance, self.words, self.params, self.window))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::BTreeSet;

    fn instance(mention: &str, left: &[&str], right: &[&str]) -> TypingInstance {
        TypingInstance {
            id: "0".into(),
            mention: mention.into(),
            left_context: left.iter().map(|s| s.to_string()).collect(),
            right_context: right.iter().map(|s| s.to_string()).collect(),
            gold: BTreeSet::new(),
        }
    }

    fn toy_table() -> WordVectorTable {
        WordVectorTable::from_entries(
            2,
            [
                ("joe".to_string(), vec![1.0, 0.0]),
                ("biden".to_string(), vec![0.0, 2.0]),
                ("spoke".to_string(), vec![4.0, 4.0]),
                ("today".to_string(), vec![2.0, 0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn logits_pass_through() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","theta1":[1.2,-0.3]}}"#).unwrap();
        writeln!(f, r#"{{"id":7,"theta1":[0.0,0.0]}}"#).unwrap();
        let t = LogitsTable::load(f.path(), 2).unwrap();
        let s = t.score_id("a").unwrap();
        assert_eq!(s.theta1.to_vec(), vec![1.2, -0.3]);
        assert_eq!(s.theta0.to_vec(), vec![0.0, 0.0]);
        assert_eq!(t.score_id("7").unwrap().theta1.to_vec(), vec![0.0, 0.0]);
        assert!(matches!(t.score_id("b"), Err(Error::MissingInstance(_))));
    }

    #[test]
    fn logits_wrong_length_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","theta1":[1.0,2.0,3.0]}}"#).unwrap();
        assert!(matches!(LogitsTable::load(f.path(), 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_map_scores_zero() {
        let p = BagEncoderParams::zeros(3, 2);
        let s = bag_encode(&instance("Joe Biden", &[], &["spoke"]), &toy_table(), &p, 10);
        assert!(s.theta1.iter().all(|&x| x == 0.0));
        assert!(s.theta0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_mention_uses_context_only() {
        let h = bag_features(&instance("Zyx", &["today"], &["spoke"]), &toy_table(), 10);
        assert_eq!(h.to_vec(), vec![3.0, 2.0]);
    }

    #[test]
    fn toy_affine_map_by_hand() {
        // mention mean: (joe + biden)/2 = (0.5, 1.0)
        // context mean over "today" (left) and "spoke" (right): (3.0, 2.0)
        // h = (3.5, 3.0)
        // theta1[0] = 1*3.5 + 0*3.0 + 0.5 = 4.0
        // theta1[1] = -1*3.5 + 2*3.0 - 1 = 1.5
        let p = BagEncoderParams {
            projection: array![[1.0, 0.0], [-1.0, 2.0]],
            bias: array![0.5, -1.0],
        };
        let inst = instance("Joe Biden", &["far", "today"], &["spoke", "loudly"]);
        let s = bag_encode(&inst, &toy_table(), &p, 10);
        assert_eq!(s.theta1.to_vec(), vec![4.0, 1.5]);
        // window 0 drops the context
        let s = bag_encode(&inst, &toy_table(), &p, 0);
        assert_eq!(s.theta1.to_vec(), vec![1.0, 0.5]);
    }

    #[test]
    fn mention_order_does_not_matter() {
        let p = BagEncoderParams {
            projection: array![[0.3, -0.7]],
            bias: array![0.1],
        };
        let a = bag_encode(&instance("joe biden spoke", &[], &[]), &toy_table(), &p, 10);
        let b = bag_encode(&instance("spoke joe biden", &[], &[]), &toy_table(), &p, 10);
        assert!((a.theta1[0] - b.theta1[0]).abs() < 1e-12);
    }
}
