//! Entity-typing datasets in the UFET JSONL layout.
//!
//! Each line holds one mention with its context and gold label strings:
//!
//! ```text
//! {"mention_span":"Joe Biden","left_context_token":[],"right_context_token":["spoke"],"y_str":["person","politician"]}
//! ```
//!
//! An optional `id` field names the instance (used to join precomputed
//! unary logits); without it the 0-based line number is used.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The label set, in id order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TypeVocabulary {
    phrases: Vec<String>,
    index: HashMap<String, usize>,
}

impl TypeVocabulary {
    /// Builds a vocabulary whose ids follow the order of `phrases`.
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = TypeVocabulary::default();
        for phrase in phrases {
            let phrase = phrase.into();
            if split_phrase(&phrase).is_empty() {
                return Err(Error::Vocabulary(format!(
                    "type `{phrase}` contains no words"
                )));
            }
            if vocab.index.contains_key(&phrase) {
                return Err(Error::Vocabulary(format!("duplicate type `{phrase}`")));
            }
            vocab.index.insert(phrase.clone(), vocab.phrases.len());
            vocab.phrases.push(phrase);
        }
        Ok(vocab)
    }

    /// Reads a type-list file: one phrase per line, blank lines ignored.
    pub fn from_type_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn id(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    pub fn phrase(&self, id: usize) -> Option<&str> {
        self.phrases.get(id).map(String::as_str)
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Words of type `id`, used to look up word vectors.
    pub fn words(&self, id: usize) -> Vec<&str> {
        split_phrase(&self.phrases[id])
    }

    /// Writes the vocabulary in type-list format.
    pub fn write_type_list(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.phrases {
            out.push_str(p);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Hierarchical labels such as `/person/artist` are opaque; slashes act as
/// word separators just like underscores.
fn split_phrase(phrase: &str) -> Vec<&str> {
    phrase
        .split(['_', '/'])
        .filter(|w| !w.trim().is_empty())
        .collect()
}

/// One mention in context with its gold type ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypingInstance {
    pub id: String,
    pub mention: String,
    pub left_context: Vec<String>,
    pub right_context: Vec<String>,
    pub gold: BTreeSet<usize>,
}

impl TypingInstance {
    pub fn mention_words(&self) -> impl Iterator<Item = &str> {
        self.mention.split_whitespace()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<serde_json::Value>,
    mention_span: String,
    left_context_token: Vec<String>,
    right_context_token: Vec<String>,
    y_str: Vec<String>,
}

fn read_raw(path: &Path) -> Result<Vec<(String, RawInstance)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let id = match &raw.id {
            None => lineno.to_string(),
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
        };
        records.push((id, raw));
    }
    Ok(records)
}

fn resolve(
    records: Vec<(String, RawInstance)>,
    vocab: &TypeVocabulary,
) -> Result<Vec<TypingInstance>> {
    records
        .into_iter()
        .map(|(id, raw)| {
            let gold = raw
                .y_str
                .iter()
                .map(|label| vocab.id(label).ok_or_else(|| Error::UnknownLabel(label.clone())))
                .collect::<Result<BTreeSet<_>>>()?;
            Ok(TypingInstance {
                id,
                mention: raw.mention_span,
                left_context: raw.left_context_token,
                right_context: raw.right_context_token,
                gold,
            })
        })
        .collect()
}

/// Loads a JSONL file.
///
/// With a fixed `vocab`, labels outside it are an error. Otherwise the
/// vocabulary is built from the labels seen, sorted lexicographically.
pub fn load_jsonl(
    path: &Path,
    vocab: Option<&TypeVocabulary>,
) -> Result<(Vec<TypingInstance>, TypeVocabulary)> {
    let records = read_raw(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let labels: BTreeSet<&str> = records
                .iter()
                .flat_map(|(_, r)| r.y_str.iter().map(String::as_str))
                .collect();
            TypeVocabulary::new(labels)?
        }
    };
    Ok((resolve(records, &vocab)?, vocab))
}

/// Loads a JSONL file with the vocabulary seeded from a type-list file.
/// File order wins; labels seen only in the data are appended in sorted order.
pub fn load_jsonl_with_type_list(
    path: &Path,
    type_list: &Path,
) -> Result<(Vec<TypingInstance>, TypeVocabulary)> {
    let records = read_raw(path)?;
    let listed = TypeVocabulary::from_type_list(type_list)?;
    let extra: BTreeSet<&str> = records
        .iter()
        .flat_map(|(_, r)| r.y_str.iter().map(String::as_str))
        .filter(|l| listed.id(l).is_none())
        .collect();
    let vocab = TypeVocabulary::new(
        listed
            .phrases()
            .iter()
            .map(String::as_str)
            .chain(extra)
            .map(str::to_owned),
    )?;
    Ok((resolve(records, &vocab)?, vocab))
}

/// Serializes instances back to JSONL, labels spelled through `vocab`.
pub fn write_jsonl(path: &Path, instances: &[TypingInstance], vocab: &TypeVocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for inst in instances {
        let raw = RawInstance {
            id: Some(serde_json::Value::String(inst.id.clone())),
            mention_span: inst.mention.clone(),
            left_context_token: inst.left_context.clone(),
            right_context_token: inst.right_context.clone(),
            y_str: inst
                .gold
                .iter()
                .map(|&g| {
                    vocab
                        .phrase(g)
                        .map(str::to_owned)
                        .ok_or(Error::Index { index: g, len: vocab.len() })
                })
                .collect::<Result<_>>()?,
        };
        let line = serde_json::to_string(&raw).expect("instance serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub instance_count: usize,
    pub avg_gold_per_instance: f64,
    pub type_count: usize,
    /// Instances whose gold set is empty. They are kept for prediction but
    /// never enter a training batch.
    pub empty_gold_count: usize,
}

pub fn compute_stats(instances: &[TypingInstance], vocab: &TypeVocabulary) -> DatasetStats {
    let total: usize = instances.iter().map(|i| i.gold.len()).sum();
    DatasetStats {
        instance_count: instances.len(),
        avg_gold_per_instance: if instances.is_empty() {
            0.0
        } else {
            total as f64 / instances.len() as f64
        },
        type_count: vocab.len(),
        empty_gold_count: instances.iter().filter(|i| i.gold.is_empty()).count(),
    }
}

/// Restricts the label set to `keep`, intersecting gold sets and
/// renumbering the surviving types densely in their original order.
pub fn filter_granularity(
    instances: &[TypingInstance],
    vocab: &TypeVocabulary,
    keep: &BTreeSet<usize>,
) -> Result<(Vec<TypingInstance>, TypeVocabulary)> {
    let kept: Vec<usize> = keep.iter().copied().filter(|&id| id < vocab.len()).collect();
    if kept.is_empty() {
        return Err(Error::Vocabulary(
            "granularity filter keeps no type of the vocabulary".into(),
        ));
    }
    let remap: HashMap<usize, usize> = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let new_vocab = TypeVocabulary::new(kept.iter().map(|&id| vocab.phrases[id].clone()))?;
    let filtered = instances
        .iter()
        .map(|inst| TypingInstance {
            gold: inst.gold.iter().filter_map(|g| remap.get(g).copied()).collect(),
            ..inst.clone()
        })
        .collect();
    Ok((filtered, new_vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_a_single_line() {
        let f = write_tmp(
            r#"{"mention_span":"Joe Biden","left_context_token":[],"right_context_token":["spoke"],"y_str":["person","politician"]}"#,
        );
        let (insts, vocab) = load_jsonl(f.path(), None).unwrap();
        assert_eq!(insts.len(), 1);
        assert_eq!(vocab.phrases(), ["person", "politician"]);
        assert_eq!(insts[0].gold, BTreeSet::from([0, 1]));
        assert_eq!(insts[0].mention, "Joe Biden");
        assert_eq!(insts[0].right_context, ["spoke"]);
        assert_eq!(insts[0].id, "0");
    }

    #[test]
    fn empty_file_gives_empty_vocab() {
        let f = write_tmp("");
        let (insts, vocab) = load_jsonl(f.path(), None).unwrap();
        assert!(insts.is_empty());
        assert!(vocab.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(
            "{\"mention_span\":\"a\",\"left_context_token\":[],\"right_context_token\":[],\"y_str\":[]}\n{oops\n",
        );
        match load_jsonl(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_under_fixed_vocab() {
        let f = write_tmp(
            r#"{"mention_span":"x","left_context_token":[],"right_context_token":[],"y_str":["city"]}"#,
        );
        let vocab = TypeVocabulary::new(["person"]).unwrap();
        match load_jsonl(f.path(), Some(&vocab)) {
            Err(Error::UnknownLabel(l)) => assert_eq!(l, "city"),
            other => panic!("expected unknown label, got {other:?}"),
        }
    }

    #[test]
    fn type_list_order_wins() {
        let data = write_tmp(
            r#"{"mention_span":"x","left_context_token":[],"right_context_token":[],"y_str":["b","zeta"]}"#,
        );
        let types = write_tmp("c\nb\na\n");
        let (insts, vocab) = load_jsonl_with_type_list(data.path(), types.path()).unwrap();
        assert_eq!(vocab.phrases(), ["c", "b", "a", "zeta"]);
        assert_eq!(insts[0].gold, BTreeSet::from([1, 3]));
        let (_, again) = load_jsonl_with_type_list(data.path(), types.path()).unwrap();
        assert_eq!(vocab, again);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_wordless_phrases() {
        assert!(TypeVocabulary::new(["a", "a"]).is_err());
        assert!(TypeVocabulary::new(["__"]).is_err());
        let v = TypeVocabulary::new(["/person/artist", "living_thing"]).unwrap();
        assert_eq!(v.words(0), ["person", "artist"]);
        assert_eq!(v.words(1), ["living", "thing"]);
    }

    fn inst(gold: &[usize]) -> TypingInstance {
        TypingInstance {
            id: "i".into(),
            mention: "m".into(),
            left_context: vec![],
            right_context: vec![],
            gold: gold.iter().copied().collect(),
        }
    }

    #[test]
    fn stats_average_gold() {
        let vocab = TypeVocabulary::new(["a", "b", "c"]).unwrap();
        let s = compute_stats(&[inst(&[0]), inst(&[0, 1, 2])], &vocab);
        assert_eq!(s.instance_count, 2);
        assert_eq!(s.avg_gold_per_instance, 2.0);
        assert_eq!(s.type_count, 3);
        let empty = compute_stats(&[], &vocab);
        assert_eq!(empty.instance_count, 0);
        assert_eq!(empty.avg_gold_per_instance, 0.0);
        assert_eq!(compute_stats(&[inst(&[])], &vocab).empty_gold_count, 1);
    }

    #[test]
    fn granularity_filter_intersects_and_remaps() {
        let vocab = TypeVocabulary::new(["person", "president", "city"]).unwrap();
        let insts = vec![inst(&[0, 1]), inst(&[2])];
        let (f, v) = filter_granularity(&insts, &vocab, &BTreeSet::from([0])).unwrap();
        assert_eq!(v.phrases(), ["person"]);
        assert_eq!(f[0].gold, BTreeSet::from([0]));
        assert!(f[1].gold.is_empty());

        let (f, v) = filter_granularity(&insts, &vocab, &BTreeSet::from([0, 2])).unwrap();
        assert_eq!(v.phrases(), ["person", "city"]);
        assert_eq!(f[1].gold, BTreeSet::from([1]));

        let all: BTreeSet<usize> = (0..3).collect();
        let (f, v) = filter_granularity(&insts, &vocab, &all).unwrap();
        assert_eq!(v, vocab);
        assert_eq!(f, insts);

        assert!(filter_granularity(&insts, &vocab, &BTreeSet::from([7])).is_err());
        assert!(filter_granularity(&insts, &vocab, &BTreeSet::new()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            "[a-zA-Z0-9'\".,-]{1,8}"
        }

        proptest! {
            #[test]
            fn write_then_load_round_trips(
                rows in prop::collection::vec(
                    (
                        prop::collection::vec(word(), 1..4),
                        prop::collection::vec(word(), 0..5),
                        prop::collection::vec(word(), 0..5),
                        prop::collection::btree_set(0usize..6, 0..4),
                    ),
                    1..8,
                ),
            ) {
                let vocab = TypeVocabulary::new(["a", "b_c", "d/e", "f", "g_h_i", "j"]).unwrap();
                let instances: Vec<TypingInstance> = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (mention, left, right, gold))| TypingInstance {
                        id: format!("x{i}"),
                        mention: mention.join(" "),
                        left_context: left,
                        right_context: right,
                        gold,
                    })
                    .collect();
                let f = tempfile::NamedTempFile::new().unwrap();
                write_jsonl(f.path(), &instances, &vocab).unwrap();
                let (back, v) = load_jsonl(f.path(), Some(&vocab)).unwrap();
                prop_assert_eq!(&v, &vocab);
                prop_assert_eq!(back, instances);
            }
        }
    }
}
