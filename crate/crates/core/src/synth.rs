//! Synthetic correlated typing benchmark.
//!
//! Types are arranged in implication chains (each level implies the one
//! above it) plus free-standing types. Chains are partitioned into
//! mutual-exclusion groups: an instance activates at most one chain per
//! group. Unary evidence is noisy: some gold types get only weak positive
//! scores and a few non-gold distractors get the same weak scores, so a
//! per-type threshold cannot separate them while the label structure can.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, TypeVocabulary, TypingInstance};
use crate::error::{Error, Result};
use crate::rng;
use crate::unary::LogitsTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub chains: usize,
    pub depth: usize,
    /// Chains are split evenly across this many exclusion groups.
    pub groups: usize,
    pub free_types: usize,
    /// Chance that a gold type receives only weak evidence.
    pub weak_gold_prob: f64,
    /// Non-gold types per instance that receive weak positive evidence.
    pub distractors: usize,
    /// Chance that one free type joins the gold set.
    pub free_gold_prob: f64,
    pub strong: (f64, f64),
    pub weak: (f64, f64),
    pub negative: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train: 2000,
            dev: 300,
            test: 500,
            chains: 12,
            depth: 3,
            groups: 4,
            free_types: 28,
            weak_gold_prob: 0.2,
            distractors: 4,
            free_gold_prob: 0.3,
            strong: (1.5, 2.5),
            weak: (0.3, 1.0),
            negative: (-2.5, -1.5),
        }
    }
}

impl SynthConfig {
    pub fn num_types(&self) -> usize {
        self.chains * self.depth + self.free_types
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.chains == 0 || self.depth == 0 || self.groups == 0 {
            return bad("chains, depth and groups must be positive");
        }
        if !self.chains.is_multiple_of(self.groups) {
            return bad("chains must divide evenly into groups");
        }
        if self.distractors > self.num_types() {
            return bad("more distractors than types");
        }
        for p in [self.weak_gold_prob, self.free_gold_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        for (lo, hi) in [self.strong, self.weak, self.negative] {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return bad("evidence ranges must be finite with lo < hi");
            }
        }
        Ok(())
    }
}

/// The label structure behind a generated benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStructure {
    /// `parent[j]` is the type implied by `j`, if any.
    pub parent: Vec<Option<usize>>,
    /// Type ids of each chain, root first.
    pub chains: Vec<Vec<usize>>,
    /// Chain indices of each exclusion group.
    pub groups: Vec<Vec<usize>>,
    pub free: Vec<usize>,
}

impl SynthStructure {
    pub fn new(config: &SynthConfig) -> Self {
        let mut parent = Vec::new();
        let mut chains = Vec::new();
        for _ in 0..config.chains {
            let mut chain = Vec::new();
            for level in 0..config.depth {
                let id = parent.len();
                parent.push((level > 0).then(|| id - 1));
                chain.push(id);
            }
            chains.push(chain);
        }
        let per_group = config.chains / config.groups;
        let groups = (0..config.groups)
            .map(|g| (g * per_group..(g + 1) * per_group).collect())
            .collect();
        let free = (parent.len()..parent.len() + config.free_types).collect();
        parent.extend(std::iter::repeat_n(None, config.free_types));
        SynthStructure {
            parent,
            chains,
            groups,
            free,
        }
    }

    pub fn phrases(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.parent.len()];
        for (c, chain) in self.chains.iter().enumerate() {
            for (level, &id) in chain.iter().enumerate() {
                out[id] = format!("chain_{c:02}_level_{level}");
            }
        }
        for (k, &id) in self.free.iter().enumerate() {
            out[id] = format!("free_{k:02}");
        }
        out
    }

    /// Exclusion group of a chain type; `None` for free types.
    pub fn group_of(&self, type_id: usize) -> Option<usize> {
        let chain = self.chains.iter().position(|c| c.contains(&type_id))?;
        self.groups.iter().position(|g| g.contains(&chain))
    }

    /// Whether `gold` contains every ancestor of each of its members and
    /// at most one chain per group.
    pub fn is_consistent(&self, gold: &BTreeSet<usize>) -> bool {
        let closed = gold
            .iter()
            .all(|&j| self.parent.get(j).is_some_and(|p| p.is_none_or(|p| gold.contains(&p))));
        let exclusive = self.groups.iter().all(|g| {
            g.iter()
                .filter(|&&c| self.chains[c].iter().any(|t| gold.contains(t)))
                .count()
                <= 1
        });
        closed && exclusive
    }
}

/// One generated split.
#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub instances: Vec<TypingInstance>,
    pub logits: LogitsTable,
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    pub structure: SynthStructure,
    pub vocab: TypeVocabulary,
    pub train: SynthSplit,
    pub dev: SynthSplit,
    pub test: SynthSplit,
}

fn sample_gold(structure: &SynthStructure, config: &SynthConfig, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut gold = BTreeSet::new();
    let active = rng.random_range(1..=2.min(structure.groups.len()));
    let mut groups: Vec<usize> = (0..structure.groups.len()).collect();
    groups.shuffle(rng);
    for &g in &groups[..active] {
        let chain = &structure.chains[*structure.groups[g].choose(rng).expect("nonempty group")];
        let level = rng.random_range(0..chain.len());
        gold.extend(&chain[..=level]);
    }
    if !structure.free.is_empty() && rng.random_bool(config.free_gold_prob) {
        gold.insert(*structure.free.choose(rng).expect("nonempty"));
    }
    gold
}

fn sample_logits(gold: &BTreeSet<usize>, n: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut theta = vec![0.0; n];
    for (j, t) in theta.iter_mut().enumerate() {
        let range = if gold.contains(&j) {
            if rng.random_bool(config.weak_gold_prob) {
                config.weak
            } else {
                config.strong
            }
        } else {
            config.negative
        };
        *t = rng.random_range(range.0..range.1);
    }
    let others: Vec<usize> = (0..n).filter(|j| !gold.contains(j)).collect();
    for &j in others.choose_multiple(rng, config.distractors) {
        theta[j] = rng.random_range(config.weak.0..config.weak.1);
    }
    theta
}

fn split(name: &str, count: usize, structure: &SynthStructure, config: &SynthConfig) -> Result<SynthSplit> {
    let mut rng = rng::substream(config.seed, &format!("{}-{name}", rng::SYNTH));
    let n = structure.parent.len();
    let mut instances = Vec::with_capacity(count);
    let mut logits = LogitsTable::new(n);
    for i in 0..count {
        let gold = sample_gold(structure, config, &mut rng);
        let theta = sample_logits(&gold, n, config, &mut rng);
        let id = format!("{name}-{i:05}");
        logits.insert(id.clone(), theta)?;
        instances.push(TypingInstance {
            id,
            mention: format!("mention {i}"),
            left_context: vec!["in".into(), name.into()],
            right_context: vec!["here".into()],
            gold,
        });
    }
    Ok(SynthSplit { instances, logits })
}

pub fn generate(config: &SynthConfig) -> Result<SynthBenchmark> {
    config.validate()?;
    let structure = SynthStructure::new(config);
    let vocab = TypeVocabulary::new(structure.phrases())?;
    Ok(SynthBenchmark {
        config: *config,
        train: split("train", config.train, &structure, config)?,
        dev: split("dev", config.dev, &structure, config)?,
        test: split("test", config.test, &structure, config)?,
        structure,
        vocab,
    })
}

/// Paths of the files written by [`SynthBenchmark::write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub types: PathBuf,
    pub structure: PathBuf,
    /// `(name, instances, logits)` per split.
    pub splits: Vec<(String, PathBuf, PathBuf)>,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            types: dir.join("types.txt"),
            structure: dir.join("structure.json"),
            splits: ["train", "dev", "test"]
                .iter()
                .map(|s| {
                    (
                        s.to_string(),
                        dir.join(format!("{s}.jsonl")),
                        dir.join(format!("{s}.logits.jsonl")),
                    )
                })
                .collect(),
        }
    }
}

impl SynthBenchmark {
    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir);
        self.vocab.write_type_list(&files.types)?;
        let structure = serde_json::to_string_pretty(&self.structure).expect("structure serializes");
        fs::write(&files.structure, structure + "\n").map_err(|e| Error::io(&files.structure, e))?;
        for ((_, data, logits), split) in files.splits.iter().zip([&self.train, &self.dev, &self.test]) {
            write_jsonl(data, &split.instances, &self.vocab)?;
            let ids: Vec<String> = split.instances.iter().map(|i| i.id.clone()).collect();
            split.logits.write(logits, &ids)?;
        }
        Ok(files)
    }
}

pub fn read_structure(path: &Path) -> Result<SynthStructure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
