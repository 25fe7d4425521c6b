//! Run configuration: a flat set of named settings that can come from
//! built-in defaults, a `key = value` file, or command-line flags, applied
//! in that order.
//!
//! ```text
//! # comments and blank lines are ignored
//! iterations = 4
//! step_size = 0.5
//! ```

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::embeddings::DEFAULT_RANDOM_DIM;
use crate::error::{Error, Result};
use crate::mfvi::{MfviConfig, SelfTerm};
use crate::potentials::FfnKind;
use crate::training::{AdamWConfig, ModelConfig, TrainConfig, UnaryKind};
use crate::unary::DEFAULT_WINDOW;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Bag-encoder window; only read when `unary = bag`.
    pub window: usize,
    pub embedding_dim: usize,
    pub threads: usize,
    pub train_data: Option<PathBuf>,
    pub train_logits: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub dev_logits: Option<PathBuf>,
    pub type_list: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            window: DEFAULT_WINDOW,
            embedding_dim: DEFAULT_RANDOM_DIM,
            threads: 0,
            train_data: None,
            train_logits: None,
            dev_data: None,
            dev_logits: None,
            type_list: None,
            word_vectors: None,
            output: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let o = &t.optimizer;
        let unary = match m.unary {
            UnaryKind::Precomputed => "precomputed",
            UnaryKind::Bag { .. } => "bag",
        };
        vec![
            ("ffn", m.ffn.to_string()),
            ("hidden", m.hidden.to_string()),
            ("rank", m.rank.to_string()),
            ("dropout", m.dropout.to_string()),
            ("iterations", m.mfvi.iterations.to_string()),
            ("step_size", m.mfvi.step_size.to_string()),
            ("threshold", m.mfvi.threshold.to_string()),
            ("force_nonempty", m.mfvi.force_nonempty.to_string()),
            ("self_term", m.mfvi.self_term.to_string()),
            ("alpha", m.alpha.to_string()),
            ("unary", unary.to_owned()),
            ("window", self.window.to_string()),
            ("no_pcrf", m.no_pcrf.to_string()),
            ("random_type_embeddings", m.random_embeddings.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("patience", t.patience.to_string()),
            ("learning_rate", o.learning_rate.to_string()),
            ("beta1", o.beta1.to_string()),
            ("beta2", o.beta2.to_string()),
            ("epsilon", o.epsilon.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("train_data", show_path(&self.train_data)),
            ("train_logits", show_path(&self.train_logits)),
            ("dev_data", show_path(&self.dev_data)),
            ("dev_logits", show_path(&self.dev_logits)),
            ("type_list", show_path(&self.type_list)),
            ("word_vectors", show_path(&self.word_vectors)),
            ("output", show_path(&self.output)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "ffn" => m.ffn = value.parse::<FfnKind>()?,
            "hidden" => m.hidden = parse(key, value)?,
            "rank" => m.rank = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "iterations" => m.mfvi.iterations = parse(key, value)?,
            "step_size" => m.mfvi.step_size = parse(key, value)?,
            "threshold" => m.mfvi.threshold = parse(key, value)?,
            "force_nonempty" => m.mfvi.force_nonempty = parse(key, value)?,
            "self_term" => m.mfvi.self_term = value.parse::<SelfTerm>()?,
            "alpha" => m.alpha = parse(key, value)?,
            "unary" => {
                m.unary = match value {
                    "precomputed" => UnaryKind::Precomputed,
                    "bag" => UnaryKind::Bag { window: self.window },
                    _ => return Err(Error::Config(format!("unknown unary source `{value}` (precomputed|bag)"))),
                }
            }
            "window" => {
                self.window = parse(key, value)?;
                if let UnaryKind::Bag { window } = &mut m.unary {
                    *window = self.window;
                }
            }
            "no_pcrf" => m.no_pcrf = parse(key, value)?,
            "random_type_embeddings" => m.random_embeddings = parse(key, value)?,
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "learning_rate" => t.optimizer.learning_rate = parse(key, value)?,
            "beta1" => t.optimizer.beta1 = parse(key, value)?,
            "beta2" => t.optimizer.beta2 = parse(key, value)?,
            "epsilon" => t.optimizer.epsilon = parse(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "train_data" => self.train_data = path_value(value),
            "train_logits" => self.train_logits = path_value(value),
            "dev_data" => self.dev_data = path_value(value),
            "dev_logits" => self.dev_logits = path_value(value),
            "type_list" => self.type_list = path_value(value),
            "word_vectors" => self.word_vectors = path_value(value),
            "output" => self.output = path_value(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.mfvi.validate()?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.model.rank == 0 && self.model.ffn != FfnKind::Identity {
            return bad("rank must be positive".into());
        }
        if self.model.alpha.is_nan() || self.model.alpha <= 0.0 {
            return bad(format!("alpha {} must be positive", self.model.alpha));
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        let o = &self.train.optimizer;
        if o.learning_rate.is_nan() || o.learning_rate <= 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer needs learning_rate > 0 and betas in [0, 1)".into());
        }
        Ok(())
    }

    /// The effective configuration in the file format.
    pub fn dump(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn mfvi(&self) -> MfviConfig {
        self.model.effective_mfvi()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        self.train.optimizer
    }
}
