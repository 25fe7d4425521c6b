//! Command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::bench::{run_bench, BenchConfig, DEFAULT_BENCH_RANK, DEFAULT_SIZES};
use crate::config::RunConfig;
use crate::dataset::{load_jsonl, TypeVocabulary, TypingInstance};
use crate::embeddings::{embed_types, load_word_vectors, random_type_embeddings, EmbeddingSource, WordVectorTable};
use crate::error::Error;
use crate::metrics::TypeSet;
use crate::synth::{generate, SynthConfig};
use crate::training::{evaluate, train, Checkpoint, EpochLog, NpcrfModel, UnaryKind, UnarySource};
use crate::unary::LogitsTable;

#[derive(Debug, Parser)]
#[command(name = "npcrf", version, about = "Low-rank pairwise CRF head for multi-label typing")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a model and write a checkpoint, log and effective config.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled split.
    Eval(EvalArgs),
    /// Write predicted type sets for a split.
    Predict(PredictArgs),
    /// Export learned potential sub-matrices for named types.
    Inspect(InspectArgs),
    /// Time one inference iteration across label-set sizes.
    Bench(BenchArgs),
    /// Generate the synthetic correlated benchmark.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training split (JSONL).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Unary logits for the training split. Defaults to `<stem>.logits.jsonl`.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub dev_logits: Option<PathBuf>,
    /// Type-list file fixing label ids. Defaults to a sibling `types.txt` if present.
    #[arg(long)]
    pub type_list: Option<PathBuf>,
    /// GloVe-format word vectors for type phrases.
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    #[arg(long)]
    pub random_type_embeddings: bool,
    /// Unary-only baseline (no inference iterations).
    #[arg(long)]
    pub no_pcrf: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub ffn: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub self_term: Option<String>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to `<stem>.logits.jsonl`.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Needed when the checkpoint uses the bag encoder.
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    /// Must match the checkpoint vocabulary when given.
    #[arg(long)]
    pub type_list: Option<PathBuf>,
    /// Override the number of inference iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub force_nonempty: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for `report.json` and `report.txt`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Type names, repeated or comma-separated.
    #[arg(long = "types", value_delimiter = ',', required = true)]
    pub types: Vec<String>,
    /// Directory for the CSV files.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES.to_vec())]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_BENCH_RANK)]
    pub rank: usize,
    #[arg(long, default_value_t = BenchConfig::default().repeats)]
    pub repeats: usize,
    #[arg(long, default_value_t = BenchConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().train)]
    pub train: usize,
    #[arg(long, default_value_t = SynthConfig::default().dev)]
    pub dev: usize,
    #[arg(long, default_value_t = SynthConfig::default().test)]
    pub test: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// `data/train.jsonl` -> `data/train.logits.jsonl`.
pub fn sibling_logits(dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}.logits.jsonl"))
}

fn sibling_types(dataset: &Path) -> Option<PathBuf> {
    let p = dataset.with_file_name("types.txt");
    p.exists().then_some(p)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn train_overrides(a: &TrainArgs) -> anyhow::Result<Vec<(String, String)>> {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_owned(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    put("train_data", path(&a.dataset));
    put("train_logits", path(&a.logits));
    put("dev_data", path(&a.dev));
    put("dev_logits", path(&a.dev_logits));
    put("type_list", path(&a.type_list));
    put("word_vectors", path(&a.word_vectors));
    put("output", path(&a.output));
    put("random_type_embeddings", a.random_type_embeddings.then(|| "true".into()));
    put("no_pcrf", a.no_pcrf.then(|| "true".into()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("iterations", a.iterations.map(|v| v.to_string()));
    put("step_size", a.step_size.map(|v| v.to_string()));
    put("rank", a.rank.map(|v| v.to_string()));
    put("hidden", a.hidden.map(|v| v.to_string()));
    put("ffn", a.ffn.clone());
    put("dropout", a.dropout.map(|v| v.to_string()));
    put("alpha", a.alpha.map(|v| v.to_string()));
    put("learning_rate", a.learning_rate.map(|v| v.to_string()));
    put("weight_decay", a.weight_decay.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("patience", a.patience.map(|v| v.to_string()));
    put("embedding_dim", a.embedding_dim.map(|v| v.to_string()));
    put("self_term", a.self_term.clone());
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("`--set {kv}`: expected KEY=VALUE"))?;
        o.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(o)
}

/// Instances plus whichever unary source the model needs.
struct Split {
    instances: Vec<TypingInstance>,
    logits: Option<LogitsTable>,
}

impl Split {
    fn source<'a>(&'a self, words: Option<&'a WordVectorTable>, kind: UnaryKind) -> anyhow::Result<UnarySource<'a>> {
        Ok(match kind {
            UnaryKind::Precomputed => UnarySource::Logits(self.logits.as_ref().context("no logits loaded")?),
            UnaryKind::Bag { .. } => UnarySource::Words(words.context("the bag encoder needs --word-vectors")?),
        })
    }
}

fn load_split(
    data: &Path,
    logits: Option<&Path>,
    vocab: &TypeVocabulary,
    kind: UnaryKind,
) -> anyhow::Result<Split> {
    let (instances, _) = load_jsonl(data, Some(vocab)).map_err(|e| match e {
        Error::UnknownLabel(label) => anyhow::anyhow!(
            "vocabulary mismatch: `{}` uses label `{label}`, which the model vocabulary does not contain",
            data.display()
        ),
        e => e.into(),
    })?;
    let logits = match kind {
        UnaryKind::Precomputed => {
            let path = logits.map(Path::to_path_buf).unwrap_or_else(|| sibling_logits(data));
            Some(LogitsTable::load(&path, vocab.len()).with_context(|| format!("loading logits {}", path.display()))?)
        }
        UnaryKind::Bag { .. } => None,
    };
    Ok(Split { instances, logits })
}

#[derive(Serialize)]
struct TrainLog<'a> {
    model: String,
    embedding_source: &'static str,
    fallback_rows: usize,
    seed: u64,
    best_epoch: usize,
    epochs: &'a [EpochLog],
}

pub fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let overrides = train_overrides(&a)?;
    let refs: Vec<(&str, String)> = overrides.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let cfg = RunConfig::resolve(a.config.as_deref(), &refs)?;
    let Some(train_path) = cfg.train_data.clone() else {
        bail!("usage error: `train_data` is required (--dataset)");
    };
    if !cfg.model.random_embeddings && cfg.word_vectors.is_none() {
        bail!("usage error: `word_vectors` is required unless --random-type-embeddings is set");
    }
    let out_dir = cfg.output.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_file(&out_dir.join("config.txt"), &cfg.dump())?;

    let type_list = cfg.type_list.clone().or_else(|| sibling_types(&train_path));
    let vocab = match &type_list {
        Some(p) => TypeVocabulary::from_type_list(p)?,
        None => load_jsonl(&train_path, None)?.1,
    };
    let words = match &cfg.word_vectors {
        Some(p) => Some(load_word_vectors(p)?),
        None => None,
    };
    let kind = cfg.model.unary;
    let train_split = load_split(&train_path, cfg.train_logits.as_deref(), &vocab, kind)?;
    let dev_split = match &cfg.dev_data {
        Some(p) => load_split(p, cfg.dev_logits.as_deref(), &vocab, kind)?,
        None => {
            warn!("no dev split given; early stopping uses the training split");
            load_split(&train_path, cfg.train_logits.as_deref(), &vocab, kind)?
        }
    };

    let seed = cfg.train.seed;
    let emb = match (&words, cfg.model.random_embeddings) {
        (Some(w), false) => embed_types(&vocab, w, seed),
        _ => random_type_embeddings(vocab.len(), cfg.embedding_dim, seed)?,
    };
    if emb.fallback_rows > 0 {
        warn!("{} of {} types had no word vectors", emb.fallback_rows, vocab.len());
    }
    let model = NpcrfModel::init(cfg.model.clone(), emb.matrix, words.as_ref().map(|w| w.dim()), seed)?;
    info!("{}", cfg.model.describe());

    let outcome = train(
        model,
        &train_split.instances,
        train_split.source(words.as_ref(), kind)?,
        &dev_split.instances,
        dev_split.source(words.as_ref(), kind)?,
        &cfg.train,
    )?;
    Checkpoint {
        vocab,
        model: outcome.best,
    }
    .save(&out_dir.join("model.ckpt"))?;
    let log = TrainLog {
        model: cfg.model.describe(),
        embedding_source: match emb.source {
            EmbeddingSource::Pretrained => "pretrained",
            EmbeddingSource::Random => "random",
        },
        fallback_rows: emb.fallback_rows,
        seed,
        best_epoch: outcome.best_epoch,
        epochs: &outcome.log,
    };
    write_file(&out_dir.join("train_log.json"), &serde_json::to_string_pretty(&log)?)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

/// Loads the checkpoint and split, applying inference overrides.
fn prepare(d: &DataArgs) -> anyhow::Result<(Checkpoint, Split, Option<WordVectorTable>)> {
    let mut ck = Checkpoint::load(&d.checkpoint)?;
    if let Some(p) = &d.type_list {
        let given = TypeVocabulary::from_type_list(p)?;
        if given != ck.vocab {
            bail!(
                "vocabulary mismatch: `{}` has {} types, the checkpoint has {} (or their order differs)",
                p.display(),
                given.len(),
                ck.vocab.len()
            );
        }
    }
    let m = &mut ck.model.config.mfvi;
    if let Some(t) = d.iterations {
        m.iterations = t;
    }
    if let Some(t) = d.threshold {
        m.threshold = t;
    }
    if d.force_nonempty {
        m.force_nonempty = true;
    }
    m.validate()?;
    let words = match &d.word_vectors {
        Some(p) => Some(load_word_vectors(p)?),
        None => None,
    };
    let split = load_split(&d.dataset, d.logits.as_deref(), &ck.vocab, ck.model.config.unary)?;
    Ok((ck, split, words))
}

pub fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let (ck, split, words) = prepare(&a.data)?;
    let source = split.source(words.as_ref(), ck.model.config.unary)?;
    let report = evaluate(&ck.model, &split.instances, source)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &a.output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.json"), &report.to_json())?;
        write_file(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    types: Vec<&'a str>,
}

pub fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let (ck, split, words) = prepare(&a.data)?;
    let source = split.source(words.as_ref(), ck.model.config.unary)?;
    let trajectories = ck.model.predict_all(&split.instances, source)?;
    let mut out = String::new();
    for (inst, traj) in split.instances.iter().zip(&trajectories) {
        let pred: TypeSet = ck.model.decode_final(traj);
        let row = Prediction {
            id: &inst.id,
            types: pred.iter().filter_map(|&j| ck.vocab.phrase(j)).collect(),
        };
        out += &serde_json::to_string(&row)?;
        out.push('\n');
    }
    match &a.output {
        Some(p) => write_file(p, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// Up to three vocabulary entries closest to `name`.
pub fn near_matches<'a>(name: &str, vocab: &'a TypeVocabulary) -> Vec<&'a str> {
    let mut scored: Vec<(f64, &str)> = vocab
        .phrases()
        .iter()
        .map(|p| (strsim::jaro_winkler(name, p), p.as_str()))
        .filter(|(s, _)| *s >= 0.7)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, p)| p).collect()
}

/// Resolves names to ids, dropping repeats with a warning.
pub fn resolve_types(names: &[String], vocab: &TypeVocabulary) -> anyhow::Result<Vec<usize>> {
    let mut seen = BTreeSet::new();
    let mut ids = Vec::new();
    for name in names.iter().map(|n| n.trim()).filter(|n| !n.is_empty()) {
        if !seen.insert(name) {
            warn!("type `{name}` listed more than once; keeping the first");
            continue;
        }
        match vocab.id(name) {
            Some(id) => ids.push(id),
            None => {
                let near = near_matches(name, vocab);
                if near.is_empty() {
                    bail!("unknown type `{name}`; no similar types in the vocabulary");
                }
                bail!("unknown type `{name}`; did you mean: {}", near.join(", "));
            }
        }
    }
    if ids.is_empty() {
        bail!("no type names given");
    }
    Ok(ids)
}

fn matrix_csv(names: &[&str], m: &ndarray::Array2<f64>) -> String {
    let mut s = String::from("type");
    for n in names {
        s += &format!(",{n}");
    }
    s.push('\n');
    for (name, row) in names.iter().zip(m.rows()) {
        s += name;
        for x in row {
            s += &format!(",{x}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ids = resolve_types(&a.types, &ck.vocab)?;
    let sub = ck.model.factors()?.recover_submatrices(&ids)?;
    let names: Vec<&str> = ids.iter().filter_map(|&j| ck.vocab.phrase(j)).collect();
    let mats = [
        ("theta00", &sub.theta00),
        ("theta01", &sub.theta01),
        ("theta10", &sub.theta10),
        ("theta11", &sub.theta11),
    ];
    for (label, m) in mats {
        let csv = matrix_csv(&names, m);
        match &a.output {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_file(&dir.join(format!("{label}.csv")), &csv)?;
            }
            None => print!("# {label}\n{csv}\n"),
        }
    }
    let sym = sub.symmetry_error();
    let tr = sub.transpose_error();
    println!("types: {}", names.join(", "));
    println!("symmetry error (theta00, theta11): {sym:.3e}");
    println!(
        "theta01 - theta10^T max abs: {tr:.3e} ({})",
        if tr == 0.0 { "verified" } else { "MISMATCH" }
    );
    Ok(())
}

pub fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        sizes: a.sizes,
        rank: a.rank,
        repeats: a.repeats,
        iterations: a.iterations,
        seed: a.seed,
    };
    let report = run_bench(&cfg)?;
    print!("{}", report.to_table());
    println!("scaling: {}", if report.scaling_ok() { "ok" } else { "FAILED" });
    if let Some(p) = &a.output {
        write_file(p, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

pub fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        train: a.train,
        dev: a.dev,
        test: a.test,
        ..Default::default()
    };
    let bench = generate(&cfg)?;
    let files = bench.write(&a.output)?;
    write_file(&a.output.join("synth.json"), &serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} types and {}/{}/{} instances to {}",
        bench.vocab.len(),
        cfg.train,
        cfg.dev,
        cfg.test,
        files.types.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}
