//! Command-line pipeline over one flat work directory.
//!
//! Every command reads its settings from a [`RunConfig`]: defaults, then an
//! optional `--config` JSON file, then same-named flags. Artifacts live side
//! by side in the work directory under fixed names:
//!
//! | file | written by |
//! |------|------------|
//! | `mc.jsonl`, `sc.jsonl`, `database.jsonl`, `train_groups.jsonl`, `vocab.tsv` | `build-dataset` |
//! | `student_<mode>.ckpt` and its `.log.jsonl` | `train-student` |
//! | `teacher_<qc\|qs\|qr>.ckpt` and its `.log.jsonl` | `train-teacher` |
//! | `distilled_<mode>.ckpt` and its `.log.jsonl` | `distill` |
//! | `bm25_<field>.idx`, `<model>_<field>.emb`, `<model>_<field>.ivf` | `build-index` |
//! | `retrieval_<source>_<tag>_<queries>.jsonl` | `retrieve` |
//! | `eval_<source>_<tag>_<queries>.json` | `evaluate` |
//! | `sweep_<source>_<tag>.json` | `sweep-db` |
//! | `bench_<source>_<tag>.json` | `bench` |
//!
//! Artifact paths passed as flags are relative to the work directory; corpus,
//! distractor, query and config files are relative to the current directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::corpus::{self, DialoguePair, Field, SplitConfig, TrainGroup, Vocabulary};
use crate::dense::{default_nlist, EmbeddingShard, IvfIndex};
use crate::eval::{self, BigramLm, EvalInputs, Matching, DEFAULT_KS};
use crate::io;
use crate::models::{CrossScorer, Mode, ModelConfig, Student};
use crate::retrieval::{
    build_shard, build_sparse, Backend, DenseIndex, DqsIndexes, Fusion, ResponseTable,
    RetrievalResult, Retriever,
};
use crate::sparse::{Bm25Params, InvertedIndex};
use crate::synth::{generate_corpus, CorpusSpec};
use crate::training::{
    distill_student, encode_groups, train_student, train_teacher, EncodedGroup, TrainConfig,
    TrainReport,
};
use crate::Error;

pub type Result<T> = anyhow::Result<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub mc_size: usize,
    pub sc_size: usize,
    pub train_fraction: f64,
    pub max_mc_contexts: usize,
    /// Tokens seen fewer times than this map to the unknown token.
    pub min_freq: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        let s = SplitConfig::default();
        SplitSection {
            mc_size: s.mc_size,
            sc_size: s.sc_size,
            train_fraction: s.train_fraction,
            max_mc_contexts: s.max_mc_contexts,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// IVF list count; unset means the square root of the shard size.
    pub nlist: Option<usize>,
    /// Lists probed per query; unset means the square root of `nlist`.
    pub nprobe: Option<usize>,
    /// Response weight of decoupled matching at retrieval time.
    pub lambda: f64,
    /// Per-side candidate count of fused decoupled matching.
    pub k_prime: Option<usize>,
    /// Hits kept per query.
    pub depth: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection {
            nlist: None,
            nprobe: None,
            lambda: 1.0,
            k_prime: None,
            depth: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Compare responses verbatim instead of after normalization.
    pub exact_match: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: DEFAULT_KS.to_vec(),
            exact_match: false,
        }
    }
}

/// Everything a command may need. `seed` drives the split, initialization,
/// batch sampling and k-means alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub workdir: PathBuf,
    pub split: SplitSection,
    pub model: ModelConfig,
    /// Student training and distillation.
    pub train: TrainConfig,
    pub teacher: TrainConfig,
    pub bm25: Bm25Params,
    pub index: IndexSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: None,
            workdir: PathBuf::from("work"),
            split: SplitSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 60,
                lr: 2e-2,
                warmup_steps: 50,
                ..Default::default()
            },
            teacher: TrainConfig {
                epochs: 150,
                lr: 2e-3,
                warmup_steps: 50,
                ..Default::default()
            },
            bm25: Bm25Params::default(),
            index: IndexSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            mc_size: self.split.mc_size,
            sc_size: self.split.sc_size,
            train_fraction: self.split.train_fraction,
            max_mc_contexts: self.split.max_mc_contexts,
            seed: self.seed,
        }
    }

    /// Model settings sized to `vocab`.
    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        model_for_vocab(&self.model, vocab)
    }

    fn matching(&self) -> Matching {
        if self.eval.exact_match {
            Matching::Exact
        } else {
            Matching::Normalized
        }
    }
}

fn model_for_vocab(model: &ModelConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    if model.vocab_size != 0 && model.vocab_size != vocab.len() {
        return Err(Error::ConfigConflict {
            key: "model.vocab_size".into(),
            first: format!("run config: {}", model.vocab_size),
            second: format!("{}: {}", corpus::VOCAB_FILE, vocab.len()),
        }
        .into());
    }
    Ok(ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    })
}

macro_rules! overrides {
    ($( $(#[$attr:meta])* $name:ident : $ty:ty => $path:literal ),* $(,)?) => {
        /// Flags that override single config fields. Flags of the teacher
        /// section carry a `teacher-` prefix.
        #[derive(Args, Debug, Clone, Default)]
        pub struct Overrides {
            $( $(#[$attr])* #[arg(long, global = true)] pub $name: Option<$ty>, )*
        }

        impl Overrides {
            /// `(config path, flag, value)` for every flag given.
            fn entries(&self) -> Vec<(&'static str, String, Value)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$name {
                        let flag = format!("--{}", stringify!($name).replace('_', "-"));
                        out.push(($path, flag, serde_json::to_value(v).expect("plain value")));
                    }
                )*
                out
            }
        }
    };
}

overrides! {
    seed: u64 => "seed",
    corpus: PathBuf => "corpus",
    workdir: PathBuf => "workdir",
    mc_size: usize => "split.mc_size",
    sc_size: usize => "split.sc_size",
    train_fraction: f64 => "split.train_fraction",
    max_mc_contexts: usize => "split.max_mc_contexts",
    min_freq: usize => "split.min_freq",
    embed_dim: usize => "model.embed_dim",
    out_dim: usize => "model.out_dim",
    hidden_dim: usize => "model.hidden_dim",
    max_len: usize => "model.max_len",
    share_encoders: bool => "model.share_encoders",
    init_range: f64 => "model.init_range",
    batch_size: usize => "train.batch_size",
    epochs: usize => "train.epochs",
    max_steps: u64 => "train.max_steps",
    lr: f64 => "train.lr",
    warmup_steps: u64 => "train.warmup_steps",
    beta1: f64 => "train.beta1",
    beta2: f64 => "train.beta2",
    eps: f64 => "train.eps",
    temperature: f64 => "train.temperature",
    distill_rate: f64 => "train.distill_rate",
    hard_weight: f64 => "train.hard_weight",
    train_lambda: f64 => "train.lambda",
    #[arg(value_delimiter = ',')]
    kl_weights: Vec<f64> => "train.kl_weights",
    with_replacement: bool => "train.with_replacement",
    teacher_batch_size: usize => "teacher.teacher_batch_size",
    teacher_epochs: usize => "teacher.epochs",
    teacher_max_steps: u64 => "teacher.max_steps",
    teacher_lr: f64 => "teacher.lr",
    teacher_warmup_steps: u64 => "teacher.warmup_steps",
    k1: f64 => "bm25.k1",
    b: f64 => "bm25.b",
    nlist: usize => "index.nlist",
    nprobe: usize => "index.nprobe",
    lambda: f64 => "index.lambda",
    k_prime: usize => "index.k_prime",
    depth: usize => "index.depth",
    #[arg(value_delimiter = ',')]
    ks: Vec<usize> => "eval.ks",
    exact_match: bool => "eval.exact_match",
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().expect("object ensured above");
        if parts.peek().is_none() {
            obj.insert(part.to_owned(), value);
            return;
        }
        node = obj
            .entry(part.to_owned())
            .or_insert_with(|| Value::Object(Map::new()));
    }
}

/// Defaults, then the config file, then flags. Per-section seeds in the
/// file must agree with the run seed.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default())?;
    let mut from_file = Value::Object(Map::new());
    let source = file.map(|p| p.display().to_string()).unwrap_or_default();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        from_file = serde_json::from_str(&text)
            .with_context(|| format!("config {} is not valid JSON", path.display()))?;
        if !from_file.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        merge(&mut merged, &from_file);
    }
    let entries = overrides.entries();
    for (path, _, value) in &entries {
        set_path(&mut merged, path, value.clone());
    }
    let (seed, seed_source) = match entries.iter().find(|e| e.0 == "seed") {
        Some((_, flag, v)) => (v.as_u64().expect("u64 flag"), flag.clone()),
        None => match from_file.get("seed") {
            Some(v) => (
                v.as_u64()
                    .with_context(|| format!("seed in {source} must be a non-negative integer"))?,
                format!("seed in {source}"),
            ),
            None => (0, "default seed".to_string()),
        },
    };
    for section in ["model", "train", "teacher"] {
        if let Some(v) = from_file.get(section).and_then(|s| s.get("seed")) {
            if v.as_u64() != Some(seed) {
                return Err(Error::ConfigConflict {
                    key: format!("{section}.seed"),
                    first: format!("{source}: {v}"),
                    second: format!("{seed_source}: {seed}"),
                }
                .into());
            }
        }
        merged[section]["seed"] = Value::from(seed);
    }
    let cfg: RunConfig = serde_json::from_value(merged).context("invalid run config")?;
    cfg.train.validate().context("train section")?;
    cfg.teacher.validate().context("teacher section")?;
    cfg.bm25.validate()?;
    if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) {
        bail!("eval.ks must list positive cutoffs");
    }
    if cfg.index.depth == 0 {
        bail!("index.depth must be positive");
    }
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(
    name = "respsel",
    version,
    about = "Sparse and dense response retrieval with cross-encoder distillation"
)]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    AmbiguousNegatives,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic corpus as JSON lines.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
        #[arg(long)]
        responses: Option<usize>,
        /// Prefix of every generated word.
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long)]
        first_id: Option<u64>,
    },
    /// Filter the corpus and write the test sets, database, train groups and vocabulary.
    BuildDataset,
    /// Contrastive training of a multi-tower student.
    TrainStudent {
        #[arg(long, default_value = "qc")]
        mode: Mode,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BCE training of a cross scorer for one candidate field.
    TrainTeacher {
        #[arg(long)]
        field: Field,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue training a student against teacher soft targets.
    Distill {
        #[arg(long, default_value = "qc")]
        mode: Mode,
        /// Starting checkpoint; defaults to `student_<mode>.ckpt`.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Teacher checkpoints; default to `teacher_<qc|qs|qr>.ckpt` per field.
        #[arg(long = "teacher")]
        teachers: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Index one database field.
    BuildIndex {
        #[arg(long)]
        backend: Backend,
        #[arg(long)]
        field: Field,
        /// Student for dense backends; defaults to the student of the field's mode.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rank database pairs for every query.
    Retrieve {
        #[command(flatten)]
        target: Target,
        /// `mc`, `sc`, or a pairs file.
        #[arg(long, default_value = "mc")]
        queries: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage and proxy metrics from stored retrieval results.
    Evaluate {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "mc")]
        queries: String,
        /// Cross scorer for the relevance proxy.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage as distractor pairs are added to the database.
    SweepDb {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        distractors: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, default_value = "mc")]
        queries: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Wall-clock latency per batch of 32 queries.
    Bench {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value = "mc")]
        queries: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Target {
    #[arg(long, default_value = "qc")]
    pub mode: Mode,
    #[arg(long, default_value = "exact")]
    pub backend: Backend,
    /// Student checkpoint for dense backends; defaults to `student_<mode>.ckpt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Rank decoupled matches from the per-side top lists instead of every pair.
    #[arg(long)]
    pub fused: bool,
}

/// Resolved paths inside the work directory.
struct Workdir {
    root: PathBuf,
}

impl Workdir {
    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.root.join(name)
        }
    }

    fn require(&self, name: impl AsRef<Path>, hint: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            bail!(
                "missing artifact {} (run `respsel {hint}` first)",
                path.display()
            );
        }
        Ok(path)
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let path = self.require(corpus::VOCAB_FILE, "build-dataset")?;
        Ok(Vocabulary::load(&path)?)
    }

    fn train_groups(&self) -> Result<Vec<TrainGroup>> {
        let path = self.require(corpus::TRAIN_GROUPS_FILE, "build-dataset")?;
        Ok(io::read_jsonl(&path)?)
    }

    fn database(&self) -> Result<Vec<DialoguePair>> {
        let path = self.require(corpus::DATABASE_FILE, "build-dataset")?;
        let records: Vec<corpus::DatabaseRecord> = io::read_jsonl(&path)?;
        Ok(records.into_iter().map(DialoguePair::from).collect())
    }

    /// Query pairs and the short name used in output file names.
    fn queries(&self, spec: &str) -> Result<(Vec<DialoguePair>, String)> {
        let (path, name) = match spec {
            "mc" => (
                self.require(corpus::MC_FILE, "build-dataset")?,
                "mc".to_string(),
            ),
            "sc" => (
                self.require(corpus::SC_FILE, "build-dataset")?,
                "sc".to_string(),
            ),
            other => {
                let path = PathBuf::from(other);
                if !path.exists() {
                    bail!("missing query file {}", path.display());
                }
                (path.clone(), stem(&path))
            }
        };
        Ok((corpus::read_pairs(&path)?, name))
    }

    fn student(&self, path: &Path, vocab: &Vocabulary) -> Result<Student> {
        let path = self.require(path, "train-student")?;
        let student =
            Student::load(&path).with_context(|| format!("loading {}", path.display()))?;
        check_vocab(student.config(), vocab, &path)?;
        Ok(student)
    }

    fn teacher(&self, path: &Path, vocab: &Vocabulary) -> Result<CrossScorer> {
        let path = self.require(path, "train-teacher")?;
        let teacher =
            CrossScorer::load(&path).with_context(|| format!("loading {}", path.display()))?;
        check_vocab(teacher.config(), vocab, &path)?;
        Ok(teacher)
    }
}

fn check_vocab(cfg: &ModelConfig, vocab: &Vocabulary, path: &Path) -> Result<()> {
    if cfg.vocab_size != vocab.len() {
        return Err(Error::ConfigConflict {
            key: "vocab_size".into(),
            first: format!("{}: {}", path.display(), cfg.vocab_size),
            second: format!("{}: {}", corpus::VOCAB_FILE, vocab.len()),
        }
        .into());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn student_name(mode: Mode) -> PathBuf {
    PathBuf::from(format!("student_{mode}.ckpt"))
}

fn teacher_name(field: Field) -> PathBuf {
    PathBuf::from(format!("teacher_{}.ckpt", Mode::for_field(field)))
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.jsonl")
}

fn write_training(ckpt: &Path, report: &TrainReport) -> Result<()> {
    io::write_jsonl(&log_path(ckpt), &report.steps)?;
    println!(
        "wrote {} ({} steps, final loss {:.4})",
        ckpt.display(),
        report.steps.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    let wd = Workdir {
        root: cfg.workdir.clone(),
    };
    match cli.command {
        Command::GenCorpus {
            out,
            preset,
            responses,
            prefix,
            first_id,
        } => {
            let mut spec = match preset {
                Preset::Default => CorpusSpec::default(),
                Preset::AmbiguousNegatives => CorpusSpec::ambiguous_negatives(),
            };
            spec.seed = cfg.seed;
            spec.responses = responses.unwrap_or(spec.responses);
            spec.prefix = prefix.unwrap_or(spec.prefix);
            spec.first_id = first_id.unwrap_or(spec.first_id);
            let pairs = generate_corpus(&spec);
            corpus::write_pairs(&out, &pairs)?;
            println!("wrote {} ({} pairs)", out.display(), pairs.len());
        }
        Command::BuildDataset => build_dataset(&cfg, &wd)?,
        Command::TrainStudent { mode, init, out } => {
            let vocab = wd.vocab()?;
            let groups = encode_groups(&wd.train_groups()?, &vocab);
            let mut student = match &init {
                Some(path) => {
                    let s = wd.student(path, &vocab)?;
                    if s.mode() != mode {
                        bail!(
                            "{} holds a {} student, not {mode}",
                            path.display(),
                            s.mode()
                        );
                    }
                    s
                }
                None => Student::new(cfg.model_config(&vocab)?, mode)?,
            };
            let report = train_student(&mut student, &groups, &cfg.train)?;
            let path = wd.path(out.unwrap_or_else(|| student_name(mode)));
            student.save(&path)?;
            write_training(&path, &report)?;
        }
        Command::TrainTeacher { field, out } => {
            let vocab = wd.vocab()?;
            let groups = encode_groups(&wd.train_groups()?, &vocab);
            let mut teacher = CrossScorer::new(cfg.model_config(&vocab)?, field)?;
            let report = train_teacher(&mut teacher, &groups, &cfg.teacher)?;
            let path = wd.path(out.unwrap_or_else(|| teacher_name(field)));
            teacher.save(&path)?;
            write_training(&path, &report)?;
        }
        Command::Distill {
            mode,
            student,
            teachers,
            out,
        } => {
            let vocab = wd.vocab()?;
            let groups: Vec<EncodedGroup> = encode_groups(&wd.train_groups()?, &vocab);
            let mut s = wd.student(&student.unwrap_or_else(|| student_name(mode)), &vocab)?;
            if s.mode() != mode {
                bail!(
                    "starting checkpoint holds a {} student, not {mode}",
                    s.mode()
                );
            }
            let teacher_paths = if teachers.is_empty() {
                mode.fields().iter().map(|&f| teacher_name(f)).collect()
            } else {
                teachers
            };
            let loaded = teacher_paths
                .iter()
                .map(|p| wd.teacher(p, &vocab))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&CrossScorer> = loaded.iter().collect();
            let report = distill_student(&mut s, &refs, &groups, &cfg.train)?;
            let path =
                wd.path(out.unwrap_or_else(|| PathBuf::from(format!("distilled_{mode}.ckpt"))));
            s.save(&path)?;
            write_training(&path, &report)?;
        }
        Command::BuildIndex {
            backend,
            field,
            model,
        } => build_index(&cfg, &wd, backend, field, model)?,
        Command::Retrieve {
            target,
            queries,
            out,
        } => {
            let vocab = wd.vocab()?;
            let db = wd.database()?;
            let table = ResponseTable::from_pairs(&db)?;
            let (queries, qname) = wd.queries(&queries)?;
            let student = load_target_student(&wd, &target, &vocab)?;
            let retriever = disk_retriever(&cfg, &wd, &target, student.as_ref(), &vocab, &table)?;
            let results = retriever.retrieve_all(&queries, cfg.index.depth)?;
            let name = format!(
                "retrieval_{}_{}_{qname}.jsonl",
                source_label(&target),
                retriever.tag()
            );
            let path = wd.path(out.unwrap_or_else(|| PathBuf::from(name)));
            io::write_jsonl(&path, &results)?;
            println!("wrote {} ({} queries)", path.display(), results.len());
        }
        Command::Evaluate {
            results,
            queries,
            teacher,
            out,
        } => {
            let results_path = wd.require(&results, "retrieve")?;
            let results: Vec<RetrievalResult> = io::read_jsonl(&results_path)?;
            let vocab = wd.vocab()?;
            let (queries, qname) = wd.queries(&queries)?;
            let lm = BigramLm::from_train_groups(&wd.train_groups()?, &vocab)?;
            let teacher = teacher
                .as_ref()
                .map(|p| wd.teacher(p, &vocab))
                .transpose()?;
            let frozen = teacher.as_ref().map(CrossScorer::frozen);
            let config = json!({
                "results": file_name(&results_path),
                "queries": qname,
                "teacher": teacher.as_ref().map(|t| format!("{} cross scorer", t.field())),
                "matching": if cfg.eval.exact_match { "exact" } else { "normalized" },
            });
            let report = eval::evaluate(
                &results,
                &EvalInputs {
                    queries: &queries,
                    vocab: &vocab,
                    lm: Some(&lm),
                    teacher: frozen.as_ref(),
                    ks: &cfg.eval.ks,
                    matching: cfg.matching(),
                    config,
                },
            )?;
            let default = match stem(&results_path).strip_prefix("retrieval_") {
                Some(rest) => format!("eval_{rest}.json"),
                None => format!("eval_{}.json", stem(&results_path)),
            };
            let path = wd.path(out.unwrap_or_else(|| PathBuf::from(default)));
            fs::write(&path, report.to_json()?)
                .with_context(|| format!("cannot write {}", path.display()))?;
            print!("{}", report.to_text());
            println!("wrote {}", path.display());
        }
        Command::SweepDb {
            target,
            distractors,
            sizes,
            queries,
            out,
        } => {
            if target.backend == Backend::Ivf {
                bail!("sweep-db rebuilds its databases and supports the sparse and exact backends");
            }
            let vocab = wd.vocab()?;
            let base = wd.database()?;
            let (queries, _) = wd.queries(&queries)?;
            if !distractors.exists() {
                bail!("missing distractor file {}", distractors.display());
            }
            let golds: std::collections::HashSet<String> = queries
                .iter()
                .map(|q| corpus::normalize(&q.response))
                .collect();
            let pool: Vec<DialoguePair> = corpus::filter_pairs(&corpus::read_pairs(&distractors)?)
                .into_iter()
                .filter(|p| !golds.contains(&corpus::normalize(&p.response)))
                .collect();
            let taken: std::collections::HashSet<u64> = base.iter().map(|p| p.id).collect();
            if let Some(p) = pool.iter().find(|p| taken.contains(&p.id)) {
                bail!(
                    "distractor id {} already appears in the database; generate distractors with fresh ids (gen-corpus --first-id)",
                    p.id
                );
            }
            let student = load_target_student(&wd, &target, &vocab)?;
            let ks = &cfg.eval.ks;
            let depth = *ks.iter().max().expect("validated non-empty");
            let mut tag = String::new();
            let points = eval::db_size_sweep(&base, &pool, &sizes, &queries, ks, |db| {
                let table = ResponseTable::from_pairs(db)?;
                let retriever =
                    memory_retriever(&cfg, &target, db, student.as_ref(), &vocab, &table)?;
                tag = retriever.tag().to_string();
                retriever.retrieve_all(&queries, depth)
            })?;
            let name = format!("sweep_{}_{tag}.json", source_label(&target));
            let path = wd.path(out.unwrap_or_else(|| PathBuf::from(name)));
            write_json(&path, &points)?;
            for p in &points {
                println!("{:>8} distractors  {:?}", p.size, p.coverage);
            }
            println!("wrote {}", path.display());
        }
        Command::Bench {
            target,
            queries,
            repeats,
            out,
        } => {
            let vocab = wd.vocab()?;
            let db = wd.database()?;
            let table = ResponseTable::from_pairs(&db)?;
            let (queries, _) = wd.queries(&queries)?;
            let student = load_target_student(&wd, &target, &vocab)?;
            let retriever = disk_retriever(&cfg, &wd, &target, student.as_ref(), &vocab, &table)?;
            let stats = eval::bench_latency(&retriever, &queries, cfg.index.depth, repeats)?;
            let name = format!("bench_{}_{}.json", source_label(&target), retriever.tag());
            let path = wd.path(out.unwrap_or_else(|| PathBuf::from(name)));
            write_json(&path, &stats)?;
            println!(
                "{}: {:.3} ms per batch of {} (sd {:.3}, {} repeats)",
                retriever.tag(),
                stats.mean_ms,
                stats.batch_size,
                stats.stddev_ms,
                stats.repeats
            );
        }
    }
    Ok(())
}

fn build_dataset(cfg: &RunConfig, wd: &Workdir) -> Result<()> {
    let corpus_path = cfg
        .corpus
        .as_ref()
        .context("no corpus given: pass --corpus or set `corpus` in the config")?;
    if !corpus_path.exists() {
        bail!("missing corpus {}", corpus_path.display());
    }
    let raw = corpus::read_pairs(corpus_path)?;
    let pairs = corpus::dedup_pairs(&corpus::filter_pairs(&raw));
    let split = corpus::build_splits(&pairs, &cfg.split_config())?;
    let violations = corpus::check_split(&pairs, &split);
    if let Some(first) = violations.first() {
        bail!(
            "split invariants violated {} time(s), first: {first:?}",
            violations.len()
        );
    }
    fs::create_dir_all(&wd.root).with_context(|| format!("cannot create {}", wd.root.display()))?;
    split.save(&wd.root)?;
    let vocab = Vocabulary::from_pairs(&pairs, cfg.split.min_freq);
    vocab.save(&wd.path(corpus::VOCAB_FILE))?;
    println!(
        "kept {} of {} pairs: {} mc, {} sc, {} database, {} train groups, vocabulary {}",
        pairs.len(),
        raw.len(),
        split.mc_test.len(),
        split.sc_test.len(),
        split.database.len(),
        split.train_groups.len(),
        vocab.len()
    );
    Ok(())
}

fn dense_model(model: Option<&Path>, mode: Mode) -> PathBuf {
    model.map_or_else(|| student_name(mode), Path::to_path_buf)
}

fn build_index(
    cfg: &RunConfig,
    wd: &Workdir,
    backend: Backend,
    field: Field,
    model: Option<PathBuf>,
) -> Result<()> {
    let path = match backend {
        Backend::Sparse => {
            let index = build_sparse(&wd.database()?, field)?;
            let path = wd.path(format!("bm25_{field}.idx"));
            index.save(&path)?;
            path
        }
        Backend::Exact => {
            let vocab = wd.vocab()?;
            let model = dense_model(model.as_deref(), Mode::for_field(field));
            let student = wd.student(&model, &vocab)?;
            let shard = build_shard(&student, &vocab, &wd.database()?, field)?;
            let path = wd.path(format!("{}_{field}.emb", stem(&model)));
            shard.save(&path)?;
            path
        }
        Backend::Ivf => {
            let model = dense_model(model.as_deref(), Mode::for_field(field));
            let shard_name = format!("{}_{field}.emb", stem(&model));
            let shard = EmbeddingShard::load(&wd.require(
                &shard_name,
                &format!("build-index --backend exact --field {field}"),
            )?)?;
            let nlist = cfg
                .index
                .nlist
                .unwrap_or_else(|| default_nlist(shard.len()));
            let mut index = IvfIndex::build(&shard, nlist, cfg.seed)?;
            if let Some(nprobe) = cfg.index.nprobe {
                index.set_default_nprobe(nprobe)?;
            }
            let path = wd.path(format!("{}_{field}.ivf", stem(&model)));
            index.save(&path)?;
            path
        }
    };
    println!("wrote {}", path.display());
    Ok(())
}

fn source_label(target: &Target) -> String {
    match target.backend {
        Backend::Sparse => "bm25".to_string(),
        _ => stem(&dense_model(target.model.as_deref(), target.mode)),
    }
}

fn load_target_student(
    wd: &Workdir,
    target: &Target,
    vocab: &Vocabulary,
) -> Result<Option<Student>> {
    if target.backend == Backend::Sparse {
        return Ok(None);
    }
    let path = dense_model(target.model.as_deref(), target.mode);
    let student = wd.student(&path, vocab)?;
    let covers = student.mode() == target.mode
        || (student.mode() == Mode::Dqs && matches!(target.mode, Mode::Qc | Mode::Qr));
    if !covers {
        bail!(
            "{} holds a {} student, not {}",
            path.display(),
            student.mode(),
            target.mode
        );
    }
    Ok(Some(student))
}

fn single_field(mode: Mode) -> Result<Field> {
    match mode.fields() {
        [f] => Ok(*f),
        _ => bail!("{mode} retrieval needs dense indexes of both fields"),
    }
}

fn fusion(cfg: &RunConfig, target: &Target) -> Fusion {
    if target.fused || target.backend == Backend::Ivf {
        Fusion::Fused {
            k_prime: cfg.index.k_prime,
        }
    } else {
        Fusion::Exact
    }
}

/// A retriever over indexes written by `build-index`.
fn disk_retriever<'a>(
    cfg: &RunConfig,
    wd: &Workdir,
    target: &Target,
    student: Option<&'a Student>,
    vocab: &'a Vocabulary,
    table: &'a ResponseTable,
) -> Result<Retriever<'a>> {
    let model = stem(&dense_model(target.model.as_deref(), target.mode));
    let shard = |field: Field| -> Result<EmbeddingShard> {
        let name = format!("{model}_{field}.emb");
        let hint = format!("build-index --backend exact --field {field}");
        Ok(EmbeddingShard::load(&wd.require(&name, &hint)?)?)
    };
    let ivf = |field: Field| -> Result<IvfIndex> {
        let name = format!("{model}_{field}.ivf");
        let hint = format!("build-index --backend ivf --field {field}");
        Ok(IvfIndex::load(&wd.require(&name, &hint)?)?)
    };
    let retriever = match (target.backend, student) {
        (Backend::Sparse, _) => {
            let field = single_field(target.mode)?;
            let path = wd.require(
                format!("bm25_{field}.idx"),
                &format!("build-index --backend sparse --field {field}"),
            )?;
            Retriever::sparse(InvertedIndex::load(&path)?, cfg.bm25, table)?
        }
        (_, None) => bail!("dense retrieval needs a student"),
        (backend, Some(student)) if target.mode == Mode::Dqs => {
            let mut indexes = DqsIndexes::new(
                shard(Field::Context)?,
                shard(Field::Response)?,
                cfg.index.lambda,
            )?;
            if backend == Backend::Ivf {
                let (ci, ri) = (ivf(Field::Context)?, ivf(Field::Response)?);
                let nprobe = cfg.index.nprobe.unwrap_or_else(|| ci.default_nprobe());
                indexes = indexes.with_ivf(ci, ri, nprobe)?;
            }
            Retriever::dqs(indexes, fusion(cfg, target), student, vocab, table)?
        }
        (Backend::Exact, Some(student)) => {
            let field = single_field(target.mode)?;
            Retriever::dense(
                field,
                DenseIndex::Exact(shard(field)?),
                student,
                vocab,
                table,
            )?
        }
        (Backend::Ivf, Some(student)) => {
            let field = single_field(target.mode)?;
            let index = ivf(field)?;
            let nprobe = cfg.index.nprobe.unwrap_or_else(|| index.default_nprobe());
            Retriever::dense(
                field,
                DenseIndex::Ivf { index, nprobe },
                student,
                vocab,
                table,
            )?
        }
    };
    Ok(retriever)
}

/// A retriever over `db`, indexed in memory.
fn memory_retriever<'a>(
    cfg: &RunConfig,
    target: &Target,
    db: &[DialoguePair],
    student: Option<&'a Student>,
    vocab: &'a Vocabulary,
    table: &'a ResponseTable,
) -> crate::Result<Retriever<'a>> {
    match student {
        None => {
            let field = single_field(target.mode).map_err(|e| Error::invalid(e.to_string()))?;
            Retriever::sparse(build_sparse(db, field)?, cfg.bm25, table)
        }
        Some(student) if target.mode == Mode::Dqs => {
            let indexes = DqsIndexes::new(
                build_shard(student, vocab, db, Field::Context)?,
                build_shard(student, vocab, db, Field::Response)?,
                cfg.index.lambda,
            )?;
            Retriever::dqs(indexes, fusion(cfg, target), student, vocab, table)
        }
        Some(student) => {
            let field = single_field(target.mode).map_err(|e| Error::invalid(e.to_string()))?;
            Retriever::dense(
                field,
                DenseIndex::Exact(build_shard(student, vocab, db, field)?),
                student,
                vocab,
                table,
            )
        }
    }
}
