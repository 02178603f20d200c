//! Tower encoders for the dual/three-tower students and a one-block
//! cross-attention scorer used as the teacher.
//!
//! A tower maps a token sequence to `tanh(mean(E[tokens]) · W + b)`. The
//! teacher reads `query ⊕ [SEP] ⊕ candidate` with token, segment and position
//! embeddings, runs one residual self-attention block, and feeds the first
//! position through a `linear → tanh → linear` head to a single logit.
//!
//! Both model kinds persist as flat JSON checkpoints: one key per parameter
//! holding `{"shape": [r, c], "data": [...]}`, plus `format_version` and the
//! `config` the model was built from.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{self, matmul, ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Field, SEP_ID};
use crate::error::{Error, Result};
use crate::io;

pub const FORMAT_VERSION: u64 = 1;

/// Shortest joint sequence the teacher must accept: a maximal context, a
/// separator and a maximal response.
pub const MIN_MAX_LEN: usize = 128 + 64 + 1;

const INIT_RANGE: f64 = 0.05;

/// What a student matches the query against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Qc,
    Qs,
    Qr,
    Dqs,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Qc, Mode::Qs, Mode::Qr, Mode::Dqs];

    /// Candidate fields scored by this mode, in a fixed order.
    pub fn fields(self) -> &'static [Field] {
        match self {
            Mode::Qc => &[Field::Context],
            Mode::Qs => &[Field::Session],
            Mode::Qr => &[Field::Response],
            Mode::Dqs => &[Field::Context, Field::Response],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Qc => "qc",
            Mode::Qs => "qs",
            Mode::Qr => "qr",
            Mode::Dqs => "dqs",
        }
    }

    /// The single-field mode that matches against `field`.
    pub fn for_field(field: Field) -> Mode {
        match field {
            Field::Context => Mode::Qc,
            Field::Session => Mode::Qs,
            Field::Response => Mode::Qr,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?} (qc|qs|qr|dqs)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Context,
    Response,
    Session,
}

impl Role {
    pub fn for_field(field: Field) -> Role {
        match field {
            Field::Context => Role::Context,
            Field::Session => Role::Session,
            Field::Response => Role::Response,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Context => "context",
            Role::Response => "response",
            Role::Session => "session",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub share_encoders: bool,
    pub seed: u64,
    /// Weights and embeddings start uniform in `(-init_range, init_range)`.
    pub init_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 64,
            out_dim: 64,
            hidden_dim: 64,
            max_len: 512,
            share_encoders: false,
            seed: 0,
            init_range: INIT_RANGE,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid(
                "vocab_size must cover the two reserved tokens",
            ));
        }
        if self.embed_dim == 0 || self.out_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::invalid("init_range must be positive and finite"));
        }
        if self.max_len < MIN_MAX_LEN {
            return Err(Error::invalid(format!(
                "max_len {} is below the minimum joint length {MIN_MAX_LEN}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Dot-product similarity.
pub fn similarity(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::DimMismatch {
            expected: q.len(),
            got: k.len(),
        });
    }
    Ok(autodiff::dot(q, k))
}

fn uniform(rng: &mut ChaCha8Rng, range: f64, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-range..range))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Parameter handles of one tower inside its owner's store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tower {
    pub embedding: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
}

impl Tower {
    fn init(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Tower {
            embedding: store.add(
                format!("{name}.embedding"),
                uniform(rng, cfg.init_range, cfg.vocab_size, cfg.embed_dim),
            )?,
            proj: store.add(
                format!("{name}.proj"),
                uniform(rng, cfg.init_range, cfg.embed_dim, cfg.out_dim),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, cfg.out_dim))?,
        })
    }

    fn check_tokens(&self, store: &ParamStore, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let vocab = store.value(self.embedding).rows();
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Tape-free forward pass. Bit-identical to [`Tower::encode_batch`].
    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(store, tokens)?;
        let table = store.value(self.embedding);
        let mut mean = vec![0.0; table.cols()];
        for &t in tokens {
            for (m, v) in mean.iter_mut().zip(table.row(t as usize)) {
                *m += v;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let z = matmul(&Tensor::row_vector(mean), store.value(self.proj))?;
        let bias = store.value(self.bias).data();
        Ok(z.data()
            .iter()
            .zip(bias)
            .map(|(z, b)| (z + b).tanh())
            .collect())
    }

    /// Encodes every sequence on the tape; returns an n x d matrix.
    pub fn encode_batch(&self, tape: &mut Tape<'_>, seqs: &[&[u32]]) -> Result<Var> {
        let table = tape.param(self.embedding);
        let mut means = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::EmptySequence);
            }
            let rows = tape.gather_rows(table, seq)?;
            means.push(tape.row_mean(rows)?);
        }
        let pooled = tape.concat_rows(&means)?;
        let w = tape.param(self.proj);
        let b = tape.param(self.bias);
        let z = tape.matmul(pooled, w)?;
        let z = tape.add_row(z, b)?;
        Ok(tape.tanh(z))
    }
}

fn check_finite(store: &ParamStore) -> Result<()> {
    match store.iter().find(|p| !p.value.is_finite()) {
        Some(p) => Err(Error::NonFinite(format!("parameter {}", p.name))),
        None => Ok(()),
    }
}

/// Multi-tower student: a query tower plus one tower per candidate field.
#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    config: ModelConfig,
    mode: Mode,
    store: ParamStore,
    towers: Vec<(Role, Tower)>,
}

impl Student {
    pub fn new(config: ModelConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let query = Tower::init(&mut store, "query", &config, &mut rng)?;
        let mut towers = vec![(Role::Query, query)];
        for &field in mode.fields() {
            let role = Role::for_field(field);
            let tower = if config.share_encoders && role != Role::Response {
                query
            } else {
                Tower::init(&mut store, role.as_str(), &config, &mut rng)?
            };
            towers.push((role, tower));
        }
        Ok(Student {
            config,
            mode,
            store,
            towers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tower(&self, role: Role) -> Result<Tower> {
        self.towers
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "{} student has no {} tower",
                    self.mode,
                    role.as_str()
                ))
            })
    }

    pub fn encode(&self, role: Role, tokens: &[u32]) -> Result<Vec<f64>> {
        self.tower(role)?.encode(&self.store, tokens)
    }

    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.encode(Role::Query, tokens)
    }

    pub fn encode_field(&self, field: Field, tokens: &[u32]) -> Result<Vec<f64>> {
        self.encode(Role::for_field(field), tokens)
    }

    fn config_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.config).expect("plain struct");
        v["kind"] = Value::from("student");
        v["mode"] = Value::from(self.mode.as_str());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.config_value(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, params) = read_checkpoint(path)?;
        let (kind, mode, cfg) = split_config(config)?;
        if kind != "student" {
            return Err(Error::format(
                "checkpoint",
                format!("expected a student, found {kind}"),
            ));
        }
        let mode = mode
            .ok_or_else(|| Error::format("checkpoint", "student config lacks a mode"))?
            .parse()?;
        let mut model = Student::new(cfg, mode)?;
        restore(&mut model.store, params)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ScorerParams {
    token: ParamId,
    segment: ParamId,
    position: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One-tower teacher scoring a concatenated (query, candidate) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossScorer {
    config: ModelConfig,
    field: Field,
    store: ParamStore,
    p: ScorerParams,
}

/// Joint token ids and segment ids for `query ⊕ [SEP] ⊕ candidate`.
pub fn joint_sequence(query: &[u32], candidate: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut tokens = Vec::with_capacity(query.len() + 1 + candidate.len());
    tokens.extend_from_slice(query);
    tokens.push(SEP_ID);
    tokens.extend_from_slice(candidate);
    let mut segments = vec![0u32; query.len() + 1];
    segments.resize(tokens.len(), 1);
    (tokens, segments)
}

impl CrossScorer {
    pub fn new(config: ModelConfig, field: Field) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (de, dh) = (config.embed_dim, config.hidden_dim);
        let mut s = ParamStore::new();
        let p = ScorerParams {
            token: s.add(
                "teacher.token",
                uniform(&mut rng, config.init_range, config.vocab_size, de),
            )?,
            segment: s.add(
                "teacher.segment",
                uniform(&mut rng, config.init_range, 2, de),
            )?,
            position: s.add(
                "teacher.position",
                uniform(&mut rng, config.init_range, config.max_len, de),
            )?,
            wq: s.add("teacher.wq", uniform(&mut rng, config.init_range, de, de))?,
            wk: s.add("teacher.wk", uniform(&mut rng, config.init_range, de, de))?,
            wv: s.add("teacher.wv", uniform(&mut rng, config.init_range, de, de))?,
            wo: s.add("teacher.wo", uniform(&mut rng, config.init_range, de, de))?,
            w1: s.add("teacher.w1", uniform(&mut rng, config.init_range, de, dh))?,
            b1: s.add("teacher.b1", Tensor::zeros(1, dh))?,
            w2: s.add("teacher.w2", uniform(&mut rng, config.init_range, dh, 1))?,
            b2: s.add("teacher.b2", Tensor::zeros(1, 1))?,
        };
        Ok(CrossScorer {
            config,
            field,
            store: s,
            p,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The candidate field this teacher was trained to score.
    pub fn field(&self) -> Field {
        self.field
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_joint(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Logits for every (query, candidate) pair as a P x 1 column.
    pub fn score_batch(&self, tape: &mut Tape<'_>, pairs: &[(&[u32], &[u32])]) -> Result<Var> {
        let p = self.p;
        let token = tape.param(p.token);
        let segment = tape.param(p.segment);
        let position = tape.param(p.position);
        let (wq, wk, wv, wo) = (
            tape.param(p.wq),
            tape.param(p.wk),
            tape.param(p.wv),
            tape.param(p.wo),
        );
        let (w1, b1, w2, b2) = (
            tape.param(p.w1),
            tape.param(p.b1),
            tape.param(p.w2),
            tape.param(p.b2),
        );
        let scale = 1.0 / (self.config.embed_dim as f64).sqrt();
        let mut logits = Vec::with_capacity(pairs.len());
        for (q, c) in pairs {
            let (tokens, segments) = joint_sequence(q, c);
            self.check_joint(&tokens)?;
            let positions: Vec<u32> = (0..tokens.len() as u32).collect();
            let t = tape.gather_rows(token, &tokens)?;
            let s = tape.gather_rows(segment, &segments)?;
            let pos = tape.gather_rows(position, &positions)?;
            let x = tape.add(t, s)?;
            let x = tape.add(x, pos)?;
            let x0 = tape.slice_rows(x, 0, 1)?;
            let q0 = tape.matmul(x0, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let att = tape.matmul_nt(q0, k)?;
            let att = tape.scalar_mul(att, scale);
            let att = tape.masked_softmax(att, &vec![true; tokens.len()])?;
            let mixed = tape.matmul(att, v)?;
            let mixed = tape.matmul(mixed, wo)?;
            let h0 = tape.add(x0, mixed)?;
            let h = tape.matmul(h0, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.tanh(h);
            let out = tape.matmul(h, w2)?;
            logits.push(tape.add_row(out, b2)?);
        }
        tape.concat_rows(&logits)
    }

    /// Logit for one pair.
    pub fn score(&self, query: &[u32], candidate: &[u32]) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let out = self.score_batch(&mut tape, &[(query, candidate)])?;
        Ok(tape.value(out).item())
    }

    /// Inference-only view with the attention projections folded into the
    /// embedding tables.
    pub fn frozen(&self) -> FrozenScorer {
        FrozenScorer::new(self)
    }

    fn config_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.config).expect("plain struct");
        v["kind"] = Value::from("teacher");
        v["field"] = Value::from(self.field.as_str());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.config_value(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut config, params) = read_checkpoint(path)?;
        let field = config
            .as_object_mut()
            .and_then(|o| o.remove("field"))
            .and_then(|v| v.as_str().map(str::to_owned))
            .ok_or_else(|| Error::format("checkpoint", "teacher config lacks a field"))?
            .parse()?;
        let (kind, _, cfg) = split_config(config)?;
        if kind != "teacher" {
            return Err(Error::format(
                "checkpoint",
                format!("expected a teacher, found {kind}"),
            ));
        }
        let mut model = CrossScorer::new(cfg, field)?;
        restore(&mut model.store, params)?;
        Ok(model)
    }
}

/// Read-only teacher with `E·W_q`, `E·W_k`, `E·W_v` precomputed for the
/// token, segment and position tables. Scoring a pair is linear in its
/// length and allocation-light.
#[derive(Debug, Clone)]
pub struct FrozenScorer {
    dim: usize,
    max_len: usize,
    vocab: usize,
    scale: f64,
    // Each table holds q, k, v projections side by side: rows x 3d.
    token: Tensor,
    segment: Tensor,
    position: Tensor,
    // Raw position-0 inputs are needed for the residual.
    token_raw: Tensor,
    segment_raw: Tensor,
    position_raw: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

fn project_qkv(table: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Tensor {
    let q = matmul(table, wq).expect("conforming");
    let k = matmul(table, wk).expect("conforming");
    let v = matmul(table, wv).expect("conforming");
    let d = wq.cols();
    let mut out = Tensor::zeros(table.rows(), 3 * d);
    for r in 0..table.rows() {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(q.row(r));
        row[d..2 * d].copy_from_slice(k.row(r));
        row[2 * d..].copy_from_slice(v.row(r));
    }
    out
}

impl FrozenScorer {
    pub fn new(t: &CrossScorer) -> Self {
        let s = &t.store;
        let p = t.p;
        let (wq, wk, wv) = (s.value(p.wq), s.value(p.wk), s.value(p.wv));
        FrozenScorer {
            dim: t.config.embed_dim,
            max_len: t.config.max_len,
            vocab: t.config.vocab_size,
            scale: 1.0 / (t.config.embed_dim as f64).sqrt(),
            token: project_qkv(s.value(p.token), wq, wk, wv),
            segment: project_qkv(s.value(p.segment), wq, wk, wv),
            position: project_qkv(s.value(p.position), wq, wk, wv),
            token_raw: s.value(p.token).clone(),
            segment_raw: s.value(p.segment).clone(),
            position_raw: s.value(p.position).clone(),
            wo: s.value(p.wo).clone(),
            w1: s.value(p.w1).clone(),
            b1: s.value(p.b1).data().to_vec(),
            w2: s.value(p.w2).data().to_vec(),
            b2: s.value(p.b2).item(),
        }
    }

    pub fn score(&self, query: &[u32], candidate: &[u32]) -> Result<f64> {
        let n = query.len() + 1 + candidate.len();
        if n > self.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.max_len,
            });
        }
        if let Some(&id) = query
            .iter()
            .chain(candidate)
            .find(|&&t| t as usize >= self.vocab)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab,
            });
        }
        let d = self.dim;
        let joint = query
            .iter()
            .chain(std::iter::once(&SEP_ID))
            .chain(candidate);
        let seg_of = |j: usize| usize::from(j > query.len());

        let first = *joint.clone().next().expect("joint sequence is never empty") as usize;
        let mut q0 = vec![0.0; d];
        for (k, qv) in q0.iter_mut().enumerate() {
            *qv = self.token.get(first, k) + self.segment.get(0, k) + self.position.get(0, k);
        }

        let mut logits = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * d);
        for (j, &tok) in joint.enumerate() {
            let (tr, sr, pr) = (
                self.token.row(tok as usize),
                self.segment.row(seg_of(j)),
                self.position.row(j),
            );
            let mut logit = 0.0;
            for k in 0..d {
                logit += q0[k] * (tr[d + k] + sr[d + k] + pr[d + k]);
            }
            logits.push(logit * self.scale);
            for k in 0..d {
                values.push(tr[2 * d + k] + sr[2 * d + k] + pr[2 * d + k]);
            }
        }
        let weights = autodiff::softmax(&logits);
        let mut mixed = vec![0.0; d];
        for (j, w) in weights.iter().enumerate() {
            for (m, v) in mixed.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                *m += w * v;
            }
        }
        let mixed = matmul(&Tensor::row_vector(mixed), &self.wo)?;
        let h0: Vec<f64> = (0..d)
            .map(|k| {
                self.token_raw.get(first, k)
                    + self.segment_raw.get(0, k)
                    + self.position_raw.get(0, k)
                    + mixed.data()[k]
            })
            .collect();
        let hidden = matmul(&Tensor::row_vector(h0), &self.w1)?;
        let mut out = self.b2;
        for ((h, b), w) in hidden.data().iter().zip(&self.b1).zip(&self.w2) {
            out += (h + b).tanh() * w;
        }
        Ok(out)
    }
}

fn write_checkpoint(path: &Path, config: Value, store: &ParamStore) -> Result<()> {
    check_finite(store)?;
    let mut root = Map::new();
    root.insert("format_version".into(), Value::from(FORMAT_VERSION));
    root.insert("config".into(), config);
    for p in store.iter() {
        let (r, c) = p.value.shape();
        let data: Vec<Value> = p.value.data().iter().map(|&v| Value::from(v)).collect();
        let mut entry = Map::new();
        entry.insert("data".into(), Value::Array(data));
        entry.insert("shape".into(), serde_json::json!([r, c]));
        root.insert(p.name.clone(), Value::Object(entry));
    }
    let mut w = BufWriter::new(io::create(path)?);
    serde_json::to_writer(&mut w, &Value::Object(root))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Value, Map<String, Value>)> {
    let reader = BufReader::new(io::open(path)?);
    let root: Value = serde_json::from_reader(reader)?;
    let Value::Object(mut root) = root else {
        return Err(Error::format("checkpoint", "top level is not an object"));
    };
    let version = root
        .remove("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("checkpoint", "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let config = root
        .remove("config")
        .ok_or_else(|| Error::format("checkpoint", "missing config"))?;
    Ok((config, root))
}

fn split_config(mut config: Value) -> Result<(String, Option<String>, ModelConfig)> {
    let obj = config
        .as_object_mut()
        .ok_or_else(|| Error::format("checkpoint", "config is not an object"))?;
    let take_str = |obj: &mut Map<String, Value>, key: &str| {
        obj.remove(key).and_then(|v| v.as_str().map(str::to_owned))
    };
    let kind =
        take_str(obj, "kind").ok_or_else(|| Error::format("checkpoint", "config lacks kind"))?;
    let mode = take_str(obj, "mode");
    let cfg: ModelConfig = serde_json::from_value(config)?;
    Ok((kind, mode, cfg))
}

fn restore(store: &mut ParamStore, mut params: Map<String, Value>) -> Result<()> {
    let expected: BTreeSet<String> = store.iter().map(|p| p.name.clone()).collect();
    let unknown: Vec<String> = params
        .keys()
        .filter(|k| !expected.contains(*k))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownParameters(unknown));
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|k| !params.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingParameters(missing));
    }
    for name in expected {
        let id = store.id(&name).expect("name from store");
        let entry = params.remove(&name).expect("checked above");
        let tensor = parse_tensor(&name, entry)?;
        let current = store.value(id).shape();
        if tensor.shape() != current {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                left: current,
                right: tensor.shape(),
            });
        }
        store.get_mut(id).value = tensor;
    }
    Ok(())
}

fn parse_tensor(name: &str, entry: Value) -> Result<Tensor> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        shape: (usize, usize),
        data: Vec<f64>,
    }
    let e: Entry = serde_json::from_value(entry)
        .map_err(|err| Error::format("checkpoint", format!("parameter {name}: {err}")))?;
    Tensor::from_vec(e.shape.0, e.shape.1, e.data).map_err(|_| {
        Error::format(
            "checkpoint",
            format!("parameter {name}: data length does not match shape"),
        )
    })
}
