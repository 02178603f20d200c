//! Tokenization, length filtering, and construction of the train groups,
//! multi-context (MC) / single-context (SC) test sets, and candidate database.
//!
//! Test-set construction: every response with more than one context donates
//! one randomly chosen context as an MC query and leaves the rest in the
//! database; responses with a single context are SC candidates. Final MC/SC
//! sets are seeded random samples of the requested sizes. Train groups are
//! carved out first and their contexts never reach the database.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
pub const UNK_ID: u32 = 0;
pub const SEP_ID: u32 = 1;

pub const MIN_CONTEXT_WORDS: usize = 5;
pub const MAX_CONTEXT_WORDS: usize = 128;
pub const MIN_RESPONSE_WORDS: usize = 5;
pub const MAX_RESPONSE_WORDS: usize = 64;
pub const MAX_MC_CONTEXTS: usize = 50;

/// A recorded context (ordered utterances) and the response that followed it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialoguePair {
    pub id: u64,
    pub context: Vec<String>,
    pub response: String,
}

impl DialoguePair {
    pub fn context_words(&self) -> usize {
        self.context.iter().map(|u| tokenize(u).len()).sum()
    }

    pub fn response_words(&self) -> usize {
        tokenize(&self.response).len()
    }
}

/// Context and response concatenated into a single candidate document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub pair_id: u64,
    pub text: String,
}

impl Session {
    pub fn from_pair(pair: &DialoguePair) -> Self {
        let mut parts: Vec<&str> = pair.context.iter().map(String::as_str).collect();
        parts.push(&pair.response);
        Session {
            pair_id: pair.id,
            text: parts.join(&format!(" {SEP} ")),
        }
    }
}

/// One database row as written to `database.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseRecord {
    pub id: u64,
    pub context: Vec<String>,
    pub response: String,
    pub session: String,
}

impl From<&DialoguePair> for DatabaseRecord {
    fn from(p: &DialoguePair) -> Self {
        DatabaseRecord {
            id: p.id,
            context: p.context.clone(),
            response: p.response.clone(),
            session: Session::from_pair(p).text,
        }
    }
}

impl From<DatabaseRecord> for DialoguePair {
    fn from(r: DatabaseRecord) -> Self {
        DialoguePair {
            id: r.id,
            context: r.context,
            response: r.response,
        }
    }
}

/// Which side of a database pair is indexed and matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Context,
    Session,
    Response,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Context, Field::Session, Field::Response];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Context => "context",
            Field::Session => "session",
            Field::Response => "response",
        }
    }

    pub(crate) fn to_code(self) -> u8 {
        match self {
            Field::Context => 0,
            Field::Session => 1,
            Field::Response => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.to_code() == code)
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!("unknown field {s:?} (context|session|response)"))
            })
    }
}

impl DialoguePair {
    /// Plain word tokens of one field, without separators, for term matching.
    pub fn words(&self, field: Field) -> Vec<String> {
        let ctx = || self.context.iter().flat_map(|u| tokenize(u));
        match field {
            Field::Context => ctx().collect(),
            Field::Session => ctx().chain(tokenize(&self.response)).collect(),
            Field::Response => tokenize(&self.response),
        }
    }

    /// Vocabulary ids of one field, with separators, for the encoders.
    pub fn encode(&self, field: Field, vocab: &Vocabulary) -> Vec<u32> {
        match field {
            Field::Context => vocab.encode_context(&self.context),
            Field::Session => vocab.encode_session(&self.context, &self.response),
            Field::Response => vocab.encode_text(&self.response),
        }
    }
}

/// A response together with all of its distinct contexts (at least two).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainGroup {
    pub response: String,
    pub contexts: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResult {
    pub mc_test: Vec<DialoguePair>,
    pub sc_test: Vec<DialoguePair>,
    pub database: Vec<DialoguePair>,
    pub train_groups: Vec<TrainGroup>,
}

/// Lowercases, splits on whitespace, and strips leading/trailing
/// non-alphanumeric characters from every token. Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn tokenize_ids(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode(&tokenize(text))
}

/// Utterance tokens joined by the separator token.
pub fn context_tokens(utterances: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            out.push(SEP.to_owned());
        }
        out.extend(tokenize(u));
    }
    out
}

/// Context tokens, separator, response tokens.
pub fn session_tokens(context: &[String], response: &str) -> Vec<String> {
    let mut out = context_tokens(context);
    out.push(SEP.to_owned());
    out.extend(tokenize(response));
    out
}

/// Normalized form used for string-level response matching.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Token to id map with `[UNK]` = 0 and `[SEP]` = 1 reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK || tokens[1] != SEP {
            return Err(Error::format(
                "vocabulary",
                "ids 0 and 1 must be [UNK] and [SEP]",
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(
                    "vocabulary",
                    format!("duplicate token {t:?}"),
                ));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a, I>(streams: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for stream in streams {
            for t in stream {
                if t != SEP && t != UNK {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![UNK.to_owned(), SEP.to_owned()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_owned()));
        Self::from_tokens(tokens).expect("reserved tokens are in place")
    }

    /// Vocabulary over every context and response of the given pairs.
    pub fn from_pairs(pairs: &[DialoguePair], min_freq: usize) -> Self {
        let streams: Vec<Vec<String>> = pairs
            .iter()
            .map(|p| session_tokens(&p.context, &p.response))
            .collect();
        Self::build(streams.iter().map(Vec::as_slice), min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_context(&self, utterances: &[String]) -> Vec<u32> {
        self.encode(&context_tokens(utterances))
    }

    pub fn encode_session(&self, context: &[String], response: &str) -> Vec<u32> {
        self.encode(&session_tokens(context, response))
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize_ids(text, self)
    }

    /// Writes `token<TAB>id` lines sorted by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(io::create(path)?);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(io::open(path)?);
        let mut tokens = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| {
                Error::format("vocabulary", format!("line {}: no tab", lineno + 1))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format("vocabulary", format!("line {}: bad id", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::format(
                    "vocabulary",
                    format!("line {}: id {id} out of order", lineno + 1),
                ));
            }
            tokens.push(tok.to_owned());
        }
        Self::from_tokens(tokens)
    }
}

/// Keeps pairs whose context has [5, 128) words and response [5, 64) words.
pub fn filter_pairs(pairs: &[DialoguePair]) -> Vec<DialoguePair> {
    pairs
        .iter()
        .filter(|p| {
            !p.context.is_empty()
                && (MIN_CONTEXT_WORDS..MAX_CONTEXT_WORDS).contains(&p.context_words())
                && (MIN_RESPONSE_WORDS..MAX_RESPONSE_WORDS).contains(&p.response_words())
        })
        .cloned()
        .collect()
}

/// Drops rows whose (context, response) already appeared; first occurrence wins.
pub fn dedup_pairs(pairs: &[DialoguePair]) -> Vec<DialoguePair> {
    let mut seen: HashSet<(&[String], &str)> = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert((p.context.as_slice(), p.response.as_str())))
        .cloned()
        .collect()
}

/// Groups pairs by exact response string in order of first appearance.
fn group_by_response(pairs: &[DialoguePair]) -> Vec<(&str, Vec<&DialoguePair>)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<&DialoguePair>)> = Vec::new();
    for p in pairs {
        let slot = *index.entry(p.response.as_str()).or_insert_with(|| {
            groups.push((p.response.as_str(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(p);
    }
    groups
}

/// One group per response with at least two distinct contexts.
pub fn build_train_groups(pairs: &[DialoguePair]) -> Vec<TrainGroup> {
    group_by_response(pairs)
        .into_iter()
        .filter_map(|(response, members)| {
            let mut seen = HashSet::new();
            let contexts: Vec<Vec<String>> = members
                .iter()
                .filter(|p| seen.insert(p.context.as_slice()))
                .map(|p| p.context.clone())
                .collect();
            (contexts.len() >= 2).then(|| TrainGroup {
                response: response.to_owned(),
                contexts,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mc_size: usize,
    pub sc_size: usize,
    /// Fraction of multi-context responses reserved as train groups.
    pub train_fraction: f64,
    pub max_mc_contexts: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mc_size: 200,
            sc_size: 200,
            train_fraction: 0.5,
            max_mc_contexts: MAX_MC_CONTEXTS,
            seed: 0,
        }
    }
}

/// Builds train groups, MC/SC test sets and the candidate database from
/// already filtered pairs. Deterministic under `cfg.seed`.
pub fn build_splits(pairs: &[DialoguePair], cfg: &SplitConfig) -> Result<SplitResult> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::invalid(format!(
            "train_fraction {} outside [0, 1]",
            cfg.train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = dedup_pairs(pairs);

    // Source multiplicity per response, counted over distinct contexts.
    let groups = group_by_response(&pairs);
    let source_count: HashMap<&str, usize> = groups
        .iter()
        .map(|(r, members)| {
            let distinct: HashSet<&[String]> =
                members.iter().map(|p| p.context.as_slice()).collect();
            (*r, distinct.len())
        })
        .collect();

    // Reserve train responses before anything reaches the database.
    let mut multi: Vec<&str> = groups
        .iter()
        .filter(|(r, _)| source_count[r] >= 2)
        .map(|(r, _)| *r)
        .collect();
    multi.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * multi.len() as f64).round() as usize;
    let train_responses: HashSet<&str> = multi[..n_train].iter().copied().collect();

    let train_groups: Vec<TrainGroup> = build_train_groups(
        &pairs
            .iter()
            .filter(|p| train_responses.contains(p.response.as_str()))
            .cloned()
            .collect::<Vec<_>>(),
    );
    let train_contexts: HashSet<&[String]> = train_groups
        .iter()
        .flat_map(|g| g.contexts.iter().map(Vec::as_slice))
        .collect();

    let remaining: Vec<&DialoguePair> = pairs
        .iter()
        .filter(|p| !train_responses.contains(p.response.as_str()))
        .filter(|p| !train_contexts.contains(p.context.as_slice()))
        .collect();

    // Test-set candidates over what is left.
    let mut by_response: Vec<(&str, Vec<&DialoguePair>)> = Vec::new();
    {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for &p in &remaining {
            let slot = *index.entry(p.response.as_str()).or_insert_with(|| {
                by_response.push((p.response.as_str(), Vec::new()));
                by_response.len() - 1
            });
            by_response[slot].1.push(p);
        }
    }
    let mut mc_candidates: Vec<&DialoguePair> = Vec::new();
    let mut sc_candidates: Vec<&DialoguePair> = Vec::new();
    for (response, members) in &by_response {
        let source = source_count[response];
        if members.len() >= 2 && source <= cfg.max_mc_contexts {
            mc_candidates.push(members.choose(&mut rng).copied().expect("non-empty"));
        } else if members.len() == 1 && source == 1 {
            sc_candidates.push(members[0]);
        }
    }

    if mc_candidates.len() < cfg.mc_size {
        return Err(Error::Insufficient(format!(
            "requested {} MC pairs but only {} responses are eligible (short by {})",
            cfg.mc_size,
            mc_candidates.len(),
            cfg.mc_size - mc_candidates.len()
        )));
    }
    if sc_candidates.len() < cfg.sc_size {
        return Err(Error::Insufficient(format!(
            "requested {} SC pairs but only {} responses are eligible (short by {})",
            cfg.sc_size,
            sc_candidates.len(),
            cfg.sc_size - sc_candidates.len()
        )));
    }

    let mut mc_test: Vec<DialoguePair> = mc_candidates
        .choose_multiple(&mut rng, cfg.mc_size)
        .map(|p| (*p).clone())
        .collect();
    let mut sc_test: Vec<DialoguePair> = sc_candidates
        .choose_multiple(&mut rng, cfg.sc_size)
        .map(|p| (*p).clone())
        .collect();
    mc_test.sort_by_key(|p| p.id);
    sc_test.sort_by_key(|p| p.id);

    let test_ids: HashSet<u64> = mc_test.iter().chain(&sc_test).map(|p| p.id).collect();
    let mut database: Vec<DialoguePair> = remaining
        .into_iter()
        .filter(|p| !test_ids.contains(&p.id))
        .cloned()
        .collect();
    database.sort_by_key(|p| p.id);

    Ok(SplitResult {
        mc_test,
        sc_test,
        database,
        train_groups,
    })
}

/// A single invariant breach found by [`check_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    McWithoutResidual { pair_id: u64 },
    ScWithResidual { pair_id: u64 },
    TrainContextInDatabase { pair_id: u64 },
    McMultiplicity { pair_id: u64, count: usize },
    TestPairInDatabase { pair_id: u64 },
}

/// Exhaustively checks the split invariants against the filtered source pairs.
pub fn check_split(source: &[DialoguePair], split: &SplitResult) -> Vec<SplitViolation> {
    let mut db_responses: HashMap<&str, usize> = HashMap::new();
    let mut db_ids = HashSet::new();
    for p in &split.database {
        *db_responses.entry(p.response.as_str()).or_default() += 1;
        db_ids.insert(p.id);
    }
    let mut source_contexts: HashMap<&str, HashSet<&[String]>> = HashMap::new();
    for p in source {
        source_contexts
            .entry(p.response.as_str())
            .or_default()
            .insert(p.context.as_slice());
    }
    let train_contexts: HashSet<&[String]> = split
        .train_groups
        .iter()
        .flat_map(|g| g.contexts.iter().map(Vec::as_slice))
        .collect();

    let mut out = Vec::new();
    for p in &split.mc_test {
        if db_responses.get(p.response.as_str()).copied().unwrap_or(0) == 0 {
            out.push(SplitViolation::McWithoutResidual { pair_id: p.id });
        }
        let count = source_contexts
            .get(p.response.as_str())
            .map_or(0, HashSet::len);
        if !(2..=MAX_MC_CONTEXTS).contains(&count) {
            out.push(SplitViolation::McMultiplicity {
                pair_id: p.id,
                count,
            });
        }
        if db_ids.contains(&p.id) {
            out.push(SplitViolation::TestPairInDatabase { pair_id: p.id });
        }
    }
    for p in &split.sc_test {
        if db_responses.get(p.response.as_str()).copied().unwrap_or(0) != 0 {
            out.push(SplitViolation::ScWithResidual { pair_id: p.id });
        }
        if db_ids.contains(&p.id) {
            out.push(SplitViolation::TestPairInDatabase { pair_id: p.id });
        }
    }
    for p in &split.database {
        if train_contexts.contains(p.context.as_slice()) {
            out.push(SplitViolation::TrainContextInDatabase { pair_id: p.id });
        }
    }
    out
}

/// File names of the four split outputs inside a work directory.
pub const MC_FILE: &str = "mc.jsonl";
pub const SC_FILE: &str = "sc.jsonl";
pub const DATABASE_FILE: &str = "database.jsonl";
pub const TRAIN_GROUPS_FILE: &str = "train_groups.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";

impl SplitResult {
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_jsonl(&dir.join(MC_FILE), &self.mc_test)?;
        io::write_jsonl(&dir.join(SC_FILE), &self.sc_test)?;
        let records: Vec<DatabaseRecord> = self.database.iter().map(DatabaseRecord::from).collect();
        io::write_jsonl(&dir.join(DATABASE_FILE), &records)?;
        io::write_jsonl(&dir.join(TRAIN_GROUPS_FILE), &self.train_groups)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let database: Vec<DatabaseRecord> = io::read_jsonl(&dir.join(DATABASE_FILE))?;
        Ok(SplitResult {
            mc_test: io::read_jsonl(&dir.join(MC_FILE))?,
            sc_test: io::read_jsonl(&dir.join(SC_FILE))?,
            database: database.into_iter().map(DialoguePair::from).collect(),
            train_groups: io::read_jsonl(&dir.join(TRAIN_GROUPS_FILE))?,
        })
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<DialoguePair>> {
    io::read_jsonl(path)
}

pub fn write_pairs(path: &Path, pairs: &[DialoguePair]) -> Result<()> {
    io::write_jsonl(path, pairs)
}
