//! Coarse retrievers over the response database: BM25 or dense matching of a
//! query against contexts, sessions or responses, and decoupled matching
//! that adds the context and response similarities of each pair.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialoguePair, Field, Vocabulary};
use crate::dense::{dot32, top_k, EmbeddingShard, IvfIndex};
use crate::error::{Error, Result};
use crate::models::{Mode, Role, Student};
use crate::sparse::{Bm25Params, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sparse,
    Exact,
    Ivf,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Sparse => "sparse",
            Backend::Exact => "exact",
            Backend::Ivf => "ivf",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Backend::Sparse),
            "exact" => Ok(Backend::Exact),
            "ivf" => Ok(Backend::Ivf),
            _ => Err(Error::invalid(format!(
                "unknown backend {s:?} (sparse|exact|ivf)"
            ))),
        }
    }
}

/// Pair id to response text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResponseTable {
    responses: HashMap<u64, String>,
}

impl ResponseTable {
    pub fn from_pairs(pairs: &[DialoguePair]) -> Result<Self> {
        let mut responses = HashMap::with_capacity(pairs.len());
        for p in pairs {
            if responses.insert(p.id, p.response.clone()).is_some() {
                return Err(Error::DuplicateId(p.id));
            }
        }
        Ok(ResponseTable { responses })
    }

    pub fn get(&self, id: u64) -> Result<&str> {
        self.responses
            .get(&id)
            .map(String::as_str)
            .ok_or(Error::UnknownDoc(id))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub pair_id: u64,
    pub response: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub mode: String,
    pub hits: Vec<Hit>,
    pub elapsed_ms: f64,
    /// Candidate vectors or postings scored for this query.
    pub scanned: usize,
}

impl RetrievalResult {
    pub fn responses(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.response.as_str())
    }
}

/// Builds the BM25 index of one database field.
pub fn build_sparse(db: &[DialoguePair], field: Field) -> Result<InvertedIndex> {
    InvertedIndex::build(db.iter().map(|p| (p.id, p.words(field))), field)
}

/// Encodes one database field with the student tower for that field.
pub fn build_shard(
    student: &Student,
    vocab: &Vocabulary,
    db: &[DialoguePair],
    field: Field,
) -> Result<EmbeddingShard> {
    let tower = student.tower(Role::for_field(field))?;
    let docs: Vec<(u64, Vec<u32>)> = db.iter().map(|p| (p.id, p.encode(field, vocab))).collect();
    EmbeddingShard::precompute(student.config().out_dim, &docs, |t| {
        tower.encode(student.store(), t)
    })
}

/// A dense index searched exhaustively or through IVF lists.
#[derive(Debug, Clone, PartialEq)]
pub enum DenseIndex {
    Exact(EmbeddingShard),
    Ivf { index: IvfIndex, nprobe: usize },
}

impl DenseIndex {
    pub fn dim(&self) -> usize {
        match self {
            DenseIndex::Exact(s) => s.dim(),
            DenseIndex::Ivf { index, .. } => index.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DenseIndex::Exact(s) => s.len(),
            DenseIndex::Ivf { index, .. } => index.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-k hits and the number of vectors scored.
    pub fn search(&self, q: &[f64], k: usize) -> Result<(Vec<(u64, f64)>, usize)> {
        match self {
            DenseIndex::Exact(s) => Ok((s.exact_topk(q, k)?, s.len())),
            DenseIndex::Ivf { index, nprobe } => {
                let found = index.search(q, k, *nprobe)?;
                Ok((found.hits, found.scanned))
            }
        }
    }
}

/// How decoupled matching ranks pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Score every pair.
    Exact,
    /// Union of the top `k_prime` of each side, completed from the shards
    /// and re-ranked. `None` means ten times the requested K.
    Fused { k_prime: Option<usize> },
}

/// Context and response embeddings of the same pairs, in the same row order,
/// with optional IVF indexes for the fused mode.
#[derive(Debug, Clone)]
pub struct DqsIndexes {
    context: EmbeddingShard,
    response: EmbeddingShard,
    ivf: Option<(IvfIndex, IvfIndex, usize)>,
    rows: HashMap<u64, usize>,
    pub lambda: f64,
}

impl DqsIndexes {
    pub fn new(context: EmbeddingShard, response: EmbeddingShard, lambda: f64) -> Result<Self> {
        if context.dim() != response.dim() {
            return Err(Error::DimMismatch {
                expected: context.dim(),
                got: response.dim(),
            });
        }
        if context.ids() != response.ids() {
            return Err(Error::invalid(
                "context and response shards are not aligned to the same pair ids",
            ));
        }
        let rows = context
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        Ok(DqsIndexes {
            context,
            response,
            ivf: None,
            rows,
            lambda,
        })
    }

    /// Serves the per-side candidate lists of the fused mode from IVF.
    pub fn with_ivf(
        mut self,
        context: IvfIndex,
        response: IvfIndex,
        nprobe: usize,
    ) -> Result<Self> {
        let ids = |ivf: &IvfIndex| -> BTreeSet<u64> {
            (0..ivf.nlist())
                .flat_map(|c| ivf.list_ids(c).iter().copied())
                .collect()
        };
        let expected: BTreeSet<u64> = self.context.ids().iter().copied().collect();
        if ids(&context) != expected || ids(&response) != expected {
            return Err(Error::invalid(
                "IVF indexes do not cover the shard pair ids",
            ));
        }
        self.ivf = Some((context, response, nprobe));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.context.dim()
    }

    /// Context and response similarity of pair `id`.
    pub fn pair_scores(&self, q: &[f64], id: u64) -> Result<(f64, f64)> {
        let &row = self.rows.get(&id).ok_or(Error::UnknownDoc(id))?;
        Ok((
            dot32(q, self.context.row(row)),
            dot32(q, self.response.row(row)),
        ))
    }

    fn combine(&self, c: f64, r: f64) -> f64 {
        c + self.lambda * r
    }

    pub fn exact(&self, q: &[f64], k: usize) -> Result<(Vec<(u64, f64)>, usize)> {
        if q.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: q.len(),
            });
        }
        let hits = (0..self.len())
            .map(|i| {
                let score = self.combine(
                    dot32(q, self.context.row(i)),
                    dot32(q, self.response.row(i)),
                );
                (self.context.ids()[i], score)
            })
            .collect();
        Ok((top_k(hits, k), 2 * self.len()))
    }

    pub fn fused(&self, q: &[f64], k: usize, k_prime: usize) -> Result<(Vec<(u64, f64)>, usize)> {
        let (ctx, resp, mut scanned) = match &self.ivf {
            Some((ci, ri, nprobe)) => {
                let a = ci.search(q, k_prime, *nprobe)?;
                let b = ri.search(q, k_prime, *nprobe)?;
                (a.hits, b.hits, a.scanned + b.scanned)
            }
            None => (
                self.context.exact_topk(q, k_prime)?,
                self.response.exact_topk(q, k_prime)?,
                2 * self.len(),
            ),
        };
        let union: BTreeSet<u64> = ctx.iter().chain(&resp).map(|h| h.0).collect();
        let mut hits = Vec::with_capacity(union.len());
        for id in union {
            let (c, r) = self.pair_scores(q, id)?;
            hits.push((id, self.combine(c, r)));
        }
        scanned += hits.len();
        Ok((top_k(hits, k), scanned))
    }
}

#[allow(clippy::large_enum_variant)]
enum Searcher {
    Sparse {
        index: InvertedIndex,
        params: Bm25Params,
    },
    Dense {
        field: Field,
        index: DenseIndex,
    },
    Dqs {
        indexes: DqsIndexes,
        fusion: Fusion,
    },
}

/// One configured retriever. Dense variants hold the student whose query
/// tower encodes incoming queries.
pub struct Retriever<'a> {
    searcher: Searcher,
    encoder: Option<(&'a Student, &'a Vocabulary)>,
    responses: &'a ResponseTable,
    tag: String,
}

impl<'a> Retriever<'a> {
    pub fn sparse(
        index: InvertedIndex,
        params: Bm25Params,
        responses: &'a ResponseTable,
    ) -> Result<Self> {
        params.validate()?;
        let tag = format!("sparse-{}", Mode::for_field(index.field()));
        Ok(Retriever {
            searcher: Searcher::Sparse { index, params },
            encoder: None,
            responses,
            tag,
        })
    }

    pub fn dense(
        field: Field,
        index: DenseIndex,
        student: &'a Student,
        vocab: &'a Vocabulary,
        responses: &'a ResponseTable,
    ) -> Result<Self> {
        check_dim(student, index.dim())?;
        let backend = match index {
            DenseIndex::Exact(_) => Backend::Exact,
            DenseIndex::Ivf { .. } => Backend::Ivf,
        };
        Ok(Retriever {
            searcher: Searcher::Dense { field, index },
            encoder: Some((student, vocab)),
            responses,
            tag: format!("{backend}-{}", Mode::for_field(field)),
        })
    }

    pub fn dqs(
        indexes: DqsIndexes,
        fusion: Fusion,
        student: &'a Student,
        vocab: &'a Vocabulary,
        responses: &'a ResponseTable,
    ) -> Result<Self> {
        check_dim(student, indexes.dim())?;
        let tag = match fusion {
            Fusion::Exact => "exact-dqs",
            Fusion::Fused { .. } => "fused-dqs",
        };
        Ok(Retriever {
            searcher: Searcher::Dqs { indexes, fusion },
            encoder: Some((student, vocab)),
            responses,
            tag: tag.to_string(),
        })
    }

    /// Mode tag written with each result, e.g. `exact-qs` or `sparse-qc`.
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn field(&self) -> Option<Field> {
        match &self.searcher {
            Searcher::Sparse { index, .. } => Some(index.field()),
            Searcher::Dense { field, .. } => Some(*field),
            Searcher::Dqs { .. } => None,
        }
    }

    /// Query embedding for dense retrievers.
    pub fn encode_query(&self, context: &[String]) -> Result<Vec<f64>> {
        let (student, vocab) = self
            .encoder
            .ok_or_else(|| Error::invalid("sparse retrievers do not embed queries"))?;
        student.encode_query(&vocab.encode_context(context))
    }

    /// Ranked `(pair_id, score)` hits for an already-encoded query.
    pub fn search_vector(&self, q: &[f64], k: usize) -> Result<(Vec<(u64, f64)>, usize)> {
        match &self.searcher {
            Searcher::Sparse { .. } => {
                Err(Error::invalid("sparse retrievers take words, not vectors"))
            }
            Searcher::Dense { index, .. } => index.search(q, k),
            Searcher::Dqs { indexes, fusion } => match fusion {
                Fusion::Exact => indexes.exact(q, k),
                Fusion::Fused { k_prime } => indexes.fused(q, k, k_prime.unwrap_or(10 * k).max(k)),
            },
        }
    }

    fn search(&self, context: &[String], k: usize) -> Result<(Vec<(u64, f64)>, usize)> {
        match &self.searcher {
            Searcher::Sparse { index, params } => {
                let words: Vec<String> = context
                    .iter()
                    .flat_map(|u| crate::corpus::tokenize(u))
                    .collect();
                let hits = index.search(&words, k, params);
                let scanned = words
                    .iter()
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .map(|w| index.doc_freq(w))
                    .sum();
                Ok((hits, scanned))
            }
            _ => {
                let q = self.encode_query(context)?;
                self.search_vector(&q, k)
            }
        }
    }

    pub fn retrieve(&self, query_id: u64, context: &[String], k: usize) -> Result<RetrievalResult> {
        let start = Instant::now();
        let (ranked, scanned) = self.search(context, k)?;
        let hits = ranked
            .into_iter()
            .map(|(pair_id, score)| {
                Ok(Hit {
                    pair_id,
                    response: self.responses.get(pair_id)?.to_string(),
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RetrievalResult {
            query_id,
            mode: self.tag.clone(),
            hits,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            scanned,
        })
    }

    /// Retrieves for every query pair, using its context as the query.
    pub fn retrieve_all(&self, queries: &[DialoguePair], k: usize) -> Result<Vec<RetrievalResult>> {
        queries
            .iter()
            .map(|q| self.retrieve(q.id, &q.context, k))
            .collect()
    }
}

fn check_dim(student: &Student, dim: usize) -> Result<()> {
    if student.config().out_dim != dim {
        return Err(Error::DimMismatch {
            expected: student.config().out_dim,
            got: dim,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(id: u64, ctx: &str, resp: &str) -> DialoguePair {
        DialoguePair {
            id,
            context: vec![ctx.to_string()],
            response: resp.to_string(),
        }
    }

    fn db() -> Vec<DialoguePair> {
        vec![
            pair(1, "the weather is lovely today", "yes sunny"),
            pair(2, "what time is the game", "seven pm"),
            pair(3, "do you like pizza", "mostly cheese"),
            pair(4, "weather forecast says rain", "bring an umbrella"),
            pair(5, "the game was great", "seven pm"),
        ]
    }

    fn random_shard(n: usize, d: usize, seed: u64) -> EmbeddingShard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingShard::new(d, (0..n as u64).map(|i| i * 3 + 1).collect(), data).unwrap()
    }

    fn student_and_vocab(db: &[DialoguePair], mode: Mode) -> (Student, Vocabulary) {
        let vocab = Vocabulary::from_pairs(db, 1);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            out_dim: 8,
            hidden_dim: 8,
            max_len: 193,
            share_encoders: false,
            seed: 4,
            ..Default::default()
        };
        (Student::new(cfg, mode).unwrap(), vocab)
    }

    #[test]
    fn sparse_qr_without_overlap_is_empty() {
        let db = db();
        let table = ResponseTable::from_pairs(&db).unwrap();
        let r = Retriever::sparse(
            build_sparse(&db, Field::Response).unwrap(),
            Bm25Params::default(),
            &table,
        )
        .unwrap();
        let out = r
            .retrieve(9, &["completely unrelated words".into()], 10)
            .unwrap();
        assert!(out.hits.is_empty());
        assert_eq!(out.mode, "sparse-qr");
        let out = r.retrieve(9, &["umbrella".into()], 10).unwrap();
        assert_eq!(out.hits[0].pair_id, 4);
    }

    #[test]
    fn hits_carry_their_own_responses() {
        let db = db();
        let table = ResponseTable::from_pairs(&db).unwrap();
        let (student, vocab) = student_and_vocab(&db, Mode::Qc);
        let shard = build_shard(&student, &vocab, &db, Field::Context).unwrap();
        let r = Retriever::dense(
            Field::Context,
            DenseIndex::Exact(shard),
            &student,
            &vocab,
            &table,
        )
        .unwrap();
        let out = r.retrieve(0, &["the game tonight".into()], 100).unwrap();
        assert_eq!(out.hits.len(), db.len());
        for h in &out.hits {
            let p = db.iter().find(|p| p.id == h.pair_id).unwrap();
            assert_eq!(h.response, p.response);
        }
        assert!(out.hits.windows(2).all(|w| w[0].score >= w[1].score));
        let ids: BTreeSet<u64> = out.hits.iter().map(|h| h.pair_id).collect();
        assert_eq!(ids.len(), db.len());
    }

    #[test]
    fn dqs_is_additive_and_degenerates_to_qc() {
        let ctx = random_shard(200, 8, 1);
        let resp = EmbeddingShard::new(
            8,
            ctx.ids().to_vec(),
            random_shard(200, 8, 2).data().to_vec(),
        )
        .unwrap();
        let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let one = DqsIndexes::new(ctx.clone(), resp.clone(), 1.0).unwrap();
        let (hits, _) = one.exact(&q, 200).unwrap();
        for (id, s) in &hits {
            let (c, r) = one.pair_scores(&q, *id).unwrap();
            assert!((s - (c + r)).abs() <= 1e-12);
        }
        let zero = DqsIndexes::new(ctx.clone(), resp, 0.0).unwrap();
        let (dqs, _) = zero.exact(&q, 50).unwrap();
        let qc = ctx.exact_topk(&q, 50).unwrap();
        assert_eq!(dqs, qc);
    }

    #[test]
    fn dqs_example_sum() {
        let ctx = EmbeddingShard::new(1, vec![7], vec![0.3]).unwrap();
        let resp = EmbeddingShard::new(1, vec![7], vec![0.5]).unwrap();
        let d = DqsIndexes::new(ctx, resp, 1.0).unwrap();
        let (hits, _) = d.exact(&[1.0], 1).unwrap();
        assert!((hits[0].1 - 0.8).abs() < 1e-7);
    }

    #[test]
    fn fused_with_full_union_equals_exact_and_recall_grows() {
        let ctx = random_shard(300, 8, 3);
        let resp = EmbeddingShard::new(
            8,
            ctx.ids().to_vec(),
            random_shard(300, 8, 4).data().to_vec(),
        )
        .unwrap();
        let d = DqsIndexes::new(ctx, resp, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let exact = d.exact(&q, 10).unwrap().0;
            assert_eq!(d.fused(&q, 10, 300).unwrap().0, exact);
            let mut last = 0.0;
            for kp in [10, 20, 40, 80, 160, 300] {
                let r = crate::dense::recall(&exact, &d.fused(&q, 10, kp).unwrap().0);
                assert!(r >= last);
                last = r;
            }
        }
    }

    #[test]
    fn misaligned_shards_are_rejected() {
        let a = random_shard(10, 4, 1);
        let b = EmbeddingShard::new(
            4,
            (100..110).collect(),
            random_shard(10, 4, 2).data().to_vec(),
        )
        .unwrap();
        assert!(DqsIndexes::new(a.clone(), b, 1.0).is_err());
        let c = random_shard(10, 3, 1);
        assert!(DqsIndexes::new(a, c, 1.0).is_err());
    }

    #[test]
    fn query_scaling_keeps_dense_ranking() {
        let shard = random_shard(500, 8, 9);
        let index = DenseIndex::Exact(shard);
        let q: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * 4.0).collect();
        let ids = |h: Vec<(u64, f64)>| h.into_iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(
            ids(index.search(&q, 50).unwrap().0),
            ids(index.search(&scaled, 50).unwrap().0)
        );
    }

    #[test]
    fn dqs_retriever_matches_qc_at_zero_lambda() {
        let db = db();
        let table = ResponseTable::from_pairs(&db).unwrap();
        let (student, vocab) = student_and_vocab(&db, Mode::Dqs);
        let ctx = build_shard(&student, &vocab, &db, Field::Context).unwrap();
        let resp = build_shard(&student, &vocab, &db, Field::Response).unwrap();
        let dqs = Retriever::dqs(
            DqsIndexes::new(ctx.clone(), resp, 0.0).unwrap(),
            Fusion::Exact,
            &student,
            &vocab,
            &table,
        )
        .unwrap();
        let qc = Retriever::dense(
            Field::Context,
            DenseIndex::Exact(ctx),
            &student,
            &vocab,
            &table,
        )
        .unwrap();
        for p in &db {
            let a = dqs.retrieve(p.id, &p.context, 5).unwrap();
            let b = qc.retrieve(p.id, &p.context, 5).unwrap();
            assert_eq!(a.hits, b.hits);
        }
    }

    #[test]
    fn backend_names_round_trip() {
        for b in [Backend::Sparse, Backend::Exact, Backend::Ivf] {
            assert_eq!(b.as_str().parse::<Backend>().unwrap(), b);
        }
        assert!("faiss".parse::<Backend>().is_err());
    }
}
