//! Retrieval quality and cost measurements.
//!
//! Coverage@K asks whether the gold response string appears among the top K
//! hits. Perplexity and relevance are proxies: a smoothed bigram LM stands in
//! for a pretrained dialogue LM, and a trained cross scorer stands in for a
//! human-preference ranker. Latency here has two forms: scan counts, which are
//! deterministic and go into reports, and wall-clock batch timings from
//! [`bench_latency`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::sigmoid;
use crate::corpus::{normalize, DialoguePair, Vocabulary, SEP_ID};
use crate::error::{Error, Result};
use crate::models::FrozenScorer;
use crate::retrieval::{RetrievalResult, Retriever};

pub const DEFAULT_KS: [usize; 4] = [1, 20, 100, 500];
pub const BENCH_BATCH: usize = 32;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// How retrieved and gold responses are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Tokenize and rejoin both sides first.
    #[default]
    Normalized,
    Exact,
}

impl Matching {
    fn key(self, s: &str) -> String {
        match self {
            Matching::Normalized => normalize(s),
            Matching::Exact => s.to_string(),
        }
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::invalid("at least one K is required"));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("K must be positive"));
    }
    Ok(())
}

/// Fraction of queries whose gold response is among the first K hits, for
/// each K. `gold[i]` belongs to `results[i]`.
pub fn coverage_at_k(
    results: &[RetrievalResult],
    gold: &[&str],
    ks: &[usize],
    matching: Matching,
) -> Result<BTreeMap<usize, f64>> {
    check_ks(ks)?;
    if results.len() != gold.len() {
        return Err(Error::DimMismatch {
            expected: results.len(),
            got: gold.len(),
        });
    }
    // Rank of the first matching hit per query.
    let first: Vec<Option<usize>> = results
        .iter()
        .zip(gold)
        .map(|(r, g)| {
            let g = matching.key(g);
            r.hits.iter().position(|h| matching.key(&h.response) == g)
        })
        .collect();
    let n = results.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first.iter().filter(|f| f.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// Add-k smoothed bigram model over token id streams.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramLm {
    vocab_size: usize,
    smoothing: f64,
    history: HashMap<u32, f64>,
    bigrams: HashMap<(u32, u32), f64>,
}

impl BigramLm {
    pub fn train<'s, I>(streams: I, vocab_size: usize, smoothing: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'s [u32]>,
    {
        if vocab_size == 0 || !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::invalid(
                "bigram LM needs a vocabulary and positive smoothing",
            ));
        }
        let mut history = HashMap::new();
        let mut bigrams = HashMap::new();
        for s in streams {
            for w in s.windows(2) {
                if w.iter().any(|&t| t as usize >= vocab_size) {
                    let id = w
                        .iter()
                        .copied()
                        .find(|&t| t as usize >= vocab_size)
                        .unwrap_or(0);
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: vocab_size,
                    });
                }
                *history.entry(w[0]).or_insert(0.0) += 1.0;
                *bigrams.entry((w[0], w[1])).or_insert(0.0) += 1.0;
            }
        }
        Ok(BigramLm {
            vocab_size,
            smoothing,
            history,
            bigrams,
        })
    }

    /// Trains on the sessions of every training-group context.
    pub fn from_train_groups(
        groups: &[crate::corpus::TrainGroup],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let streams: Vec<Vec<u32>> = groups
            .iter()
            .flat_map(|g| {
                g.contexts
                    .iter()
                    .map(move |c| vocab.encode_session(c, &g.response))
            })
            .collect();
        BigramLm::train(
            streams.iter().map(Vec::as_slice),
            vocab.len(),
            DEFAULT_SMOOTHING,
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prob(&self, prev: u32, next: u32) -> f64 {
        let c = self.bigrams.get(&(prev, next)).copied().unwrap_or(0.0);
        let h = self.history.get(&prev).copied().unwrap_or(0.0);
        (c + self.smoothing) / (h + self.smoothing * self.vocab_size as f64)
    }

    /// Conditional perplexity of `response` after `query`; `None` for an
    /// empty response.
    pub fn perplexity(&self, query: &[u32], response: &[u32]) -> Option<f64> {
        if response.is_empty() {
            return None;
        }
        let mut prev = query.last().copied().unwrap_or(SEP_ID);
        let mut nll = 0.0;
        for &t in response {
            nll -= self.prob(prev, t).ln();
            prev = t;
        }
        Some((nll / response.len() as f64).exp())
    }
}

/// Mean perplexity of the responses and how many were skipped as empty.
pub fn proxy_perplexity_at_k(
    lm: &BigramLm,
    query: &[u32],
    responses: &[Vec<u32>],
) -> (Option<f64>, usize) {
    let scores: Vec<f64> = responses
        .iter()
        .filter_map(|r| lm.perplexity(query, r))
        .collect();
    let skipped = responses.len() - scores.len();
    if scores.is_empty() {
        return (None, skipped);
    }
    (
        Some(scores.iter().sum::<f64>() / scores.len() as f64),
        skipped,
    )
}

/// Mean sigmoid of the teacher logit over the responses.
pub fn proxy_relevance_at_k(
    teacher: &FrozenScorer,
    query: &[u32],
    responses: &[Vec<u32>],
) -> Result<Option<f64>> {
    if responses.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for r in responses {
        total += sigmoid(teacher.score(query, r)?);
    }
    Ok(Some(total / responses.len() as f64))
}

/// Deterministic cost summary computed from stored retrieval results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanStats {
    pub queries: usize,
    pub batch_size: usize,
    pub mean_scanned_per_query: f64,
    pub mean_scanned_per_batch: f64,
}

impl ScanStats {
    pub fn from_results(results: &[RetrievalResult]) -> Self {
        let total: usize = results.iter().map(|r| r.scanned).sum();
        let n = results.len().max(1) as f64;
        let per_query = total as f64 / n;
        ScanStats {
            queries: results.len(),
            batch_size: BENCH_BATCH,
            mean_scanned_per_query: per_query,
            mean_scanned_per_batch: per_query * BENCH_BATCH as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub coverage: BTreeMap<usize, f64>,
    pub ppl: BTreeMap<usize, f64>,
    pub rel: BTreeMap<usize, f64>,
    pub latency: ScanStats,
    pub proxy: bool,
    pub skipped_empty_responses: usize,
    pub config: Value,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode: {}  queries: {}",
            self.mode, self.latency.queries
        );
        let _ = writeln!(
            out,
            "perplexity and relevance are proxy metrics (bigram LM, cross scorer)"
        );
        let _ = writeln!(
            out,
            "{:>6} {:>10} {:>12} {:>10}",
            "K", "coverage", "proxy-ppl", "proxy-rel"
        );
        for (k, c) in &self.coverage {
            let fmt =
                |m: &BTreeMap<usize, f64>| m.get(k).map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:>6} {:>10.4} {:>12} {:>10}",
                k,
                c,
                fmt(&self.ppl),
                fmt(&self.rel)
            );
        }
        let _ = writeln!(
            out,
            "scanned per query: {:.1}  per batch of {}: {:.1}",
            self.latency.mean_scanned_per_query,
            self.latency.batch_size,
            self.latency.mean_scanned_per_batch
        );
        out
    }
}

/// What [`evaluate`] reads besides the retrieval results.
pub struct EvalInputs<'a> {
    pub queries: &'a [DialoguePair],
    pub vocab: &'a Vocabulary,
    pub lm: Option<&'a BigramLm>,
    pub teacher: Option<&'a FrozenScorer>,
    pub ks: &'a [usize],
    pub matching: Matching,
    pub config: Value,
}

/// Builds a report from stored results. Each result is matched to its query
/// by `query_id`.
pub fn evaluate(results: &[RetrievalResult], inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    check_ks(inputs.ks)?;
    let by_id: HashMap<u64, &DialoguePair> = inputs.queries.iter().map(|q| (q.id, q)).collect();
    let mut gold = Vec::with_capacity(results.len());
    let mut queries = Vec::with_capacity(results.len());
    for r in results {
        let q = by_id
            .get(&r.query_id)
            .ok_or_else(|| Error::invalid(format!("result for unknown query {}", r.query_id)))?;
        gold.push(q.response.as_str());
        queries.push(*q);
    }
    let coverage = coverage_at_k(results, &gold, inputs.ks, inputs.matching)?;
    let mut ppl = BTreeMap::new();
    let mut rel = BTreeMap::new();
    let mut skipped = 0;
    if inputs.lm.is_some() || inputs.teacher.is_some() {
        let encoded: Vec<(Vec<u32>, Vec<Vec<u32>>)> = results
            .iter()
            .zip(&queries)
            .map(|(r, q)| {
                let query = inputs.vocab.encode_context(&q.context);
                let resp = r
                    .hits
                    .iter()
                    .map(|h| inputs.vocab.encode_text(&h.response))
                    .collect();
                (query, resp)
            })
            .collect();
        for &k in inputs.ks {
            let mut p_sum = (0.0, 0usize);
            let mut r_sum = (0.0, 0usize);
            for (query, resp) in &encoded {
                let top = &resp[..resp.len().min(k)];
                if let Some(lm) = inputs.lm {
                    let (v, s) = proxy_perplexity_at_k(lm, query, top);
                    if k == *inputs.ks.iter().max().unwrap_or(&k) {
                        skipped += s;
                    }
                    if let Some(v) = v {
                        p_sum = (p_sum.0 + v, p_sum.1 + 1);
                    }
                }
                if let Some(t) = inputs.teacher {
                    if let Some(v) = proxy_relevance_at_k(t, query, top)? {
                        r_sum = (r_sum.0 + v, r_sum.1 + 1);
                    }
                }
            }
            if p_sum.1 > 0 {
                ppl.insert(k, p_sum.0 / p_sum.1 as f64);
            }
            if r_sum.1 > 0 {
                rel.insert(k, r_sum.0 / r_sum.1 as f64);
            }
        }
    }
    Ok(EvalReport {
        mode: results.first().map(|r| r.mode.clone()).unwrap_or_default(),
        coverage,
        ppl,
        rel,
        latency: ScanStats::from_results(results),
        proxy: true,
        skipped_empty_responses: skipped,
        config: inputs.config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub database: usize,
    pub coverage: BTreeMap<usize, f64>,
    pub mean_scanned: f64,
}

/// Coverage for the same queries as distractors are added: each point's
/// database is `base` plus the first `size` distractors. Sizes must grow
/// strictly and no distractor may carry a gold response.
pub fn db_size_sweep<F>(
    base: &[DialoguePair],
    distractors: &[DialoguePair],
    sizes: &[usize],
    queries: &[DialoguePair],
    ks: &[usize],
    mut run: F,
) -> Result<Vec<SweepPoint>>
where
    F: FnMut(&[DialoguePair]) -> Result<Vec<RetrievalResult>>,
{
    check_ks(ks)?;
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "sweep sizes must be strictly increasing (nested databases)",
        ));
    }
    if let Some(&last) = sizes.last() {
        if last > distractors.len() {
            return Err(Error::Insufficient(format!(
                "sweep size {last} exceeds {} available distractors",
                distractors.len()
            )));
        }
    }
    let golds: std::collections::HashSet<String> =
        queries.iter().map(|q| normalize(&q.response)).collect();
    if let Some(d) = distractors[..sizes.last().copied().unwrap_or(0)]
        .iter()
        .find(|d| golds.contains(&normalize(&d.response)))
    {
        return Err(Error::invalid(format!(
            "distractor {} repeats a gold response",
            d.id
        )));
    }
    let gold: Vec<&str> = queries.iter().map(|q| q.response.as_str()).collect();
    let mut points = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut db = base.to_vec();
        db.extend_from_slice(&distractors[..size]);
        let results = run(&db)?;
        let coverage = coverage_at_k(&results, &gold, ks, Matching::Normalized)?;
        points.push(SweepPoint {
            size,
            database: db.len(),
            coverage,
            mean_scanned: ScanStats::from_results(&results).mean_scanned_per_query,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub batches: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub mean_scanned_per_batch: f64,
}

/// Wall-clock time per batch of 32 queries. One untimed warm-up batch runs
/// first; each repeat times every batch and the statistics are over the
/// per-repeat mean batch times.
pub fn bench_latency(
    retriever: &Retriever<'_>,
    queries: &[DialoguePair],
    k: usize,
    repeats: usize,
) -> Result<LatencyStats> {
    if queries.is_empty() || repeats == 0 {
        return Err(Error::invalid(
            "benchmark needs queries and at least one repeat",
        ));
    }
    let batches: Vec<&[DialoguePair]> = queries.chunks(BENCH_BATCH).collect();
    retriever.retrieve_all(batches[0], k)?;
    let mut means = Vec::with_capacity(repeats);
    let mut scanned = 0usize;
    for _ in 0..repeats {
        let mut total = 0.0;
        scanned = 0;
        for b in &batches {
            let start = Instant::now();
            let out = retriever.retrieve_all(b, k)?;
            total += start.elapsed().as_secs_f64() * 1e3;
            scanned += out.iter().map(|r| r.scanned).sum::<usize>();
        }
        means.push(total / batches.len() as f64);
    }
    let mean = means.iter().sum::<f64>() / repeats as f64;
    let stddev = if repeats > 1 {
        (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencyStats {
        batch_size: BENCH_BATCH,
        batches: batches.len(),
        repeats,
        mean_ms: mean,
        stddev_ms: stddev,
        mean_scanned_per_batch: scanned as f64 / batches.len() as f64,
    })
}
