//! Seeded synthetic corpora and vector sets for fixtures and benchmarks.
//!
//! A synthetic response owns a small signature of topic words. Each of its
//! contexts mentions part of that signature among filler words, so sibling
//! contexts overlap heavily with each other, while the response text is drawn
//! from a separate word pool and overlaps with nothing.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::DialoguePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub responses: usize,
    /// Share of responses that occur exactly once.
    pub single_fraction: f64,
    /// Multiplicity of repeated responses is uniform in this range.
    pub min_contexts: usize,
    pub max_contexts: usize,
    pub topic_words: usize,
    pub signature_len: usize,
    /// Signature words mentioned by each context.
    pub signature_mentions: usize,
    pub filler_words: usize,
    pub filler_per_context: (usize, usize),
    pub response_words: usize,
    pub response_len: usize,
    pub max_utterances: usize,
    /// Start every context with one of its signature words.
    pub lead_with_signature: bool,
    /// Signature words of other responses mixed into each context.
    pub foreign_mentions: usize,
    /// First pair id; lets several corpora be combined without collisions.
    pub first_id: u64,
    /// Prefix of every generated word, so corpora built with different
    /// prefixes share no vocabulary.
    pub prefix: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            responses: 2000,
            single_fraction: 0.3,
            min_contexts: 2,
            max_contexts: 12,
            topic_words: 600,
            signature_len: 4,
            signature_mentions: 3,
            filler_words: 300,
            filler_per_context: (6, 12),
            response_words: 2000,
            response_len: 6,
            max_utterances: 3,
            lead_with_signature: false,
            foreign_mentions: 0,
            first_id: 0,
            prefix: String::new(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// Every context opens with one of its three signature words and also
    /// mentions one signature word of a random other response. Cross
    /// attention from the opening word tells the true topic from the decoy,
    /// while a bag of words sees both alike.
    pub fn ambiguous_negatives() -> Self {
        CorpusSpec {
            topic_words: 1000,
            signature_len: 3,
            signature_mentions: 3,
            filler_per_context: (3, 6),
            lead_with_signature: true,
            foreign_mentions: 1,
            ..Default::default()
        }
    }
}

/// Splits `words` into between one and `max` non-empty utterances.
fn utterances(words: Vec<String>, max: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let parts = rng.gen_range(1..=max.max(1)).min(words.len());
    let mut cuts: Vec<usize> = (1..words.len())
        .collect::<Vec<_>>()
        .choose_multiple(rng, parts - 1)
        .copied()
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(words.len())) {
        out.push(words[start..c].join(" "));
        start = c;
    }
    out
}

/// Distinct word indices drawn from a pool.
fn draw(pool: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, pool, n.min(pool)).into_vec()
}

pub fn generate_corpus(spec: &CorpusSpec) -> Vec<DialoguePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = &spec.prefix;
    let mut pairs = Vec::new();
    let mut seen_responses = HashSet::new();
    let mut id = spec.first_id;
    for _ in 0..spec.responses {
        let response = loop {
            let words: Vec<String> = (0..spec.response_len)
                .map(|_| format!("{p}r{}", rng.gen_range(0..spec.response_words)))
                .collect();
            let text = words.join(" ");
            if seen_responses.insert(text.clone()) {
                break text;
            }
        };
        let signature = draw(spec.topic_words, spec.signature_len, &mut rng);
        let n = if rng.gen_bool(spec.single_fraction.clamp(0.0, 1.0)) {
            1
        } else {
            rng.gen_range(spec.min_contexts..=spec.max_contexts.max(spec.min_contexts))
        };
        for _ in 0..n {
            let mut words: Vec<String> = signature
                .choose_multiple(&mut rng, spec.signature_mentions)
                .map(|t| format!("{p}t{t}"))
                .collect();
            let fill = rng.gen_range(spec.filler_per_context.0..=spec.filler_per_context.1);
            words.extend((0..fill).map(|_| format!("{p}w{}", rng.gen_range(0..spec.filler_words))));
            words.extend(
                (0..spec.foreign_mentions)
                    .map(|_| format!("{p}t{}", rng.gen_range(0..spec.topic_words))),
            );
            if spec.lead_with_signature {
                words[1..].shuffle(&mut rng);
            } else {
                words.shuffle(&mut rng);
            }
            pairs.push(DialoguePair {
                id,
                context: utterances(words, spec.max_utterances, &mut rng),
                response: response.clone(),
            });
            id += 1;
        }
    }
    pairs.shuffle(&mut rng);
    pairs
}

/// Parameters of a mixture of Gaussian blobs in `[-1, 1]^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub centers: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Row-major `n x dim` vectors around uniformly placed centers.
pub fn clustered_vectors(spec: &BlobSpec) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<f64> = (0..spec.centers * spec.dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let noise = Normal::new(0.0, spec.noise).expect("noise must be finite and non-negative");
    let mut out = Vec::with_capacity(spec.n * spec.dim);
    for _ in 0..spec.n {
        let c = rng.gen_range(0..spec.centers);
        for j in 0..spec.dim {
            out.push((centers[c * spec.dim + j] + noise.sample(&mut rng)) as f32);
        }
    }
    out
}

pub fn uniform_vectors(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}
