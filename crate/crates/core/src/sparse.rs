//! Okapi BM25 over one field of the candidate database.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Field;
use crate::error::{Error, Result};
use crate::io::{self, bounded_capacity, LeReader, LeWriter};

const MAGIC: &[u8; 4] = b"BM25";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && (0.0..=1.0).contains(&self.b)) {
            return Err(Error::invalid(format!(
                "BM25 needs k1 >= 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Term postings over documents held in ascending id order. Postings refer
/// to documents by their position in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    field: Field,
    doc_ids: Vec<u64>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn build<I>(docs: I, field: Field) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, Vec<String>)>,
    {
        let mut docs: Vec<(u64, Vec<String>)> = docs.into_iter().collect();
        docs.sort_by_key(|(id, _)| *id);
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateId(w[0].0));
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (idx, (id, tokens)) in docs.into_iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((idx as u32, count));
            }
            doc_ids.push(id);
            doc_lens.push(tokens.len() as u32);
        }
        let avgdl = mean_len(&doc_lens);
        Ok(InvertedIndex {
            field,
            doc_ids,
            doc_lens,
            avgdl,
            postings,
        })
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_ids(&self) -> &[u64] {
        &self.doc_ids
    }

    pub fn doc_len(&self, doc_id: u64) -> Result<u32> {
        Ok(self.doc_lens[self.position(doc_id)?])
    }

    /// `(doc_id, tf)` postings of a term, ascending by id.
    pub fn postings(&self, term: &str) -> Vec<(u64, u32)> {
        self.postings
            .get(term)
            .map(|list| {
                list.iter()
                    .map(|&(i, tf)| (self.doc_ids[i as usize], tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn position(&self, doc_id: u64) -> Result<usize> {
        self.doc_ids
            .binary_search(&doc_id)
            .map_err(|_| Error::UnknownDoc(doc_id))
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.doc_count(), self.doc_freq(term))
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32, params: &Bm25Params) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - params.b + params.b * f64::from(len) / self.avgdl;
        idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
    }

    pub fn score(&self, query: &[String], doc_id: u64, params: &Bm25Params) -> Result<f64> {
        let pos = self.position(doc_id)? as u32;
        let mut total = 0.0;
        for term in unique(query) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&pos, |&(d, _)| d) {
                let w = self.term_weight(
                    idf(self.doc_count(), list.len()),
                    list[i].1,
                    self.doc_lens[pos as usize],
                    params,
                );
                total += w;
            }
        }
        Ok(total)
    }

    /// Exact top-k over every document sharing a term with the query.
    /// Contributions add in the same term order as [`InvertedIndex::score`],
    /// so the two agree bit for bit.
    pub fn search(&self, query: &[String], k: usize, params: &Bm25Params) -> Vec<(u64, f64)> {
        if k == 0 || self.doc_ids.is_empty() {
            return Vec::new();
        }
        let mut acc = vec![0.0f64; self.doc_ids.len()];
        let mut touched: Vec<u32> = Vec::new();
        let mut seen = vec![false; self.doc_ids.len()];
        for term in unique(query) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = idf(self.doc_count(), list.len());
            for &(d, tf) in list {
                let d_us = d as usize;
                acc[d_us] += self.term_weight(idf, tf, self.doc_lens[d_us], params);
                if !seen[d_us] {
                    seen[d_us] = true;
                    touched.push(d);
                }
            }
        }
        let mut hits: Vec<(u32, f64)> = touched.into_iter().map(|d| (d, acc[d as usize])).collect();
        let order = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(order);
        hits.into_iter()
            .map(|(d, s)| (self.doc_ids[d as usize], s))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::new(BufWriter::new(io::create(path)?));
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.doc_ids.len() as u64)?;
        w.f64(self.avgdl)?;
        w.u8(self.field.to_code())?;
        for (&id, &len) in self.doc_ids.iter().zip(&self.doc_lens) {
            w.u64(id)?;
            w.u32(len)?;
        }
        w.u64(self.postings.len() as u64)?;
        for (term, list) in &self.postings {
            w.str(term)?;
            w.u32(list.len() as u32)?;
            for &(d, tf) in list {
                w.u32(d)?;
                w.u32(tf)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        const WHAT: &str = "BM25 index";
        let mut r = LeReader::new(BufReader::new(io::open(path)?), WHAT);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version.into(),
                expected: VERSION.into(),
            });
        }
        let n = r.u64()?;
        let avgdl = r.f64()?;
        let field =
            Field::from_code(r.u8()?).ok_or_else(|| Error::format(WHAT, "unknown field code"))?;
        let mut doc_ids = Vec::with_capacity(bounded_capacity(n));
        let mut doc_lens = Vec::with_capacity(bounded_capacity(n));
        for _ in 0..n {
            doc_ids.push(r.u64()?);
            doc_lens.push(r.u32()?);
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(WHAT, "document ids not strictly ascending"));
        }
        let terms = r.u64()?;
        let mut postings = BTreeMap::new();
        let mut tf_sums = vec![0u64; doc_ids.len()];
        for _ in 0..terms {
            let term = r.str()?;
            let len = r.u32()?;
            let mut list = Vec::with_capacity(bounded_capacity(len.into()));
            for _ in 0..len {
                let d = r.u32()?;
                let tf = r.u32()?;
                if d as usize >= doc_ids.len() || list.last().is_some_and(|&(p, _)| p >= d) {
                    return Err(Error::format(
                        WHAT,
                        format!("bad posting list for {term:?}"),
                    ));
                }
                tf_sums[d as usize] += u64::from(tf);
                list.push((d, tf));
            }
            if postings.insert(term, list).is_some() {
                return Err(Error::format(WHAT, "duplicate term record"));
            }
        }
        r.end()?;
        if tf_sums
            .iter()
            .zip(&doc_lens)
            .any(|(&s, &l)| s != u64::from(l))
        {
            return Err(Error::format(
                WHAT,
                "term frequencies disagree with document lengths",
            ));
        }
        if avgdl.to_bits() != mean_len(&doc_lens).to_bits() {
            return Err(Error::format(
                WHAT,
                "average document length disagrees with the doc table",
            ));
        }
        Ok(InvertedIndex {
            field,
            doc_ids,
            doc_lens,
            avgdl,
            postings,
        })
    }
}

fn mean_len(lens: &[u32]) -> f64 {
    if lens.is_empty() {
        0.0
    } else {
        lens.iter().map(|&l| f64::from(l)).sum::<f64>() / lens.len() as f64
    }
}

/// `ln(1 + (N - n + 0.5) / (n + 0.5))`, never negative.
pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    let (n, df) = (n_docs as f64, doc_freq as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

fn unique(query: &[String]) -> BTreeSet<&str> {
    query.iter().map(String::as_str).collect()
}
