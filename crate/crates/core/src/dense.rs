//! Precomputed candidate embeddings and dense top-K search.
//!
//! Vectors are stored as `f32`; every dot product accumulates in `f64`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, bounded_capacity, LeReader, LeWriter};

const SHARD_MAGIC: &[u8; 4] = b"EMB1";
const IVF_MAGIC: &[u8; 4] = b"IVF1";

pub const DEFAULT_KMEANS_ITERS: usize = 10;

pub fn dot32(q: &[f64], x: &[f32]) -> f64 {
    q.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum()
}

fn l2_sq(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, b)| {
            let d = f64::from(a) - b;
            d * d
        })
        .sum()
}

/// Descending score, then ascending id.
fn rank_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` best hits by descending score, ties broken by ascending id.
pub fn top_k(mut hits: Vec<(u64, f64)>, k: usize) -> Vec<(u64, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

/// `n` embeddings of dimension `dim` with their document ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingShard {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl EmbeddingShard {
    pub fn new(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch {
                op: "embedding shard",
                left: (ids.len(), dim),
                right: (data.len(), 1),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(&dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::DuplicateId(dup));
        }
        Ok(EmbeddingShard { dim, ids, data })
    }

    /// Encodes every document, downcasting to `f32`. Rows follow input order.
    pub fn precompute<F>(dim: usize, docs: &[(u64, Vec<u32>)], mut encode: F) -> Result<Self>
    where
        F: FnMut(&[u32]) -> Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(docs.len() * dim);
        for (id, tokens) in docs {
            let v = encode(tokens).map_err(|e| Error::Document {
                id: *id,
                source: Box::new(e),
            })?;
            if v.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            data.extend(v.iter().map(|&x| x as f32));
        }
        EmbeddingShard::new(dim, docs.iter().map(|(id, _)| *id).collect(), data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Dot product of `q` with every row, in row order.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(q)?;
        Ok((0..self.len()).map(|i| dot32(q, self.row(i))).collect())
    }

    pub fn exact_topk(&self, q: &[f64], k: usize) -> Result<Vec<(u64, f64)>> {
        let scores = self.scores(q)?;
        Ok(top_k(self.ids.iter().copied().zip(scores).collect(), k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::new(BufWriter::new(io::create(path)?));
        w.bytes(SHARD_MAGIC)?;
        w.u64(self.len() as u64)?;
        w.u32(self.dim as u32)?;
        for &id in &self.ids {
            w.u64(id)?;
        }
        for &v in &self.data {
            w.f32(v)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = LeReader::new(BufReader::new(io::open(path)?), "embedding shard");
        r.magic(SHARD_MAGIC)?;
        let n = r.u64()?;
        let dim = r.u32()? as usize;
        let mut ids = Vec::with_capacity(bounded_capacity(n));
        for _ in 0..n {
            ids.push(r.u64()?);
        }
        let mut data = Vec::with_capacity(bounded_capacity(n * dim as u64));
        for _ in 0..n * dim as u64 {
            data.push(r.f32()?);
        }
        r.end()?;
        EmbeddingShard::new(dim, ids, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step; the last entry is `inertia`.
    pub history: Vec<f64>,
}

fn nearest(x: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = l2_sq(x, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by `iters` Lloyd iterations under squared L2.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::invalid("vector data is not a whole number of rows"));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= n, got k={k} n={n}"
        )));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend(row(first).iter().map(|&v| f64::from(v)));
    let mut d2: Vec<f64> = (0..n).map(|i| l2_sq(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            }
            pick
        } else {
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.gen_range(0..rest.len())]
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&v| f64::from(v)));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(l2_sq(row(i), &centroids[start..]));
        }
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::with_capacity(iters + 1);
    let assign_all = |centroids: &[f64], assign: &mut [usize], dist: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(row(i), centroids, dim);
            assign[i] = c;
            dist[i] = d;
            inertia += d;
        }
        inertia
    };
    history.push(assign_all(&centroids, &mut assign, &mut dist));
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += f64::from(v);
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            let cent = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (x, s) in cent.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *x = s * inv;
                }
            } else {
                // Reseed to the point worst served by its current centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= n");
                taken[far] = true;
                dist[far] = 0.0;
                for (x, &v) in cent.iter_mut().zip(row(far)) {
                    *x = f64::from(v);
                }
            }
        }
        history.push(assign_all(&centroids, &mut assign, &mut dist));
    }
    Ok(KMeans {
        k,
        dim,
        centroids,
        inertia: *history.last().expect("at least one assignment"),
        history,
    })
}

pub fn default_nlist(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

pub fn default_nprobe(k: usize) -> usize {
    ((k as f64).sqrt().ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Default)]
struct PostingList {
    ids: Vec<u64>,
    data: Vec<f32>,
}

/// Inverted-file index: every vector lives in the list of its nearest
/// (squared L2) centroid; queries probe the lists whose centroids have the
/// highest dot product with the query.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    lists: Vec<PostingList>,
    nprobe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfHits {
    pub hits: Vec<(u64, f64)>,
    /// Vectors scored, equal to the summed size of the probed lists.
    pub scanned: usize,
}

impl IvfIndex {
    pub fn build(shard: &EmbeddingShard, k: usize, seed: u64) -> Result<Self> {
        let km = kmeans(shard.data(), shard.dim(), k, DEFAULT_KMEANS_ITERS, seed)?;
        let dim = shard.dim();
        let centroids: Vec<f32> = km.centroids.iter().map(|&c| c as f32).collect();
        let stored: Vec<f64> = centroids.iter().map(|&c| f64::from(c)).collect();
        let mut lists = vec![PostingList::default(); k];
        for i in 0..shard.len() {
            let (c, _) = nearest(shard.row(i), &stored, dim);
            lists[c].ids.push(shard.ids()[i]);
            lists[c].data.extend_from_slice(shard.row(i));
        }
        Ok(IvfIndex {
            dim,
            centroids,
            lists,
            nprobe: default_nprobe(k),
        })
    }

    /// Builds with the default list count for the shard size.
    pub fn build_default(shard: &EmbeddingShard, seed: u64) -> Result<Self> {
        IvfIndex::build(shard, default_nlist(shard.len()), seed)
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(|l| l.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn default_nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn set_default_nprobe(&mut self, nprobe: usize) -> Result<()> {
        self.check_nprobe(nprobe)?;
        self.nprobe = nprobe;
        Ok(())
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Ids stored in list `c`.
    pub fn list_ids(&self, c: usize) -> &[u64] {
        &self.lists[c].ids
    }

    fn check_nprobe(&self, nprobe: usize) -> Result<()> {
        if nprobe == 0 || nprobe > self.nlist() {
            return Err(Error::invalid(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.nlist()
            )));
        }
        Ok(())
    }

    /// Lists to probe, best first.
    pub fn probe_order(&self, q: &[f64]) -> Vec<usize> {
        let mut order: Vec<(u64, f64)> = (0..self.nlist())
            .map(|c| (c as u64, dot32(q, self.centroid(c))))
            .collect();
        order.sort_unstable_by(rank_order);
        order.into_iter().map(|(c, _)| c as usize).collect()
    }

    pub fn search(&self, q: &[f64], k: usize, nprobe: usize) -> Result<IvfHits> {
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        self.check_nprobe(nprobe)?;
        let mut hits = Vec::new();
        let mut scanned = 0;
        for c in self.probe_order(q).into_iter().take(nprobe) {
            let list = &self.lists[c];
            scanned += list.ids.len();
            for (i, &id) in list.ids.iter().enumerate() {
                hits.push((id, dot32(q, &list.data[i * self.dim..(i + 1) * self.dim])));
            }
        }
        Ok(IvfHits {
            hits: top_k(hits, k),
            scanned,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::new(BufWriter::new(io::create(path)?));
        w.bytes(IVF_MAGIC)?;
        w.u32(self.nlist() as u32)?;
        w.u32(self.dim as u32)?;
        w.u32(self.nprobe as u32)?;
        for &c in &self.centroids {
            w.f32(c)?;
        }
        for list in &self.lists {
            w.u64(list.ids.len() as u64)?;
            for &id in &list.ids {
                w.u64(id)?;
            }
            for &v in &list.data {
                w.f32(v)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        const WHAT: &str = "IVF index";
        let mut r = LeReader::new(BufReader::new(io::open(path)?), WHAT);
        r.magic(IVF_MAGIC)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let nprobe = r.u32()? as usize;
        if k == 0 || nprobe == 0 || nprobe > k {
            return Err(Error::format(
                WHAT,
                format!("bad header k={k} nprobe={nprobe}"),
            ));
        }
        let mut centroids = Vec::with_capacity(bounded_capacity((k * dim) as u64));
        for _ in 0..k * dim {
            centroids.push(r.f32()?);
        }
        let mut lists = Vec::with_capacity(k);
        let mut seen = HashSet::new();
        for _ in 0..k {
            let n = r.u64()?;
            let mut list = PostingList::default();
            for _ in 0..n {
                let id = r.u64()?;
                if !seen.insert(id) {
                    return Err(Error::DuplicateId(id));
                }
                list.ids.push(id);
            }
            for _ in 0..n * dim as u64 {
                list.data.push(r.f32()?);
            }
            lists.push(list);
        }
        r.end()?;
        Ok(IvfIndex {
            dim,
            centroids,
            lists,
            nprobe,
        })
    }
}

/// Fraction of `truth` ids present in `approx`.
pub fn recall(truth: &[(u64, f64)], approx: &[(u64, f64)]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let found: HashSet<u64> = approx.iter().map(|h| h.0).collect();
    truth.iter().filter(|h| found.contains(&h.0)).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_shard(n: usize, dim: usize, seed: u64) -> EmbeddingShard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingShard::new(dim, (0..n as u64).map(|i| i * 7 % 1009 + 1).collect(), data).unwrap()
    }

    #[test]
    fn exact_topk_examples() {
        let shard = EmbeddingShard::new(2, vec![10, 20], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(shard.exact_topk(&[1.0, 0.0], 1).unwrap(), vec![(10, 1.0)]);
        assert_eq!(shard.exact_topk(&[1.0, 0.0], 5).unwrap().len(), 2);
        assert!(matches!(
            shard.exact_topk(&[1.0], 1),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn ties_break_on_ascending_id() {
        let shard = EmbeddingShard::new(1, vec![9, 3, 5], vec![1.0, 1.0, 1.0]).unwrap();
        let ids: Vec<u64> = shard
            .exact_topk(&[1.0], 3)
            .unwrap()
            .iter()
            .map(|h| h.0)
            .collect();
        assert_eq!(ids, vec![3, 5, 9]);
    }

    #[test]
    fn shard_rejects_duplicates_and_bad_sizes() {
        assert!(matches!(
            EmbeddingShard::new(1, vec![1, 1], vec![0.0, 0.0]),
            Err(Error::DuplicateId(1))
        ));
        assert!(EmbeddingShard::new(2, vec![1], vec![0.0]).is_err());
    }

    #[test]
    fn precompute_follows_encoder() {
        let docs = vec![(4, vec![1, 2]), (8, vec![1, 2]), (2, vec![3])];
        let shard =
            EmbeddingShard::precompute(2, &docs, |t| Ok(vec![t.len() as f64 / 3.0, 0.25])).unwrap();
        assert_eq!(shard.ids(), &[4, 8, 2]);
        assert_eq!(shard.row(0), shard.row(1));
        assert_eq!(shard.row(2), &[(1.0f64 / 3.0) as f32, 0.25]);
        let zero = EmbeddingShard::precompute(2, &docs, |_| Ok(vec![0.0, 0.0])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let err = EmbeddingShard::precompute(2, &docs, |t| {
            if t == [3] {
                Err(Error::EmptySequence)
            } else {
                Ok(vec![0.0, 0.0])
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Document { id: 2, .. }));
    }

    #[test]
    fn exact_topk_matches_full_sort() {
        let shard = random_shard(1000, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut all: Vec<(u64, f64)> = (0..shard.len())
                .map(|i| (shard.ids()[i], dot32(&q, shard.row(i))))
                .collect();
            all.sort_by(rank_order);
            assert_eq!(shard.exact_topk(&q, 50).unwrap(), all[..50].to_vec());
        }
    }

    #[test]
    fn kmeans_with_k_equal_n_has_zero_inertia() {
        let shard = random_shard(30, 4, 1);
        let km = kmeans(shard.data(), 4, 30, 5, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        let dup = vec![1.0f32, 1.0, 1.0, 1.0];
        assert_eq!(kmeans(&dup, 1, 4, 3, 0).unwrap().inertia, 0.0);
        assert!(kmeans(shard.data(), 4, 31, 5, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        let mut blob = [[0.0f64; 2]; 2];
        for (b, center) in [(-10.0f32, 0.0f32), (10.0, 0.0)].iter().enumerate() {
            for _ in 0..50 {
                let p = [
                    center.0 + rng.gen_range(-1.0..1.0),
                    center.1 + rng.gen_range(-1.0..1.0),
                ];
                blob[b][0] += f64::from(p[0]) / 50.0;
                blob[b][1] += f64::from(p[1]) / 50.0;
                data.extend_from_slice(&p);
            }
        }
        let km = kmeans(&data, 2, 2, 10, 7).unwrap();
        let mut cents: Vec<&[f64]> = km.centroids.chunks(2).collect();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (c, m) in cents.iter().zip(&blob) {
            assert!(
                (c[0] - m[0]).abs() < 1e-9 && (c[1] - m[1]).abs() < 1e-9,
                "{c:?} vs {m:?}"
            );
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_monotone() {
        let shard = random_shard(500, 8, 2);
        let a = kmeans(shard.data(), 8, 20, 10, 3).unwrap();
        assert_eq!(a, kmeans(shard.data(), 8, 20, 10, 3).unwrap());
        assert!(
            a.history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0]),
            "{:?}",
            a.history
        );
    }

    #[test]
    fn ivf_full_probe_equals_exact() {
        let shard = random_shard(800, 8, 6);
        let ivf = IvfIndex::build_default(&shard, 1).unwrap();
        assert_eq!(ivf.nlist(), 29);
        assert_eq!(ivf.default_nprobe(), 6);
        assert_eq!(ivf.len(), 800);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let full = ivf.search(&q, 20, ivf.nlist()).unwrap();
            assert_eq!(full.hits, shard.exact_topk(&q, 20).unwrap());
            assert_eq!(full.scanned, 800);
            let one = ivf.search(&q, 20, 1).unwrap();
            assert!(one.scanned < 800);
            let r = recall(&full.hits, &one.hits);
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(ivf.search(&[0.0; 8], 5, 0).is_err());
        assert!(ivf.search(&[0.0; 8], 5, 30).is_err());
    }

    #[test]
    fn vectors_sit_in_their_nearest_list() {
        let shard = random_shard(300, 4, 8);
        let ivf = IvfIndex::build(&shard, 10, 2).unwrap();
        let cents: Vec<f64> = ivf.centroids.iter().map(|&c| f64::from(c)).collect();
        for c in 0..ivf.nlist() {
            for &id in ivf.list_ids(c) {
                let i = shard.ids().iter().position(|&x| x == id).unwrap();
                assert_eq!(nearest(shard.row(i), &cents, 4).0, c);
            }
        }
    }

    #[test]
    fn empty_probed_list_gives_no_hits() {
        let ivf = IvfIndex {
            dim: 1,
            centroids: vec![1.0, -1.0],
            lists: vec![
                PostingList::default(),
                PostingList {
                    ids: vec![3],
                    data: vec![-1.0],
                },
            ],
            nprobe: 1,
        };
        let res = ivf.search(&[1.0], 5, 1).unwrap();
        assert!(res.hits.is_empty());
        assert_eq!(res.scanned, 0);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let shard = random_shard(120, 5, 11);
        let p = dir.path().join("db.emb");
        shard.save(&p).unwrap();
        assert_eq!(EmbeddingShard::load(&p).unwrap(), shard);
        let ivf = IvfIndex::build_default(&shard, 4).unwrap();
        let p2 = dir.path().join("db.ivf");
        ivf.save(&p2).unwrap();
        assert_eq!(IvfIndex::load(&p2).unwrap(), ivf);
        assert!(IvfIndex::load(&p).is_err());
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(EmbeddingShard::load(&p).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn recall_non_decreasing_in_nprobe(seed in 0u64..1000) {
                let shard = random_shard(400, 6, seed);
                let ivf = IvfIndex::build(&shard, 16, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let truth = shard.exact_topk(&q, 30).unwrap();
                let mut last = 0.0;
                let mut last_scan = 0;
                for nprobe in 1..=16 {
                    let res = ivf.search(&q, 30, nprobe).unwrap();
                    let r = recall(&truth, &res.hits);
                    prop_assert!(r >= last);
                    prop_assert!(res.scanned >= last_scan);
                    last = r;
                    last_scan = res.scanned;
                }
                prop_assert_eq!(last, 1.0);
            }
        }
    }
}
