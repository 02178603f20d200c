//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset by number, e.g. `cargo test --test acceptance -- 3 7`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use respsel::autodiff::{logsumexp, ParamId, ParamStore, Tape, Tensor, Var};
use respsel::cli::RunConfig;
use respsel::corpus::{
    build_splits, check_split, dedup_pairs, filter_pairs, normalize, DialoguePair, Field,
    SplitConfig, SplitResult, Vocabulary,
};
use respsel::dense::{default_nlist, recall, EmbeddingShard, IvfIndex};
use respsel::eval::{coverage_at_k, db_size_sweep, Matching};
use respsel::models::{similarity, CrossScorer, Mode, ModelConfig, Role, Student};
use respsel::retrieval::{build_shard, DenseIndex, DqsIndexes, Fusion, ResponseTable, Retriever};
use respsel::sparse::{Bm25Params, InvertedIndex};
use respsel::synth::{clustered_vectors, generate_corpus, uniform_vectors, BlobSpec, CorpusSpec};
use respsel::training::{
    bce_loss_var, contrastive_loss, contrastive_loss_var, distill_student, encode_groups,
    kl_loss_var, train_student, train_teacher, EncodedGroup, TrainConfig,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- helpers

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

/// Worst relative error of the tape gradient against central differences
/// with step 1e-5, relative to `max(|analytic|, |numeric|, 1e-4)`.
fn fd_error(store: &mut ParamStore, f: &dyn Fn(&mut Tape<'_>) -> Var) -> f64 {
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.backward(loss).unwrap()
    };
    let value = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.value(loss).item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in ids {
        for k in 0..store.value(id).data().len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = value(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = value(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst =
                worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
        }
    }
    worst
}

struct Fixture {
    split: SplitResult,
    vocab: Vocabulary,
    groups: Vec<EncodedGroup>,
}

fn fixture(spec: &CorpusSpec, mc_size: usize) -> Fixture {
    let pairs = dedup_pairs(&filter_pairs(&generate_corpus(spec)));
    let split = build_splits(
        &pairs,
        &SplitConfig {
            mc_size,
            sc_size: 50,
            seed: spec.seed,
            ..Default::default()
        },
    )
    .unwrap();
    let vocab = Vocabulary::from_pairs(&pairs, 1);
    let groups = encode_groups(&split.train_groups, &vocab);
    Fixture {
        split,
        vocab,
        groups,
    }
}

impl Fixture {
    fn model(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..ModelConfig::with_vocab(self.vocab.len())
        }
    }

    /// Dense exact Coverage@K of the MC queries against the database.
    fn coverage(&self, student: &Student, ks: &[usize]) -> Vec<f64> {
        let db = &self.split.database;
        let table = ResponseTable::from_pairs(db).unwrap();
        let depth = *ks.iter().max().unwrap();
        let results = if student.mode() == Mode::Dqs {
            let c = build_shard(student, &self.vocab, db, Field::Context).unwrap();
            let r = build_shard(student, &self.vocab, db, Field::Response).unwrap();
            let idx = DqsIndexes::new(c, r, 1.0).unwrap();
            Retriever::dqs(idx, Fusion::Exact, student, &self.vocab, &table)
                .unwrap()
                .retrieve_all(&self.split.mc_test, depth)
                .unwrap()
        } else {
            let field = student.mode().fields()[0];
            let shard = build_shard(student, &self.vocab, db, field).unwrap();
            Retriever::dense(
                field,
                DenseIndex::Exact(shard),
                student,
                &self.vocab,
                &table,
            )
            .unwrap()
            .retrieve_all(&self.split.mc_test, depth)
            .unwrap()
        };
        let gold: Vec<&str> = self
            .split
            .mc_test
            .iter()
            .map(|p| p.response.as_str())
            .collect();
        coverage_at_k(&results, &gold, ks, Matching::Normalized)
            .unwrap()
            .into_values()
            .collect()
    }
}

fn desk() -> RunConfig {
    RunConfig::default()
}

// ---------------------------------------------------------------- criteria

fn c1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 5];
    for _ in 0..50 {
        let b = rng.gen_range(2..6);
        let blocks = rng.gen_range(1..3);
        let cols = b * blocks;
        let mut store = ParamStore::new();
        let z = store.add("z", rand_tensor(&mut rng, b, cols, 3.0)).unwrap();
        let mask: Vec<bool> = (0..b * cols).map(|i| i % cols % b == i / cols).collect();
        worst[0] = worst[0].max(fd_error(&mut store, &|t| {
            let v = t.param(z);
            contrastive_loss_var(t, v, &mask).unwrap()
        }));
        let z_t = rand_tensor(&mut rng, b, cols, 3.0);
        let temp = rng.gen_range(0.5..5.0);
        worst[2] = worst[2].max(fd_error(&mut store, &|t| {
            let v = t.param(z);
            kl_loss_var(t, v, &z_t, temp).unwrap()
        }));

        let n = rng.gen_range(2..10);
        let mut store = ParamStore::new();
        let logits = store
            .add("logits", rand_tensor(&mut rng, n, 1, 6.0))
            .unwrap();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        worst[1] = worst[1].max(fd_error(&mut store, &|t| {
            let v = t.param(logits);
            bce_loss_var(t, v, &labels).unwrap()
        }));
    }

    // Through the models: student towers under the contrastive loss and the
    // cross scorer under BCE.
    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 4,
        out_dim: 3,
        hidden_dim: 3,
        init_range: 0.5,
        seed: 7,
        ..Default::default()
    };
    let mut student = Student::new(cfg.clone(), Mode::Qc).unwrap();
    let (qt, ct) = (
        student.tower(Role::Query).unwrap(),
        student.tower(Role::Context).unwrap(),
    );
    let queries: Vec<Vec<u32>> = vec![vec![2, 3, 4], vec![5, 6], vec![7, 2, 9, 11]];
    let contexts: Vec<Vec<u32>> = vec![vec![3, 4], vec![6, 8, 10], vec![9, 11, 1]];
    let mask: Vec<bool> = (0..9).map(|i| i % 3 == i / 3).collect();
    worst[3] = fd_error(student.store_mut(), &|t| {
        let q: Vec<&[u32]> = queries.iter().map(Vec::as_slice).collect();
        let c: Vec<&[u32]> = contexts.iter().map(Vec::as_slice).collect();
        let a = qt.encode_batch(t, &q).unwrap();
        let b = ct.encode_batch(t, &c).unwrap();
        let s = t.matmul_nt(a, b).unwrap();
        contrastive_loss_var(t, s, &mask).unwrap()
    });
    let mut teacher = CrossScorer::new(cfg, Field::Context).unwrap();
    let arch = teacher.clone();
    worst[4] = fd_error(teacher.store_mut(), &|t| {
        let pairs: Vec<(&[u32], &[u32])> =
            vec![(&[2, 3], &[4, 5]), (&[2, 3], &[6]), (&[7], &[8, 9, 10])];
        let z = arch.score_batch(t, &pairs).unwrap();
        bce_loss_var(t, z, &[true, false, true]).unwrap()
    });
    let max = worst.iter().cloned().fold(0.0, f64::max);
    check(
        max < 1e-5,
        format!(
            "max rel err: contrastive {:.1e}, bce {:.1e}, kl {:.1e}, student towers {:.1e}, cross scorer {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn c2_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..40);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let y = rng.gen_range(0..n);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let ce = log_norm - z[y];
        let neg: Vec<f64> = z
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, v)| *v)
            .collect();
        let loss = contrastive_loss(&[z[y]], &neg).unwrap();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let row = tape.constant(Tensor::row_vector(z.clone()));
        let mask: Vec<bool> = (0..n).map(|i| i == y).collect();
        let on_tape = contrastive_loss_var(&mut tape, row, &mask).unwrap();
        let tape_loss = tape.value(on_tape).item();
        worst = worst.max((loss - ce).abs()).max((tape_loss - ce).abs());
        debug_assert!((logsumexp(&z) - log_norm).abs() < 1e-9);
    }
    check(
        worst <= 1e-12,
        format!("max |loss - CE| over 100 score vectors: {worst:.1e}"),
    )
}

fn bm25_oracle(
    docs: &[(u64, Vec<String>)],
    query: &[String],
    k: usize,
    p: &Bm25Params,
) -> Vec<(u64, f64)> {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.1.len() as f64).sum::<f64>() / n;
    let terms: BTreeSet<&String> = query.iter().collect();
    let mut scored = Vec::new();
    for (id, words) in docs {
        let mut total = 0.0;
        let mut hit = false;
        for &t in &terms {
            let tf = words.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = docs.iter().filter(|d| d.1.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let norm = 1.0 - p.b + p.b * words.len() as f64 / avgdl;
            total += idf * tf * (p.k1 + 1.0) / (tf + p.k1 * norm);
        }
        if hit {
            scored.push((*id, total));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

fn c3_bm25() -> Outcome {
    let p = Bm25Params::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut queries = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=1000);
        let vocab = rng.gen_range(5..60);
        let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
        ids.shuffle(&mut rng);
        let docs: Vec<(u64, Vec<String>)> = ids[..n]
            .iter()
            .map(|&id| {
                let len = rng.gen_range(1..20);
                (
                    id,
                    (0..len)
                        .map(|_| format!("w{}", rng.gen_range(0..vocab)))
                        .collect(),
                )
            })
            .collect();
        let index = InvertedIndex::build(docs.iter().cloned(), Field::Context).unwrap();
        for _ in 0..3 {
            let q: Vec<String> = (0..rng.gen_range(1..6))
                .map(|_| format!("w{}", rng.gen_range(0..vocab + 5)))
                .collect();
            let k = rng.gen_range(1..=n + 5);
            let got = index.search(&q, k, &p);
            let want = bm25_oracle(&docs, &q, k, &p);
            let same_ids = got.iter().map(|h| h.0).eq(want.iter().map(|h| h.0));
            let close = got.iter().zip(&want).all(|(a, b)| (a.1 - b.1).abs() < 1e-9);
            if !(same_ids && close && got.len() == want.len()) {
                return Err(format!(
                    "corpus of {n} docs, query {q:?}: ranking differs from the exhaustive oracle"
                ));
            }
            queries += 1;
        }
    }
    let one =
        InvertedIndex::build(vec![(7u64, vec!["hello".to_string()])], Field::Context).unwrap();
    let s = one.search(&["hello".to_string()], 1, &p)[0].1;
    let expected = (4.0f64 / 3.0).ln();
    check(
        (s - 0.287682).abs() < 1e-6 && (s - expected).abs() < 1e-9,
        format!("{queries} queries on 200 corpora match the oracle; single-doc score {s:.6}"),
    )
}

fn c4_dense() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for s in 0..5u64 {
        let data = uniform_vectors(1000, 16, s);
        let ids: Vec<u64> = (0..1000u64).map(|i| i * 7 + s).collect();
        let shard = EmbeddingShard::new(16, ids.clone(), data.clone()).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut oracle: Vec<(u64, f64)> = (0..1000)
                .map(|i| {
                    (
                        ids[i],
                        (0..16)
                            .map(|j| q[j] * f64::from(data[i * 16 + j]))
                            .sum::<f64>(),
                    )
                })
                .collect();
            oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for k in [1, 10, 100, 1000] {
                let got = shard.exact_topk(&q, k).unwrap();
                if !got.iter().map(|h| h.0).eq(oracle[..k].iter().map(|h| h.0)) {
                    return Err(format!("exact top-{k} differs from the full sort"));
                }
            }
        }
        let ivf = IvfIndex::build(&shard, 16, s).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if ivf.search(&q, 50, ivf.nlist()).unwrap().hits != shard.exact_topk(&q, 50).unwrap() {
                return Err("IVF probing every list differs from exact search".into());
            }
        }
    }

    let spec = BlobSpec {
        n: 50_000,
        dim: 16,
        centers: 1000,
        noise: 0.3,
        seed: 4,
    };
    let shard = EmbeddingShard::new(16, (0..50_000).collect(), clustered_vectors(&spec)).unwrap();
    let nlist = default_nlist(shard.len());
    let ivf = IvfIndex::build(&shard, nlist, 4).unwrap();
    let queries: Vec<Vec<f64>> = (0..100)
        .map(|i| {
            shard
                .row(i * 499)
                .iter()
                .map(|&v| f64::from(v) + rng.gen_range(-0.05..0.05))
                .collect()
        })
        .collect();
    let truth: Vec<Vec<(u64, f64)>> = queries
        .iter()
        .map(|q| shard.exact_topk(q, 100).unwrap())
        .collect();
    let quarter = nlist.div_ceil(4);
    let mut probes: Vec<usize> = vec![1, 2, 4, 8, 16, 32, quarter, nlist / 2, nlist];
    probes.sort_unstable();
    probes.dedup();
    let mut curve = Vec::new();
    for &np in &probes {
        let r = queries
            .iter()
            .zip(&truth)
            .map(|(q, t)| recall(t, &ivf.search(q, 100, np).unwrap().hits))
            .sum::<f64>()
            / queries.len() as f64;
        curve.push((np, r));
    }
    let monotone = curve.windows(2).all(|w| w[1].1 >= w[0].1);
    let at_quarter = curve.iter().find(|c| c.0 == quarter).unwrap().1;
    let shown: Vec<String> = curve.iter().map(|(n, r)| format!("{n}:{r:.3}")).collect();
    check(
        monotone && at_quarter >= 0.9 && curve.last().unwrap().1 == 1.0,
        format!(
            "exact = full sort, IVF(all lists) = exact; recall@100 by nprobe (nlist {nlist}) {}",
            shown.join(" ")
        ),
    )
}

fn c5_dataset() -> Outcome {
    let spec = CorpusSpec {
        responses: 2300,
        max_contexts: 60,
        seed: 5,
        ..Default::default()
    };
    let pairs = dedup_pairs(&filter_pairs(&generate_corpus(&spec)));
    let split = build_splits(
        &pairs,
        &SplitConfig {
            mc_size: 500,
            sc_size: 500,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let mut source: HashMap<&str, usize> = HashMap::new();
    for p in &pairs {
        *source.entry(p.response.as_str()).or_default() += 1;
    }
    let db_responses: HashSet<&str> = split.database.iter().map(|p| p.response.as_str()).collect();
    let db_contexts: HashSet<&[String]> = split
        .database
        .iter()
        .map(|p| p.context.as_slice())
        .collect();
    let mut violations = 0;
    violations += split
        .mc_test
        .iter()
        .filter(|p| !db_responses.contains(p.response.as_str()))
        .count();
    violations += split
        .sc_test
        .iter()
        .filter(|p| db_responses.contains(p.response.as_str()))
        .count();
    violations += split
        .train_groups
        .iter()
        .flat_map(|g| &g.contexts)
        .filter(|c| db_contexts.contains(c.as_slice()))
        .count();
    violations += split
        .mc_test
        .iter()
        .filter(|p| !(2..=50).contains(&source[p.response.as_str()]))
        .count();
    let library = check_split(&pairs, &split).len();
    check(
        pairs.len() >= 50_000 && violations == 0 && library == 0,
        format!(
            "{} pairs: {} mc, {} sc, {} database, {} train groups; {violations} violations (library check: {library})",
            pairs.len(),
            split.mc_test.len(),
            split.sc_test.len(),
            split.database.len(),
            split.train_groups.len()
        ),
    )
}

fn c6_contextual() -> Outcome {
    let cfg = desk().train;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let fx = fixture(
            &CorpusSpec {
                responses: 2000,
                seed,
                ..Default::default()
            },
            200,
        );
        let mut cov = HashMap::new();
        for mode in [Mode::Qc, Mode::Qs, Mode::Qr] {
            let mut s = Student::new(fx.model(seed), mode).unwrap();
            train_student(
                &mut s,
                &fx.groups,
                &TrainConfig {
                    seed,
                    ..cfg.clone()
                },
            )
            .unwrap();
            cov.insert(mode, fx.coverage(&s, &[20])[0]);
        }
        let (qc, qs, qr) = (cov[&Mode::Qc], cov[&Mode::Qs], cov[&Mode::Qr]);
        ok &= qc > qr && qs > qr;
        lines.push(format!("seed {seed}: QC {qc:.3} QS {qs:.3} QR {qr:.3}"));
    }
    check(ok, format!("Coverage@20 {}", lines.join("; ")))
}

/// Teacher accuracy on the pairs the student gets wrong: the student's
/// top-ranked wrong context against the best-ranked gold context, for every
/// MC query whose top hit is wrong.
fn teacher_on_student_errors(
    fx: &Fixture,
    student: &Student,
    teacher: &CrossScorer,
) -> (usize, usize) {
    let db = &fx.split.database;
    let by_id: HashMap<u64, &DialoguePair> = db.iter().map(|p| (p.id, p)).collect();
    let table = ResponseTable::from_pairs(db).unwrap();
    let shard = build_shard(student, &fx.vocab, db, Field::Context).unwrap();
    let retriever = Retriever::dense(
        Field::Context,
        DenseIndex::Exact(shard),
        student,
        &fx.vocab,
        &table,
    )
    .unwrap();
    let (mut right, mut total) = (0, 0);
    for q in &fx.split.mc_test {
        let r = retriever.retrieve(q.id, &q.context, db.len()).unwrap();
        let gold = normalize(&q.response);
        let top = &r.hits[0];
        if normalize(&top.response) == gold {
            continue;
        }
        let Some(best_gold) = r.hits.iter().find(|h| normalize(&h.response) == gold) else {
            continue;
        };
        let query = fx.vocab.encode_context(&q.context);
        let good = teacher
            .score(
                &query,
                &by_id[&best_gold.pair_id].encode(Field::Context, &fx.vocab),
            )
            .unwrap();
        let bad = teacher
            .score(
                &query,
                &by_id[&top.pair_id].encode(Field::Context, &fx.vocab),
            )
            .unwrap();
        right += usize::from(good > bad);
        total += 1;
    }
    (right, total)
}

fn c7_distillation() -> Outcome {
    let run = desk();
    let mut lines = Vec::new();
    let mut gains = Vec::new();
    let mut separates = true;
    for seed in 0..3u64 {
        let fx = fixture(
            &CorpusSpec {
                seed,
                ..CorpusSpec::ambiguous_negatives()
            },
            200,
        );
        let cfg = TrainConfig {
            seed,
            ..run.train.clone()
        };
        let mut early = Student::new(fx.model(seed), Mode::Qc).unwrap();
        train_student(
            &mut early,
            &fx.groups,
            &TrainConfig {
                epochs: 10,
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut teacher = CrossScorer::new(fx.model(seed), Field::Context).unwrap();
        train_teacher(
            &mut teacher,
            &fx.groups,
            &TrainConfig {
                seed,
                ..run.teacher.clone()
            },
        )
        .unwrap();

        let cont = TrainConfig {
            seed: seed + 1,
            ..cfg
        };
        let mut plain = early.clone();
        train_student(&mut plain, &fx.groups, &cont).unwrap();
        let mut distilled = early;
        distill_student(&mut distilled, &[&teacher], &fx.groups, &cont).unwrap();

        let (right, total) = teacher_on_student_errors(&fx, &plain, &teacher);
        let teacher_acc = right as f64 / total.max(1) as f64;
        separates &= total > 0 && teacher_acc > 0.5;
        let p = fx.coverage(&plain, &[1, 20]);
        let d = fx.coverage(&distilled, &[1, 20]);
        gains.push(d[0] - p[0]);
        lines.push(format!(
            "seed {seed}: C@1 plain {:.3} distilled {:.3} (C@20 {:.3} -> {:.3}); teacher right on {right}/{total} student errors",
            p[0], d[0], p[1], d[1]
        ));
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let ok = separates && gains.iter().all(|&g| g >= 0.0) && mean > 0.0;
    check(
        ok,
        format!("mean C@1 gain {mean:+.3}; {}", lines.join("; ")),
    )
}

fn c8_database_size() -> Outcome {
    let seed = 8;
    let fx = fixture(
        &CorpusSpec {
            responses: 2000,
            seed,
            ..Default::default()
        },
        200,
    );
    let mut student = Student::new(fx.model(seed), Mode::Qs).unwrap();
    train_student(
        &mut student,
        &fx.groups,
        &TrainConfig {
            epochs: 20,
            seed,
            ..desk().train
        },
    )
    .unwrap();
    let gold: HashSet<String> = fx
        .split
        .mc_test
        .iter()
        .map(|p| normalize(&p.response))
        .collect();
    let distractors: Vec<DialoguePair> = filter_pairs(&generate_corpus(&CorpusSpec {
        responses: 20_000,
        first_id: 10_000_000,
        seed: 88,
        ..Default::default()
    }))
    .into_iter()
    .filter(|p| !gold.contains(&normalize(&p.response)))
    .collect();
    if distractors.len() < 100_000 {
        return Err(format!("only {} distractors generated", distractors.len()));
    }
    let points = db_size_sweep(
        &fx.split.database,
        &distractors,
        &[10_000, 30_000, 100_000],
        &fx.split.mc_test,
        &[20],
        |db| {
            let table = ResponseTable::from_pairs(db)?;
            let shard = build_shard(&student, &fx.vocab, db, Field::Session)?;
            Retriever::dense(
                Field::Session,
                DenseIndex::Exact(shard),
                &student,
                &fx.vocab,
                &table,
            )?
            .retrieve_all(&fx.split.mc_test, 20)
        },
    )
    .unwrap();
    let base = fx.coverage(&student, &[20])[0];
    let covs: Vec<f64> = points.iter().map(|p| p.coverage[&20]).collect();
    let ok = covs[0] <= base && covs.windows(2).all(|w| w[1] <= w[0]);
    check(
        ok,
        format!(
            "QS Coverage@20: base db {base:.3}, +10k {:.3}, +30k {:.3}, +100k {:.3}",
            covs[0], covs[1], covs[2]
        ),
    )
}

fn c9_dqs_algebra() -> Outcome {
    let fx = fixture(
        &CorpusSpec {
            responses: 400,
            seed: 9,
            ..Default::default()
        },
        50,
    );
    let student = Student::new(
        ModelConfig {
            init_range: 0.3,
            ..fx.model(9)
        },
        Mode::Dqs,
    )
    .unwrap();
    let db = &fx.split.database;
    let table = ResponseTable::from_pairs(db).unwrap();
    let ctx = build_shard(&student, &fx.vocab, db, Field::Context).unwrap();
    let resp = build_shard(&student, &fx.vocab, db, Field::Response).unwrap();
    let rows: HashMap<u64, usize> = ctx
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let dot = |q: &[f64], row: &[f32]| {
        q.iter()
            .zip(row)
            .map(|(a, &b)| a * f64::from(b))
            .sum::<f64>()
    };
    let one = Retriever::dqs(
        DqsIndexes::new(ctx.clone(), resp.clone(), 1.0).unwrap(),
        Fusion::Exact,
        &student,
        &fx.vocab,
        &table,
    )
    .unwrap();
    let zero = Retriever::dqs(
        DqsIndexes::new(ctx.clone(), resp, 0.0).unwrap(),
        Fusion::Exact,
        &student,
        &fx.vocab,
        &table,
    )
    .unwrap();
    let qc = Retriever::dense(
        Field::Context,
        DenseIndex::Exact(ctx.clone()),
        &student,
        &fx.vocab,
        &table,
    )
    .unwrap();
    let resp_shard = build_shard(&student, &fx.vocab, db, Field::Response).unwrap();
    let mut worst = 0.0f64;
    let mut same_rank = true;
    for q in fx.split.mc_test.iter().chain(&fx.split.sc_test) {
        let v = one.encode_query(&q.context).unwrap();
        for h in one.retrieve(q.id, &q.context, db.len()).unwrap().hits {
            let i = rows[&h.pair_id];
            let expected = dot(&v, ctx.row(i)) + dot(&v, resp_shard.row(i));
            worst = worst.max((h.score - expected).abs());
        }
        let a: Vec<u64> = zero
            .retrieve(q.id, &q.context, 100)
            .unwrap()
            .hits
            .iter()
            .map(|h| h.pair_id)
            .collect();
        let b: Vec<u64> = qc
            .retrieve(q.id, &q.context, 100)
            .unwrap()
            .hits
            .iter()
            .map(|h| h.pair_id)
            .collect();
        same_rank &= a == b;
    }
    check(
        worst <= 1e-12 && same_rank,
        format!("max |DQS(1) - (QC + QR)| = {worst:.1e} over {} pairs; lambda 0 ranking equals QC: {same_rank}", db.len()),
    )
}

fn run_cli(workdir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_respsel"))
        .args(args)
        .args(["--workdir", workdir.to_str().unwrap(), "--seed", "3"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(())
}

fn pipeline(workdir: &Path, corpus: &Path, distractors: &Path) -> Result<(), String> {
    let c = corpus.to_str().unwrap();
    let d = distractors.to_str().unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec![
            "build-dataset",
            "--corpus",
            c,
            "--mc-size",
            "50",
            "--sc-size",
            "20",
        ],
        vec!["train-student", "--mode", "qc", "--epochs", "15"],
        vec!["train-student", "--mode", "dqs", "--epochs", "15"],
        vec![
            "train-teacher",
            "--field",
            "context",
            "--teacher-epochs",
            "15",
        ],
        vec![
            "train-teacher",
            "--field",
            "response",
            "--teacher-epochs",
            "5",
        ],
        vec!["distill", "--mode", "qc", "--epochs", "10"],
        vec![
            "distill",
            "--mode",
            "dqs",
            "--student",
            "student_dqs.ckpt",
            "--epochs",
            "5",
        ],
        vec!["build-index", "--backend", "sparse", "--field", "context"],
        vec!["build-index", "--backend", "exact", "--field", "context"],
        vec!["build-index", "--backend", "ivf", "--field", "context"],
        vec![
            "build-index",
            "--backend",
            "exact",
            "--field",
            "context",
            "--model",
            "distilled_qc.ckpt",
        ],
        vec![
            "build-index",
            "--backend",
            "exact",
            "--field",
            "context",
            "--model",
            "distilled_dqs.ckpt",
        ],
        vec![
            "build-index",
            "--backend",
            "exact",
            "--field",
            "response",
            "--model",
            "distilled_dqs.ckpt",
        ],
        vec!["retrieve", "--mode", "qc", "--backend", "sparse"],
        vec!["retrieve", "--mode", "qc", "--backend", "exact"],
        vec!["retrieve", "--mode", "qc", "--backend", "ivf"],
        vec!["retrieve", "--mode", "qc", "--model", "distilled_qc.ckpt"],
        vec!["retrieve", "--mode", "dqs", "--model", "distilled_dqs.ckpt"],
        vec!["evaluate", "--results", "retrieval_bm25_sparse-qc_mc.jsonl"],
        vec![
            "evaluate",
            "--results",
            "retrieval_student_qc_exact-qc_mc.jsonl",
            "--teacher",
            "teacher_qc.ckpt",
        ],
        vec![
            "evaluate",
            "--results",
            "retrieval_student_qc_ivf-qc_mc.jsonl",
        ],
        vec![
            "evaluate",
            "--results",
            "retrieval_distilled_qc_exact-qc_mc.jsonl",
            "--teacher",
            "teacher_qc.ckpt",
        ],
        vec![
            "evaluate",
            "--results",
            "retrieval_distilled_dqs_exact-dqs_mc.jsonl",
        ],
        vec![
            "sweep-db",
            "--mode",
            "qc",
            "--distractors",
            d,
            "--sizes",
            "100,300",
        ],
        vec!["bench", "--mode", "qc", "--repeats", "2"],
    ];
    for s in &steps {
        run_cli(workdir, s)?;
    }
    Ok(())
}

/// File contents with per-query wall-clock timings removed from retrieval
/// output, which is the one field allowed to differ between runs.
fn comparable(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    let name = path.file_name().unwrap().to_string_lossy();
    if !name.starts_with("retrieval_") {
        return bytes;
    }
    String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_ms");
            v.to_string() + "\n"
        })
        .collect::<String>()
        .into_bytes()
}

fn c10_determinism() -> Outcome {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy_corpus.jsonl");
    let tmp = tempfile::tempdir().unwrap();
    let distractors = tmp.path().join("distractors.jsonl");
    let extra = generate_corpus(&CorpusSpec {
        responses: 80,
        first_id: 5_000_000,
        prefix: "x".into(),
        seed: 10,
        ..Default::default()
    });
    respsel::corpus::write_pairs(&distractors, &extra).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a, &corpus, &distractors)?;
    pipeline(&b, &corpus, &distractors)?;
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with("bench_"))
        .collect();
    names.sort();
    let mut differing = Vec::new();
    let mut kinds: BTreeSet<&str> = BTreeSet::new();
    for n in &names {
        let (pa, pb) = (a.join(n), b.join(n));
        if !pb.exists() || comparable(&pa) != comparable(&pb) {
            differing.push(n.clone());
        }
        for (suffix, kind) in [
            (".ckpt", "checkpoints"),
            (".idx", "indexes"),
            (".emb", "indexes"),
            (".ivf", "indexes"),
        ] {
            if n.ends_with(suffix) {
                kinds.insert(kind);
            }
        }
        if n.starts_with("eval_") {
            kinds.insert("eval reports");
        }
    }
    check(
        differing.is_empty() && kinds.len() == 3,
        format!(
            "{} artifacts compared ({}; bench timings excluded, retrieval compared without elapsed_ms); differing: {differing:?}",
            names.len(),
            kinds.into_iter().collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c11_sharing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let vocab = 500;
    let shared = Student::new(
        ModelConfig {
            share_encoders: true,
            init_range: 0.3,
            ..ModelConfig::with_vocab(vocab)
        },
        Mode::Qc,
    )
    .unwrap();
    let mut equal = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..60);
        let x: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let q = shared.encode_query(&x).unwrap();
        let c = shared.encode(Role::Context, &x).unwrap();
        equal += usize::from(
            q.iter()
                .map(|v| v.to_bits())
                .eq(c.iter().map(|v| v.to_bits())),
        );
    }
    let fx = fixture(
        &CorpusSpec {
            responses: 2000,
            seed: 0,
            ..Default::default()
        },
        200,
    );
    let cfg = TrainConfig {
        seed: 0,
        ..desk().train
    };
    let mut cov = Vec::new();
    for share in [false, true] {
        let mut s = Student::new(
            ModelConfig {
                share_encoders: share,
                ..fx.model(0)
            },
            Mode::Qc,
        )
        .unwrap();
        train_student(&mut s, &fx.groups, &cfg).unwrap();
        cov.push(fx.coverage(&s, &[20])[0]);
    }
    let probe = similarity(
        &shared.encode_query(&[1, 2]).unwrap(),
        &shared.encode(Role::Context, &[1, 2]).unwrap(),
    )
    .unwrap();
    check(
        equal == 1000 && probe.is_finite(),
        format!(
            "{equal}/1000 inputs bit-equal; QC Coverage@20 unshared {:.3}, shared {:.3}, gap {:+.3}",
            cov[0],
            cov[1],
            cov[1] - cov[0]
        ),
    )
}

// ---------------------------------------------------------------- driver

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", c1_gradients),
        (
            2,
            "single-positive loss equals cross-entropy",
            c2_equivalence,
        ),
        (3, "BM25 oracle equivalence", c3_bm25),
        (4, "dense index correctness", c4_dense),
        (5, "dataset invariants", c5_dataset),
        (6, "contextual beats non-contextual", c6_contextual),
        (7, "distillation benefit", c7_distillation),
        (8, "database-size trend", c8_database_size),
        (9, "DQS algebra", c9_dqs_algebra),
        (10, "CLI determinism", c10_determinism),
        (11, "parameter sharing", c11_sharing),
    ];
    let selected: HashSet<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name} ({secs:.0}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.0}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
