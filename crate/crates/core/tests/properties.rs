//! Property tests over the public API.

use std::collections::HashSet;

use proptest::prelude::*;

use respsel::corpus::{build_splits, check_split, dedup_pairs, filter_pairs, Field, SplitConfig};
use respsel::dense::{EmbeddingShard, IvfIndex};
use respsel::models::{Mode, ModelConfig, Student};
use respsel::retrieval::DqsIndexes;
use respsel::sparse::{Bm25Params, InvertedIndex};
use respsel::synth::{generate_corpus, uniform_vectors, CorpusSpec};

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn splits_satisfy_invariants(seed in 0u64..1000, responses in 150usize..400, single in 0.1f64..0.6) {
        let pairs = dedup_pairs(&filter_pairs(&generate_corpus(&CorpusSpec {
            responses,
            single_fraction: single,
            seed,
            ..Default::default()
        })));
        let split = build_splits(&pairs, &SplitConfig { mc_size: 20, sc_size: 10, seed, ..Default::default() }).unwrap();
        prop_assert!(check_split(&pairs, &split).is_empty());
        let test_ids: HashSet<u64> = split.mc_test.iter().chain(&split.sc_test).map(|p| p.id).collect();
        prop_assert!(split.database.iter().all(|p| !test_ids.contains(&p.id)));
        let again = build_splits(&pairs, &SplitConfig { mc_size: 20, sc_size: 10, seed, ..Default::default() }).unwrap();
        prop_assert_eq!(again.database, split.database);
    }

    #[test]
    fn dqs_score_is_linear_in_lambda(seed in 0u64..1000, lambda in 0.0f64..3.0) {
        let n = 40;
        let ids: Vec<u64> = (0..n as u64).collect();
        let c = EmbeddingShard::new(8, ids.clone(), uniform_vectors(n, 8, seed)).unwrap();
        let r = EmbeddingShard::new(8, ids, uniform_vectors(n, 8, seed + 1)).unwrap();
        let idx = DqsIndexes::new(c, r, lambda).unwrap();
        let q: Vec<f64> = uniform_vectors(1, 8, seed + 2).into_iter().map(f64::from).collect();
        let (hits, scanned) = idx.exact(&q, n).unwrap();
        prop_assert_eq!(scanned, 2 * n);
        for (id, s) in hits {
            let (sc, sr) = idx.pair_scores(&q, id).unwrap();
            prop_assert!((s - (sc + lambda * sr)).abs() < 1e-12);
        }
    }

    #[test]
    fn ivf_round_trip_preserves_results(seed in 0u64..1000, nlist in 1usize..12) {
        let shard = EmbeddingShard::new(4, (0..300).collect(), uniform_vectors(300, 4, seed)).unwrap();
        let ivf = IvfIndex::build(&shard, nlist, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ivf");
        ivf.save(&path).unwrap();
        let back = IvfIndex::load(&path).unwrap();
        let q = [0.3, -0.2, 0.9, 0.1];
        for np in 1..=nlist {
            prop_assert_eq!(back.search(&q, 20, np).unwrap(), ivf.search(&q, 20, np).unwrap());
        }
        prop_assert_eq!(ivf.list_sizes().iter().sum::<usize>(), 300);
    }

    #[test]
    fn bm25_scores_are_non_increasing(seed in 0u64..1000) {
        let pairs = generate_corpus(&CorpusSpec { responses: 60, seed, ..Default::default() });
        let index = InvertedIndex::build(pairs.iter().map(|p| (p.id, p.words(Field::Context))), Field::Context).unwrap();
        let query = pairs[0].words(Field::Context);
        let hits = index.search(&query, 1000, &Bm25Params::default());
        prop_assert!(hits.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        prop_assert!(hits.iter().any(|h| h.0 == pairs[0].id));
    }
}

#[test]
fn student_checkpoint_round_trip_is_bit_exact() {
    let student = Student::new(
        ModelConfig {
            init_range: 0.2,
            ..ModelConfig::with_vocab(50)
        },
        Mode::Dqs,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    student.save(&path).unwrap();
    let back = Student::load(&path).unwrap();
    assert_eq!(back.mode(), Mode::Dqs);
    let x = [3u32, 9, 17, 4];
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(
        bits(back.encode_query(&x).unwrap()),
        bits(student.encode_query(&x).unwrap())
    );
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
