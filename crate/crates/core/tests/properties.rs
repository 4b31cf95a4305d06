use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;

use datadiv::corpus::{merge_dedup, stats, ParallelCorpus, Sentence};
use datadiv::decode::{self, length_normalized, DecodeConfig, Ensemble, StepScorer};
use datadiv::expcli::ExperimentConfig;
use datadiv::metrics::{confidence_stats, pairwise_bleu};
use datadiv::model::{load_checkpoint, save_checkpoint, Checkpoint, Direction, ModelConfig, TranslationModel};
use datadiv::numerics::ops::{layer_norm, softmax};
use datadiv::numerics::Tensor;
use datadiv::tokenizer::{build_vocab, learn_bpe, Sides, Vocabulary, UNK};

fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec("[a-c]{1,2}", 1..4)
}

fn corpus(min: usize, max: usize) -> impl Strategy<Value = ParallelCorpus> {
    prop::collection::vec((sentence(), sentence()), min..max).prop_map(|pairs| {
        let (s, t) = pairs.into_iter().unzip();
        ParallelCorpus::from_sides("p", s, t)
    })
}

fn key_set(c: &ParallelCorpus) -> HashSet<(Sentence, Sentence)> {
    c.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect()
}

fn tiny_model(seed: u64) -> TranslationModel {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 8,
        dropout: 0.0,
        max_positions: 16,
        ..ModelConfig::default()
    };
    let vocab = Arc::new(Vocabulary::from_tokens((0..4).map(|i| format!("w{i}"))));
    TranslationModel::init(config, vocab, seed, Direction::SourceToTarget).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_idempotent_and_keeps_every_distinct_pair(a in corpus(0, 10), b in corpus(0, 10)) {
        let merged = merge_dedup(&[&a, &b]).unwrap();
        let again = merge_dedup(&[&merged, &merged]).unwrap();
        prop_assert_eq!(key_set(&again), key_set(&merged));
        prop_assert_eq!(again.len(), merged.len());
        let mut union = key_set(&a);
        union.extend(key_set(&b));
        prop_assert_eq!(key_set(&merged), union.clone());
        prop_assert_eq!(merged.len(), union.len());
        prop_assert!(merged.len() <= a.len() + b.len());
        let s = stats(&merged);
        prop_assert!((0.0..=1.0).contains(&s.duplicate_rate));
    }

    #[test]
    fn merge_keeps_first_occurrence_order(a in corpus(0, 10), b in corpus(0, 10)) {
        let merged = merge_dedup(&[&a, &b]).unwrap();
        let mut seen = HashSet::new();
        let expected: Vec<_> = a.pairs.iter().chain(&b.pairs)
            .filter(|p| seen.insert((p.source.clone(), p.target.clone())))
            .map(|p| (p.source.clone(), p.target.clone()))
            .collect();
        let got: Vec<_> = merged.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn bpe_is_deterministic_and_covers_its_corpus(c in corpus(1, 12), merges in 0usize..30) {
        let a = learn_bpe(&c, merges, true).unwrap();
        let b = learn_bpe(&c, merges, true).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        let vocab = build_vocab(&a, &c, Sides::Shared);
        for p in &c.pairs {
            for side in [&p.source, &p.target] {
                let ids = vocab.encode(&a.apply(side));
                prop_assert!(!ids.contains(&UNK));
                prop_assert_eq!(&a.decode(&a.apply(side)), side);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..4)) {
        let y = softmax(&Tensor::from_rows(&rows).unwrap());
        for i in 0..y.rows() {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..4)) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|&x| (x - r[0]).abs() > 1e-3)));
        let x = Tensor::from_rows(&rows).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::filled(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
        for i in 0..y.rows() {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 6.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn length_normalized_score_is_monotone_in_logprob(a in -50.0f64..0.0, b in -50.0f64..0.0, len in 1usize..30, alpha in 0.0f64..2.0) {
        prop_assume!(a < b);
        prop_assert!(length_normalized(a, len, alpha) < length_normalized(b, len, alpha));
        prop_assert_eq!(length_normalized(a, len, 0.0), a);
    }

    #[test]
    fn pairwise_bleu_ignores_set_order(sets in prop::collection::vec(prop::collection::vec(prop::collection::vec(0u8..4, 1..6), 3), 2..5)) {
        let forward = pairwise_bleu(&sets, false).unwrap();
        let mut reversed = sets.clone();
        reversed.reverse();
        let backward = pairwise_bleu(&reversed, false).unwrap();
        prop_assert!((forward - backward).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&forward));
    }

    #[test]
    fn identical_sets_have_full_pairwise_bleu(set in prop::collection::vec(prop::collection::vec(0u8..4, 1..6), 1..4), copies in 2usize..5) {
        prop_assert_eq!(pairwise_bleu(&vec![set; copies], false).unwrap(), 100.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_exact(seed in 0u64..1000) {
        let m = tiny_model(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::from_model(&m, None, 3, Some(1.5)), &path).unwrap();
        let back = load_checkpoint(&path).unwrap().to_model();
        prop_assert_eq!(back.params.to_le_bytes(), m.params.to_le_bytes());
        let src = [4, 5, 6];
        let tgt = [5, 7];
        prop_assert_eq!(back.forward_logits(&src, &tgt).unwrap(), m.forward_logits(&src, &tgt).unwrap());
    }

    #[test]
    fn ensemble_of_one_matches_member(seed in 0u64..1000, src in prop::collection::vec(4usize..8, 1..5)) {
        let m = [tiny_model(seed)];
        let ens = Ensemble::new(&m).unwrap();
        let (_, a) = ens.begin(&src).unwrap();
        let (_, b) = m[0].begin(&src).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12 || (x.is_infinite() && y.is_infinite()));
        }
        let cfg = DecodeConfig::greedy();
        prop_assert_eq!(decode::greedy(&ens, &src, &cfg).unwrap().tokens, decode::greedy(&m[0], &src, &cfg).unwrap().tokens);
    }

    #[test]
    fn ensemble_ignores_member_order(seed in 0u64..1000, src in prop::collection::vec(4usize..8, 1..5)) {
        let ab = [tiny_model(seed), tiny_model(seed + 1)];
        let ba = [tiny_model(seed + 1), tiny_model(seed)];
        let (_, x) = Ensemble::new(&ab).unwrap().begin(&src).unwrap();
        let (_, y) = Ensemble::new(&ba).unwrap().begin(&src).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() < 1e-12 || (p.is_infinite() && q.is_infinite()));
        }
    }

    #[test]
    fn confidence_stats_are_probabilities(seed in 0u64..1000, srcs in prop::collection::vec(prop::collection::vec(4usize..8, 1..4), 1..3)) {
        let teachers = [tiny_model(seed), tiny_model(seed + 7)];
        let student = tiny_model(seed + 13);
        let cfg = DecodeConfig { max_len_cap: Some(6), ..DecodeConfig::greedy() };
        let s = confidence_stats(&teachers, Some(&student), &srcs, &cfg).unwrap();
        for v in [s.teacher_self, s.teacher_ensemble_max, s.student_on_teachers.unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn beam_with_zero_alpha_ranks_by_logprob(seed in 0u64..1000) {
        let m = tiny_model(seed);
        let cfg = DecodeConfig { max_len_cap: Some(5), ..DecodeConfig::beam(4, 0.0) };
        let nbest = decode::beam_search_nbest(&m, &[4, 5], &cfg).unwrap();
        for w in nbest.windows(2) {
            prop_assert!(w[0].logprob >= w[1].logprob);
            prop_assert_eq!(w[0].score, w[0].logprob);
        }
    }

    #[test]
    fn config_hash_is_stable_under_reserialization(steps in 1usize..5000, k in 1usize..6) {
        let mut c = ExperimentConfig::default();
        c.diversify.k = k;
        c.diversify.student_train.steps = steps;
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        let mut other = c.clone();
        other.diversify.k = k + 1;
        prop_assert_ne!(other.hash(), c.hash());
    }
}
