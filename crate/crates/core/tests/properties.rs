//! Randomized invariants.

use proptest::prelude::*;
use sevlm::data::{generate_synthetic, split_dataset, SyntheticSpec};
use sevlm::generation::nucleus_keep;
use sevlm::heads::{contrastive_loss_value, ContrastiveForm};
use sevlm::metrics::{corpus_bleu, paired_bootstrap_scores, rouge_l, unique_fraction};
use sevlm::text::{normalize, tokenize};
use sevlm::{Tape, Tensor, VadLexicon, Vocab};

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "dark", "calm", "scary", "red", "circle"]).prop_map(str::to_string)
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 0..12)
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, 1..30).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect()
    })
}

proptest! {
    #[test]
    fn nucleus_is_minimal_prefix(probs in distribution(), p in 0.01f64..1.0) {
        let kept = nucleus_keep(&probs, p);
        let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
        prop_assert!(mass >= p - 1e-12);
        if kept.len() > 1 {
            let without_last = mass - probs[*kept.last().unwrap()];
            prop_assert!(without_last < p);
        }
        // Kept tokens dominate the dropped ones.
        let min_kept = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
        for (i, &q) in probs.iter().enumerate() {
            if !kept.contains(&i) {
                prop_assert!(q <= min_kept);
            }
        }
    }

    #[test]
    fn nucleus_grows_with_p(probs in distribution(), p in 0.01f64..0.99, dp in 0.0f64..0.5) {
        let small = nucleus_keep(&probs, p);
        let large = nucleus_keep(&probs, (p + dp).min(1.0));
        prop_assert!(small.len() <= large.len());
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn rouge_and_bleu_bounds(a in sentence(), b in sentence()) {
        let r = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        if !a.is_empty() {
            prop_assert!((rouge_l(&a, &a) - 1.0).abs() < 1e-12);
            for n in 1..=4 {
                let s = corpus_bleu(std::slice::from_ref(&a), &[vec![b.clone()]], n, true).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            }
        }
    }

    #[test]
    fn unique_fraction_bounds(xs in prop::collection::vec(word(), 1..20)) {
        let u = unique_fraction(&xs).unwrap();
        prop_assert!(u >= 1.0 / xs.len() as f64 - 1e-12 && u <= 1.0);
    }

    #[test]
    fn bootstrap_of_a_system_against_itself(xs in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
        prop_assert_eq!(paired_bootstrap_scores(&xs, &xs, 200, seed).unwrap(), 1.0);
    }

    #[test]
    fn as_printed_contrastive_is_bounded(scores in prop::collection::vec(prop::array::uniform3(-30.0f64..30.0), 1..10)) {
        let v = contrastive_loss_value(&scores, ContrastiveForm::AsPrinted).unwrap();
        prop_assert!(v <= 0.0 && v >= -(scores.len() as f64));
        let nl = contrastive_loss_value(&scores, ContrastiveForm::NegLog).unwrap();
        prop_assert!(nl >= 0.0);
    }

    #[test]
    fn softmax_and_layer_norm_rows(data in prop::collection::vec(-20.0f64..20.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = tape.softmax_last(x, None).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let n = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(n).data().chunks(4) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_is_idempotent(text in "[a-zA-Z ,.!']{0,40}") {
        let once = normalize(&text);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert_eq!(tokenize(&once), tokenize(&text));
    }

    #[test]
    fn vocab_text_round_trip(words in prop::collection::btree_set("[a-z]{1,8}", 0..20)) {
        let sentences: Vec<Vec<String>> = vec![words.into_iter().collect()];
        let v = Vocab::build(sentences.iter().map(Vec::as_slice));
        prop_assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn lexicon_lookup_is_case_insensitive(i in 0usize..50) {
        let lex = VadLexicon::bundled();
        let entries = lex.entries();
        let (w, v) = entries[i % entries.len()];
        prop_assert_eq!(lex.lookup(&w.to_uppercase()), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_partitions_image_ids(size in 1usize..120, seed in any::<u64>()) {
        let samples = generate_synthetic(&SyntheticSpec { size, image_size: 8, ..SyntheticSpec::default() });
        let s = split_dataset(&samples, seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..size).collect::<Vec<_>>());
        prop_assert_eq!(s.train.len(), size * 85 / 100);
        prop_assert_eq!(split_dataset(&samples, seed).unwrap(), s);
    }
}
