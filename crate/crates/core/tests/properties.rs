use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;

use todspec::adapters::{
    compose_forward, init_adapters, inject, AdapterConfig, Compose, FusionWeights,
};
use todspec::corpus::{clean_text, match_terms, match_terms_naive};
use todspec::data::{Dialog, Ontology, SlotValue, Speaker, Utterance};
use todspec::eval::{joint_goal_accuracy, TurnPrediction};
use todspec::neural::{EncoderConfig, EncoderModel, Rng};
use todspec::objectives::{nce_from_scores, pessimistic_rank};
use todspec::terms::{count_ngrams, score_and_rank, DomainTermSet};

const WORDS: [&str; 8] = ["taxi", "cab", "book", "a", "the", "station", "north", "5"];

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => proptest::sample::select(WORDS.to_vec()).prop_map(str::to_string),
        1 => proptest::sample::select(vec![",", ".", "?"]).prop_map(str::to_string),
    ]
}

fn utterance() -> impl Strategy<Value = String> {
    proptest::collection::vec(word(), 1..7).prop_map(|w| w.join(" "))
}

fn dialogs() -> impl Strategy<Value = Vec<Dialog>> {
    proptest::collection::vec(proptest::collection::vec(utterance(), 1..4), 1..12).prop_map(|ds| {
        ds.into_iter()
            .enumerate()
            .map(|(i, turns)| Dialog {
                id: format!("d{i}"),
                domains: ["taxi".to_string()].into(),
                turns: turns
                    .into_iter()
                    .map(|text| Utterance {
                        speaker: Speaker::User,
                        text,
                    })
                    .collect(),
                states: None,
            })
            .collect()
    })
}

fn term_set(terms: Vec<String>) -> DomainTermSet {
    let mut uniq: Vec<String> = Vec::new();
    for t in terms {
        if !uniq.contains(&t) {
            uniq.push(t);
        }
    }
    DomainTermSet {
        domain: "taxi".into(),
        top_n: uniq.len(),
        terms: uniq,
        excluded: vec![],
        variants_added: vec![],
        scores: BTreeMap::new(),
        short: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cleaning_is_idempotent(s in "[ A-Za-z0-9@.:/,!]{0,60}") {
        if let (Some(once), _) = clean_text(&s, 1) {
            prop_assert_eq!(clean_text(&once, 1).0, Some(once.clone()));
        }
    }

    #[test]
    fn ngram_counts_match_a_window_scan(ds in dialogs()) {
        let counts = count_ngrams(&ds).unwrap();
        for (gram, c) in &counts {
            let needle: Vec<&str> = gram.split(' ').collect();
            let mut tf = 0;
            let mut df = 0;
            for d in &ds {
                let mut hit = false;
                for t in &d.turns {
                    let toks: Vec<&str> = t.text.split(' ').collect();
                    let n = toks.windows(needle.len()).filter(|w| *w == needle.as_slice()).count() as u64;
                    tf += n;
                    hit |= n > 0;
                }
                df += u64::from(hit);
            }
            prop_assert_eq!((c.tf, c.df), (tf, df));
        }
        let ranked = score_and_rank(&counts, ds.len() as u64).unwrap();
        for pair in ranked.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn indexed_matcher_agrees_with_naive(text in utterance(), terms in proptest::collection::vec(utterance(), 1..6)) {
        let set = term_set(terms);
        prop_assert_eq!(match_terms(&text, &set), match_terms_naive(&text, &set));
    }

    #[test]
    fn nce_is_shift_invariant(scores in proptest::collection::vec(-20.0f64..20.0, 2..12), c in -100.0f64..100.0, t in 0usize..12) {
        let t = t % scores.len();
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let (a, _, ra) = nce_from_scores(&scores, t).unwrap();
        let (b, _, rb) = nce_from_scores(&shifted, t).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(ra, rb);
    }

    #[test]
    fn rank_ignores_positive_scaling(scores in proptest::collection::vec(-5i32..5, 1..10), k in 1u32..50, g in 0usize..10) {
        let g = g % scores.len();
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let scaled: Vec<f64> = s.iter().map(|x| x * k as f64).collect();
        prop_assert_eq!(pessimistic_rank(&s, g), pessimistic_rank(&scaled, g));
    }

    #[test]
    fn pessimistic_rank_bounds_optimistic(scores in proptest::collection::vec(-3i32..3, 1..10), g in 0usize..10) {
        let g = g % scores.len();
        let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
        let optimistic = 1 + s.iter().filter(|&&x| x > s[g]).count();
        let p = pessimistic_rank(&s, g);
        prop_assert!(optimistic <= p && p <= s.len());
    }

    #[test]
    fn jga_is_permutation_invariant_and_monotone(
        turns in proptest::collection::vec((0usize..3, 0usize..3), 1..12),
        seed in any::<u64>(),
    ) {
        let mut ont = Ontology::default();
        ont.insert("taxi", "destination", vec!["station".into(), "airport".into()]).unwrap();
        let vals = ["station", "airport", "none"];
        let gold: Vec<Vec<SlotValue>> = turns
            .iter()
            .map(|&(g, _)| if g == 2 { vec![] } else { vec![SlotValue::new("taxi", "destination", vals[g])] })
            .collect();
        let preds: Vec<TurnPrediction> = turns
            .iter()
            .map(|&(_, p)| [(("taxi".to_string(), "destination".to_string()), vals[p].to_string())].into())
            .collect();
        let base = joint_goal_accuracy(&preds, &gold, &ont).unwrap();
        let mut order: Vec<usize> = (0..turns.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut Rng::seed_from_u64(seed));
        let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let g2: Vec<_> = order.iter().map(|&i| gold[i].clone()).collect();
        prop_assert!((joint_goal_accuracy(&p2, &g2, &ont).unwrap() - base).abs() < 1e-12);
        let mut fixed = preds.clone();
        fixed[0] = [(("taxi".to_string(), "destination".to_string()), vals[turns[0].0].to_string())].into();
        prop_assert!(joint_goal_accuracy(&fixed, &gold, &ont).unwrap() >= base);
    }

    #[test]
    fn fused_output_lies_between_bank_outputs(l0 in -3.0f64..3.0, l1 in -3.0f64..3.0, seed in 0u64..1000) {
        let cfg = EncoderConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, max_len: 8, vocab_size: 10, dropout: 0.0 };
        let base = EncoderModel::<f64>::new(cfg, seed).unwrap();
        let acfg = AdapterConfig { bottleneck: 2, ..AdapterConfig::for_hidden(8) };
        let mut banks = Vec::new();
        let mut rng = Rng::seed_from_u64(seed);
        for (i, d) in ["taxi", "hotel"].iter().enumerate() {
            let mut b = init_adapters::<f64>(&base.config, &acfg, d, seed + i as u64).unwrap();
            for v in b.layers[0].up.iter_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            banks.push(b);
        }
        let w = FusionWeights { logits: vec![vec![l0, l1]] };
        let fused = inject(&base, &banks, Compose::Fuse, Some(&w)).unwrap().0;
        let a = inject(&base, &banks[..1], Compose::Single, None).unwrap().0;
        let b = inject(&base, &banks[1..], Compose::Single, None).unwrap().0;
        let hid: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let r: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let f = compose_forward(&fused, 0, &hid, &r).unwrap();
        let ya = compose_forward(&a, 0, &hid, &r).unwrap();
        let yb = compose_forward(&b, 0, &hid, &r).unwrap();
        for i in 0..f.len() {
            let (lo, hi) = (ya[i].min(yb[i]), ya[i].max(yb[i]));
            prop_assert!(f[i] >= lo - 1e-12 && f[i] <= hi + 1e-12);
        }
    }
}
