use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tinyrec::data::{
    build_rec_samples, format_mind_behaviors, parse_mind_behaviors_str, Impression, NewsArticle, NewsTable,
};
use tinyrec::distill::teacher_weights;
use tinyrec::encoders::{EncoderConfig, UserEncoder};
use tinyrec::eval::{auc, count_params, mrr, ndcg_at_k};

fn losses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 1..6)
}

fn impression() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![-2.0..2.0f64, (-2i32..2).prop_map(|x| x as f64)], n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

fn article(i: usize) -> NewsArticle {
    NewsArticle {
        id: format!("N{i}"),
        category: String::new(),
        subcategory: String::new(),
        title: String::new(),
        abstract_text: String::new(),
        url: String::new(),
        title_entities: String::new(),
        abstract_entities: String::new(),
        title_tokens: vec![i + 1],
        body_tokens: Vec::new(),
    }
}

fn impressions() -> impl Strategy<Value = Vec<Impression>> {
    let one = (
        prop::collection::vec(0usize..30, 0..6),
        prop::collection::vec((0usize..30, 0u8..2), 1..8),
        "[A-Za-z0-9:/ ]{0,20}",
    );
    prop::collection::vec(one, 1..6).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (hist, cands, time))| Impression {
                id: (i + 1).to_string(),
                user: format!("U{}", i % 3),
                time: time.trim().to_string(),
                history: hist.iter().map(|h| format!("N{h}")).collect(),
                candidates: cands.iter().map(|(c, l)| (format!("N{c}"), *l)).collect(),
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn teacher_weights_form_a_simplex(l in losses(), omega in 0.01..10.0f64) {
        let w = teacher_weights(&l, omega).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn teacher_weights_follow_teacher_permutation(l in losses(), omega in 0.01..10.0f64, rot in 0usize..6) {
        let w = teacher_weights(&l, omega).unwrap();
        let r = rot % l.len();
        let mut lr = l.clone();
        lr.rotate_left(r);
        let mut expect = w.clone();
        expect.rotate_left(r);
        let got = teacher_weights(&lr, omega).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn teacher_weights_ignore_a_common_loss_shift(l in losses(), omega in 0.01..10.0f64, c in -3.0..3.0f64) {
        let w = teacher_weights(&l, omega).unwrap();
        let shifted: Vec<f64> = l.iter().map(|x| x + c).collect();
        let ws = teacher_weights(&shifted, omega).unwrap();
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ranking_metrics_are_bounded((scores, labels) in impression()) {
        prop_assume!(labels.contains(&1));
        let m = mrr(&scores, &labels);
        let n = ndcg_at_k(&scores, &labels, 10);
        prop_assert!(m > 0.0 && m <= 1.0);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        if let Some(a) = auc(&scores, &labels) {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn auc_flips_under_score_negation((scores, labels) in impression()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        match (auc(&scores, &labels), auc(&neg, &labels)) {
            (Some(a), Some(b)) => prop_assert!((a + b - 1.0).abs() <= 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn behaviors_round_trip(imps in impressions()) {
        let text = format_mind_behaviors(&imps);
        let back = parse_mind_behaviors_str(&text, Path::new("gen.tsv")).unwrap();
        prop_assert_eq!(&back, &imps);
        prop_assert_eq!(format_mind_behaviors(&back), text);
    }

    #[test]
    fn sampled_negatives_are_unclicked_candidates(imps in impressions(), k in 1usize..5, seed in any::<u64>()) {
        let news: Vec<NewsArticle> = (0..30).map(article).collect();
        let table = NewsTable::new(&news);
        let samples = build_rec_samples(&imps, &table, k, 50, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for s in &samples {
            let imp = &imps[s.impression];
            prop_assert_eq!(s.candidates.len(), k + 1);
            for (j, &c) in s.candidates.iter().enumerate() {
                let id = table.id(c);
                let want = u8::from(j == s.label);
                prop_assert!(imp.candidates.iter().any(|(cid, l)| cid == id && *l == want));
            }
        }
    }

    #[test]
    fn user_vector_ignores_history_order(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 1..7),
        seed in any::<u64>(),
        rot in 0usize..7,
    ) {
        let enc = UserEncoder::new(6, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        let mask = vec![true; rows.len()];
        let (u, w) = enc.encode_user(&rows, &mask).unwrap();
        let r = rot % rows.len();
        let mut rotated = rows.clone();
        rotated.rotate_left(r);
        let (ur, wr) = enc.encode_user(&rotated, &mask).unwrap();
        for (a, b) in u.iter().zip(&ur) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let mut expect = w.clone();
        expect.rotate_left(r);
        for (a, b) in wr.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn four_layer_student_is_smaller_than_twelve_layer_teacher() {
    let cfg = |n_layers| EncoderConfig {
        n_layers,
        ..EncoderConfig::default()
    };
    assert!(count_params(&cfg(4)).total < count_params(&cfg(12)).total);
}
