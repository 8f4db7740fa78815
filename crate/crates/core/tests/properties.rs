use mrp_core::bench::{softmax_tv_ratio, spearman, SOFTMAX_TV_BOUND};
use mrp_core::checkpoint::{decode, encode};
use mrp_core::corpus::{Vocab, MASK};
use mrp_core::diffusion::{corrupt_at_rate, select_dynamic, select_static, Candidate, SequenceState};
use mrp_core::inference::{verify, DraftRecord};
use mrp_core::numerics::{kl_row, softmax_rows, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn candidates(probs: &[f64]) -> Vec<Candidate> {
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| Candidate {
            position: 10 + i,
            prob: p,
            token: 4,
        })
        .collect()
}

proptest! {
    #[test]
    fn static_selection_takes_the_top_r(probs in prop::collection::vec(0.0f64..1.0, 1..12), r in 1usize..15) {
        let conf = candidates(&probs);
        let sel = select_static(&conf, r);
        prop_assert_eq!(sel.len(), r.min(probs.len()));
        prop_assert!(sel.windows(2).all(|w| w[0].position < w[1].position));
        let min_sel = sel.iter().map(|c| c.prob).fold(f64::INFINITY, f64::min);
        let unselected = conf.iter().filter(|c| !sel.iter().any(|s| s.position == c.position));
        for c in unselected {
            prop_assert!(c.prob <= min_sel);
        }
    }

    #[test]
    fn dynamic_selection_is_strict_with_fallback(probs in prop::collection::vec(0.0f64..1.0, 1..12), tau in 0.01f64..1.0) {
        let conf = candidates(&probs);
        let sel = select_dynamic(&conf, tau);
        prop_assert!(!sel.is_empty());
        let above = probs.iter().filter(|&&p| p > tau).count();
        if above == 0 {
            prop_assert_eq!(sel.len(), 1);
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(sel[0].prob, max);
        } else {
            prop_assert_eq!(sel.len(), above);
            prop_assert!(sel.iter().all(|c| c.prob > tau));
        }
    }

    #[test]
    fn corruption_keeps_the_mask_invariant(seed in any::<u64>(), rate in 0.0f64..1.0, plen in 1usize..3, blocks in 1usize..3) {
        let b = 4;
        let ids: Vec<usize> = (0..(plen + blocks) * b).map(|i| 4 + i % 10).collect();
        let x0 = SequenceState::new(ids.clone(), vec![false; ids.len()], plen * b, b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = corrupt_at_rate(&x0, rate, &mut rng).unwrap();
        for i in 0..ids.len() {
            prop_assert_eq!(x.masked[i], x.ids[i] == MASK);
            if i < plen * b {
                prop_assert!(!x.masked[i]);
            }
            if !x.masked[i] {
                prop_assert_eq!(x.ids[i], ids[i]);
            }
        }
    }

    #[test]
    fn tokenizer_round_trips(s in "[0-9a-z+= -]{0,20}") {
        let v = Vocab::new();
        let ids = v.tokenize(&s).unwrap();
        prop_assert!(ids.iter().all(|&i| !Vocab::is_special(i)));
        prop_assert_eq!(v.detokenize(&ids), s);
    }

    #[test]
    fn softmax_sensitivity_is_at_most_half(a in prop::collection::vec(-20.0f64..20.0, 2..20), shift in prop::collection::vec(-3.0f64..3.0, 20)) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, d)| x + d).collect();
        prop_assert!(softmax_tv_ratio(&a, &b) <= SOFTMAX_TV_BOUND + 1e-9);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal_rows(a in prop::collection::vec(-5.0f64..5.0, 2..10), b in prop::collection::vec(-5.0f64..5.0, 10)) {
        let n = a.len();
        let p = softmax_rows(&Tensor::new(vec![1, n], a.clone()).unwrap()).unwrap();
        let q = softmax_rows(&Tensor::new(vec![1, n], b[..n].to_vec()).unwrap()).unwrap();
        prop_assert!(kl_row(p.data(), q.data()) >= -1e-12);
        prop_assert!(kl_row(p.data(), p.data()).abs() < 1e-12);
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn verify_partitions_drafts(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 1..8), tokens in prop::collection::vec(1usize..6, 8)) {
        let l = Tensor::from_rows(&rows).unwrap();
        let drafts: Vec<DraftRecord> = (0..rows.len())
            .map(|p| DraftRecord { position: p, token: tokens[p], round: 1, confidence: 0.5 })
            .collect();
        let (acc, rej) = verify(&drafts, &l, &[]).unwrap();
        prop_assert_eq!(acc.len() + rej.len(), drafts.len());
        prop_assert!(acc.iter().all(|p| !rej.contains(p)));
    }

    #[test]
    fn container_round_trips(shape in prop::collection::vec(1usize..5, 1..3), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&shape, 3.0, &mut rng);
        let bytes = encode(&[("t", &t)], serde_json::json!({"seed": seed})).unwrap();
        let (back, meta) = decode(&bytes).unwrap();
        prop_assert_eq!(back[0].1.shape(), t.shape());
        for (x, y) in t.data().iter().zip(back[0].1.data()) {
            prop_assert_eq!(*x as f32 as f64, *y);
        }
        prop_assert_eq!(meta["seed"].as_u64(), Some(seed));
    }

    #[test]
    fn spearman_is_bounded_and_odd(x in prop::collection::vec(-10.0f64..10.0, 3..20), y in prop::collection::vec(-10.0f64..10.0, 20)) {
        let y = &y[..x.len()];
        if let Some(r) = spearman(&x, y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let neg: Vec<f64> = y.iter().map(|v| -v).collect();
            prop_assert!((spearman(&x, &neg).unwrap() + r).abs() < 1e-9);
        }
    }
}
