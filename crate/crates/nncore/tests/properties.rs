use conkd_nn::transformer::Seq2Seq;
use conkd_nn::{clip_gradients, Graph, Gradients, ParamId, ParamStore, SeqBatch, Tensor, TransformerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grads_from(vals: &[Vec<f64>]) -> Gradients<f64> {
    let mut g = Gradients::new(vals.len());
    for (i, v) in vals.iter().enumerate() {
        g.accumulate(ParamId(i), Tensor::matrix(1, v.len(), v.clone()).unwrap());
    }
    g
}

proptest! {
    #[test]
    fn clipping_never_increases_norm(
        vals in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..6), 1..4),
        max in 0.01f64..20.0,
    ) {
        let mut g = grads_from(&vals);
        let before = g.global_norm();
        let reported = clip_gradients(&mut g, max).unwrap();
        let after = g.global_norm();
        prop_assert!((reported - before).abs() < 1e-12);
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(g.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>(), vals);
        } else {
            // direction preserved
            let f = after / before;
            for ((_, t), v) in g.iter().zip(&vals) {
                for (x, y) in t.data().iter().zip(v) {
                    prop_assert!((x - y * f).abs() < 1e-9);
                }
            }
        }
    }
}

fn model() -> (ParamStore<f32>, Seq2Seq) {
    let cfg = TransformerConfig { layers: 2, hidden: 8, heads: 2, ffn: 8, max_len: 8, dropout: 0.1 };
    let mut s = ParamStore::new();
    let m = Seq2Seq::new(&mut s, "m", 10, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (s, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn decoder_rows_ignore_later_positions(
        src in prop::collection::vec(0usize..10, 1..8),
        prefix in prop::collection::vec(0usize..10, 2..8),
        cut in 0usize..7,
        noise in prop::collection::vec(0usize..10, 8),
    ) {
        let (s, m) = model();
        let t = cut % (prefix.len() - 1);
        let mut mutated = prefix.clone();
        for (i, x) in mutated.iter_mut().enumerate().skip(t + 1) {
            *x = noise[i];
        }
        let run = |p: &[usize]| {
            let mut g = Graph::new(&s);
            let v = m.logits(&mut g, &SeqBatch::new(&[src.clone()]), &SeqBatch::new(&[p.to_vec()])).unwrap();
            g.value(v).clone()
        };
        let (a, b) = (run(&prefix), run(&mutated));
        for r in 0..=t {
            prop_assert_eq!(a.row(r), b.row(r));
        }
        prop_assert!(a.all_finite());
    }
}
