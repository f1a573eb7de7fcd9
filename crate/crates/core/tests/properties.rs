use muse_core::adapters::attention_weights;
use muse_core::datasets::wsola_stretch;
use muse_core::fusion::{sample_next, ByteTokenizer, SamplingConfig};
use muse_core::media::Waveform;
use muse_core::metrics::{clap_score, fad, ib_rank, kl_divergence, lsd, EmbeddingSet, RankingTable};
use muse_core::tensor::{softmax_rows, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn rows(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n)
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((1..=n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(a in matrix(3, 4), b in matrix(4, 5)) {
        let got = a.matmul(&b);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                prop_assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
        prop_assert!(a.transpose().t_matmul(&b).max_abs_diff(&got) < 1e-12);
        prop_assert!(a.matmul_t(&b.transpose()).max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 5), causal in any::<bool>()) {
        let s = softmax_rows(&x, causal);
        for r in 0..5 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            if causal {
                prop_assert!(row[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one(a in matrix(6, 4), wq in matrix(4, 4), wk in matrix(4, 4)) {
        let w = attention_weights(&a, &wq, &wk).unwrap();
        prop_assert_eq!(w.shape(), (6, 6));
        for r in 0..6 {
            prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn fad_is_symmetric_nonnegative_and_zero_on_self(r in rows(3..12, 3), g in rows(3..12, 3)) {
        let r = EmbeddingSet::new(r, "r").unwrap();
        let g = EmbeddingSet::new(g, "g").unwrap();
        let rg = fad(&r, &g).unwrap();
        let gr = fad(&g, &r).unwrap();
        prop_assert!(rg >= 0.0);
        prop_assert!((rg - gr).abs() <= 1e-6 * (1.0 + rg.abs()));
        prop_assert!(fad(&r, &r).unwrap() < 1e-8);
    }

    #[test]
    fn clap_is_nonnegative_and_scale_invariant(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        k in 0.1f64..10.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let s = clap_score(&a, &b).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((clap_score(&scaled, &b).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in distribution(6), q in distribution(6)) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ib_rank_sums_to_half_n(table in (2usize..7).prop_flat_map(|n| prop::collection::vec(permutation(n), 1..15))) {
        let n = table[0].len();
        let s = table.len();
        let t = RankingTable::new(table).unwrap();
        prop_assert_eq!(t.numerators().iter().sum::<usize>() * 2, s * n * (n - 1));
        let scores = ib_rank(&t).unwrap();
        prop_assert!((scores.iter().sum::<f64>() - n as f64 / 2.0).abs() <= 1e-12);
        prop_assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lsd_is_zero_on_self_and_nonnegative(
        a in prop::collection::vec(-1.0f64..1.0, 200..2500),
        b in prop::collection::vec(-1.0f64..1.0, 200..2500),
    ) {
        let wa = Waveform::new(a, 16000);
        let wb = Waveform::new(b, 16000);
        prop_assert_eq!(lsd(&wa, &wa).unwrap().value, 0.0);
        let d = lsd(&wa, &wb).unwrap();
        prop_assert!(d.value >= 0.0);
        prop_assert_eq!(d.truncated, wa.len() != wb.len());
    }

    #[test]
    fn tokenizer_roundtrips_text(s in "[ -~]{0,40}") {
        let tok = ByteTokenizer::new(258, 8).unwrap();
        let ids = tok.encode(&s);
        prop_assert!(ids.iter().all(|&i| i < 256));
        prop_assert_eq!(tok.decode(&ids), s);
    }

    #[test]
    fn nucleus_sampling_stays_in_nucleus(logits in prop::collection::vec(-5.0f64..5.0, 2..20), top_p in 0.05f64..1.0, seed in any::<u64>()) {
        let cfg = SamplingConfig { temperature: 1.0, top_p, max_len: 1 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let id = sample_next(&logits, &cfg, &mut rng);
        // Every id with strictly higher logit than the pick belongs to the nucleus too,
        // so the mass above the pick is below top_p.
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        let above: f64 = logits.iter().filter(|&&v| v > logits[id]).map(|v| (v - max).exp() / z).sum();
        prop_assert!(above < top_p + 1e-12);
    }

    #[test]
    fn greedy_picks_argmax(logits in prop::collection::vec(-5.0f64..5.0, 2..20)) {
        let cfg = SamplingConfig { temperature: 0.0, top_p: 0.9, max_len: 1 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let id = sample_next(&logits, &cfg, &mut rng);
        prop_assert!(logits.iter().all(|&v| v <= logits[id]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn wsola_hits_target_length(freq in 110.0f64..880.0, factor in 0.5f64..1.5, n in 8000usize..24000) {
        let w = Waveform::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() * 0.4).collect(),
            16000,
        );
        let out = wsola_stretch(&w, factor).unwrap();
        let want = (n as f64 * factor).round() as i64;
        prop_assert!((out.len() as i64 - want).abs() <= 512);
    }

    #[test]
    fn wav_roundtrip_is_quantization(samples in prop::collection::vec(-1.0f64..1.0, 1..500)) {
        let w = Waveform::new(samples, 16000);
        let back = Waveform::from_wav_bytes(&w.to_wav_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.samples, w.quantized().samples);
    }
}
