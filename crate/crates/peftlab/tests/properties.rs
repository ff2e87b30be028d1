//! Property tests for the cross-module invariants.

use peftlab::metrics::{bleu, frechet_distance, meteor, rouge_1, rouge_l};
use peftlab::optim::{AdamW, AdamWConfig};
use peftlab::rng;
use peftlab::tensor::{Graph, ParamSet, Tensor};
use proptest::prelude::*;

fn word_vec() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec("[a-f]{1,3}", 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in 1usize..4,
        cols in 2usize..6,
        seed in 0u64..500,
        shift in -40.0f64..40.0,
    ) {
        let data = rng::randn_vec(&mut rng::substream(seed, "prop.softmax", &[]), rows * cols, 3.0);
        let mut g = Graph::new();
        let x = g.leaf(data.clone(), &[rows, cols], false).unwrap();
        let s = g.softmax(x, 1).unwrap();
        for row in g.data(s).chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }

        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let xs = g.leaf(shifted, &[rows, cols], false).unwrap();
        let ss = g.softmax(xs, 1).unwrap();
        let max_diff = g
            .data(s)
            .iter()
            .zip(g.data(ss))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        prop_assert!(max_diff < 1e-10, "shift changed softmax by {max_diff}");
    }

    #[test]
    fn text_metrics_identity_and_disjoint(words in word_vec()) {
        let n = words.len() as f64;
        prop_assert!((bleu(&words, &words, 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge_1(&words, &words).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge_l(&words, &words).unwrap() - 1.0).abs() < 1e-12);
        let expect_meteor = 1.0 - 0.5 / (n * n * n);
        prop_assert!((meteor(&words, &words).unwrap() - expect_meteor).abs() < 1e-12);

        let disjoint: Vec<String> = words.iter().map(|w| format!("zz{w}")).collect();
        prop_assert_eq!(bleu(&disjoint, &words, 4).unwrap(), 0.0);
        prop_assert_eq!(rouge_1(&disjoint, &words).unwrap(), 0.0);
        prop_assert_eq!(rouge_l(&disjoint, &words).unwrap(), 0.0);
        prop_assert_eq!(meteor(&disjoint, &words).unwrap(), 0.0);
    }

    #[test]
    fn frechet_random_psd_pairs_symmetric_and_nonnegative(seed in 0u64..300, n in 2usize..6) {
        let make_psd = |tag: u64| {
            let a = rng::randn_vec(&mut rng::substream(seed, "prop.psd", &[tag]), n * n, 1.0);
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = (0..n).map(|k| a[k * n + i] * a[k * n + j]).sum::<f64>();
                }
                m[i * n + i] += 1e-6;
            }
            Tensor::new(m, &[n, n]).unwrap()
        };
        let (s1, s2) = (make_psd(1), make_psd(2));
        let mu1 = rng::randn_vec(&mut rng::substream(seed, "prop.mu", &[1]), n, 1.0);
        let mu2 = rng::randn_vec(&mut rng::substream(seed, "prop.mu", &[2]), n, 1.0);

        let ab = frechet_distance(&mu1, &s1, &mu2, &s2).unwrap();
        let ba = frechet_distance(&mu2, &s2, &mu1, &s1).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8, "asymmetry {}", (ab - ba).abs());
        // Zero iff moments match.
        let self_d = frechet_distance(&mu1, &s1, &mu1, &s1).unwrap();
        prop_assert!(self_d < 1e-8);
    }

    #[test]
    fn gradient_accumulation_matches_single_batch(
        seed in 0u64..200,
        splits in proptest::collection::vec(1usize..5, 1..5),
    ) {
        // Random micro-batch sizes; one optimizer step either way must
        // land on identical parameters for mean-reduced losses.
        let total: usize = splits.iter().sum();
        let d = 3;
        let xs: Vec<Vec<f64>> = (0..total)
            .map(|i| rng::randn_vec(&mut rng::substream(seed, "prop.x", &[i as u64]), d, 1.0))
            .collect();
        let ys: Vec<f64> = (0..total)
            .map(|i| rng::randn_vec(&mut rng::substream(seed, "prop.y", &[i as u64]), 1, 1.0)[0])
            .collect();
        let w0 = rng::randn_vec(&mut rng::substream(seed, "prop.w", &[]), d, 0.5);

        let run = |micro: &[usize]| -> Vec<f64> {
            let mut params = ParamSet::new();
            params.register("w", Tensor::new(w0.clone(), &[d, 1]).unwrap());
            let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.05, ..Default::default() });
            let mut idx = 0;
            for &size in micro {
                for _ in 0..size {
                    let mut g = Graph::new();
                    let x = g.leaf(xs[idx].clone(), &[1, d], false).unwrap();
                    let w = g.param(params.get("w").unwrap());
                    let pred = g.matmul(x, w).unwrap();
                    let y = g.leaf(vec![ys[idx]], &[1, 1], false).unwrap();
                    let diff = g.sub(pred, y).unwrap();
                    let sq = g.mul(diff, diff).unwrap();
                    let loss = g.mean_all(sq);
                    let scaled = g.scale(loss, 1.0 / total as f64);
                    g.backward(scaled).unwrap();
                    g.accumulate_param_grads(&mut params).unwrap();
                    idx += 1;
                }
            }
            opt.step_with_lr(&mut params, 0.05).unwrap();
            params.get("w").unwrap().tensor.data().to_vec()
        };

        let accumulated = run(&splits);
        let single = run(&[total]);
        let max_diff = accumulated
            .iter()
            .zip(&single)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        prop_assert!(max_diff <= 1e-10, "accumulation diverged by {max_diff}");
    }

    #[test]
    fn frozen_parameters_survive_any_update_sequence(seed in 0u64..100, steps in 1usize..6) {
        let mut params = ParamSet::new();
        let mut r = rng::substream(seed, "prop.frozen", &[]);
        params.register("frozen.w", Tensor::randn(&[2, 2], 1.0, &mut r));
        params.register("live.w", Tensor::randn(&[2, 2], 1.0, &mut r));
        params.get_mut("frozen.w").unwrap().frozen = true;
        let before = params.get("frozen.w").unwrap().tensor.fingerprint();

        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.1, ..Default::default() });
        for step in 0..steps {
            let grads = rng::randn_vec(&mut rng::substream(seed, "prop.g", &[step as u64]), 4, 1.0);
            params.get_mut("live.w").unwrap().tensor.accumulate_grad(&grads);
            params.get_mut("frozen.w").unwrap().tensor.accumulate_grad(&grads);
            opt.step(&mut params).unwrap();
        }
        prop_assert_eq!(params.get("frozen.w").unwrap().tensor.fingerprint(), before);
    }
}
