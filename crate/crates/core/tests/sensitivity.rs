mod common;

use cimq_core::strips::{
    conv_layers, decompose_strips, group_trace, group_trace_with, rank_order, rank_strips, read_sensitivity_csv,
    reassemble_kernel, score_strips, sensitivity_score, write_sensitivity_csv, HutchinsonConfig, SensitivityRecord,
    StripKey,
};
use cimq_core::tensor::{ModelLoss, Quadratic};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn decompose_counts_and_lengths() {
    let model = conv_net(3, 16, 32, 5, 1, 1, 1);
    let strips = decompose_strips(&model).unwrap();
    assert_eq!(strips.len(), 288);
    assert!(strips.iter().all(|s| s.values.len() == 16));
    let mut keys: Vec<StripKey> = strips.iter().map(|s| s.key).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 288);

    let single = conv_net(1, 7, 1, 4, 1, 0, 2);
    assert_eq!(decompose_strips(&single).unwrap().len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reassemble_inverts_decompose(
        k in prop::sample::select(vec![1usize, 3]),
        d in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let model = conv_net(k, d, n, 4, 1, 1, seed);
        let strips = decompose_strips(&model).unwrap();
        let info = &conv_layers(&model)[0];
        prop_assert_eq!(&reassemble_kernel(info, &strips).unwrap(), model.param("c.k").unwrap());
    }

    #[test]
    fn diagonal_hessian_trace_is_exact(
        diag in prop::collection::vec(-5.0f64..5.0, 1..12),
        m in 1usize..8,
        seed in any::<u64>(),
    ) {
        let q = Quadratic::diagonal(&diag, vec![0.3; diag.len()]).unwrap();
        let group: Vec<usize> = (0..diag.len()).collect();
        let t = group_trace_with(&q, &group, m, seed, 0, 1.0).unwrap();
        let want: f64 = diag.iter().sum();
        prop_assert!((t - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn ranking_ignores_input_order(scores in prop::collection::vec(-2.0f64..2.0, 1..40), seed in any::<u64>()) {
        let records: Vec<SensitivityRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| SensitivityRecord::new(
                StripKey { layer_id: i % 3, out_channel: i / 3, m: 0, n: 0 },
                1,
                // ties on purpose: quantize the score
                2.0 * (s * 4.0).round() / 4.0,
                1.0,
            ))
            .collect();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(rank_strips(&records), rank_strips(&shuffled));
    }
}

#[test]
fn diagonal_example_is_six() {
    let q = Quadratic::diagonal(&[2.0, 4.0], vec![1.0, -1.0]).unwrap();
    for m in [1, 3, 50] {
        let t = group_trace_with(&q, &[0, 1], m, 9, 0, 1.0).unwrap();
        assert!((t - 6.0).abs() <= 1e-12 * 6.0, "{t}");
    }
    assert!(group_trace_with(&q, &[], 1, 0, 0, 1e-4).is_err());
}

#[test]
fn hutchinson_matches_dense_block_trace() {
    let model = mlp(6, 8, 3, 101);
    let batch = random_data(32, &[6], 3, 102);
    let cfg = HutchinsonConfig {
        m: 100,
        seed: 103,
        eps: None,
    };
    // layer-1 weights, ten at a time
    for start in (0..40).step_by(10) {
        let group: Vec<usize> = (start..start + 10).collect();
        let est = group_trace(&model, &batch, &group, &cfg).unwrap();
        let exact = dense_block_trace(&model, &batch, &group);
        assert!(rel_err(est, exact) <= 0.10, "group {start}: {est} vs {exact}");
    }
}

#[test]
fn group_traces_add_up_to_full_trace() {
    let model = mlp(5, 6, 3, 111);
    let batch = random_data(32, &[5], 3, 112);
    let p = model.param_count();
    let all: Vec<usize> = (0..p).collect();
    let exact = dense_block_trace(&model, &batch, &all);
    let cfg = HutchinsonConfig {
        m: 500,
        seed: 113,
        eps: None,
    };
    let parts: f64 = all
        .chunks(9)
        .map(|g| group_trace(&model, &batch, g, &cfg).unwrap())
        .sum();
    assert!(rel_err(parts, exact) <= 0.10, "{parts} vs {exact}");
}

#[test]
fn scores_match_dense_hessian_blocks_on_toy_cnn() {
    let fx = cimq_core::fixtures::toy_fixture(0).unwrap();
    let batch = fx.train.seeded_subsample(16, 0).unwrap();
    let strips = decompose_strips(&fx.model).unwrap();
    // two-element conv2 strips carry off-diagonal mass up to 8% of their
    // trace per probe at m = 100; m = 1000 brings the spread under 3%
    let cfg = HutchinsonConfig {
        m: 1000,
        seed: 1,
        eps: None,
    };
    let records = score_strips(&fx.model, &batch, &strips, &cfg).unwrap();
    for (s, r) in strips.iter().zip(&records) {
        let cols = fd_hessian_cols(&fx.model, &batch, &s.flat_indices, 1e-6);
        let exact: f64 = cols.iter().zip(&s.flat_indices).map(|(c, &j)| c[j]).sum();
        let want = sensitivity_score(exact, s.p_strip(), s.sq_norm());
        assert!(rel_err(r.score, want) <= 0.10, "{}: {} vs {want}", s.key, r.score);
    }
}

#[test]
fn scores_follow_strip_identity_not_position() {
    let model = conv_net(3, 2, 3, 5, 1, 1, 121);
    let batch = random_data(12, &[2, 5, 5], 2, 122);
    let strips = decompose_strips(&model).unwrap();
    let cfg = HutchinsonConfig {
        m: 4,
        seed: 7,
        eps: None,
    };
    let base = score_strips(&model, &batch, &strips, &cfg).unwrap();
    let mut shuffled = strips.clone();
    shuffled.shuffle(&mut rng(123));
    let again = score_strips(&model, &batch, &shuffled, &cfg).unwrap();
    for r in &again {
        assert_eq!(Some(r), base.iter().find(|b| b.key == r.key));
    }
}

#[test]
fn record_fields_recompute_score() {
    let model = conv_net(3, 2, 2, 5, 1, 1, 131);
    let batch = random_data(8, &[2, 5, 5], 2, 132);
    let strips = decompose_strips(&model).unwrap();
    let records = score_strips(&model, &batch, &strips, &HutchinsonConfig::default()).unwrap();
    for r in &records {
        assert!(r.sq_norm >= 0.0);
        assert_eq!(r.score, r.trace / (2.0 * r.p_strip as f64) * r.sq_norm);
    }
    assert_eq!(sensitivity_score(6.0, 2, 0.25), 0.375);
    assert_eq!(sensitivity_score(123.0, 4, 0.0), 0.0);
}

#[test]
fn rank_examples_and_csv_round_trip() {
    let mk = |i: usize, s: f64| SensitivityRecord::new(
        StripKey {
            layer_id: 0,
            out_channel: i,
            m: 0,
            n: 0,
        },
        1,
        2.0 * s,
        1.0,
    );
    let records = vec![mk(0, 0.1), mk(1, 0.9), mk(2, 0.5)];
    assert_eq!(rank_order(&records), vec![1, 2, 0]);
    let ties = vec![mk(2, 0.5), mk(0, 0.5), mk(1, 0.5)];
    let ranked: Vec<usize> = rank_strips(&ties).iter().map(|r| r.key.out_channel).collect();
    assert_eq!(ranked, vec![0, 1, 2]);

    let mut buf = Vec::new();
    write_sensitivity_csv(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("layer_id,m,n,out_channel,p_strip,trace,sq_norm,score\n"));
    assert_eq!(read_sensitivity_csv(buf.as_slice()).unwrap(), rank_strips(&records));
}

#[test]
fn strip_errors_carry_identity() {
    let model = conv_net(1, 1, 1, 3, 1, 0, 141);
    let batch = random_data(2, &[1, 3, 3], 2, 142);
    let strips = decompose_strips(&model).unwrap();
    let cfg = HutchinsonConfig {
        m: 1,
        seed: 0,
        eps: Some(f64::NAN),
    };
    let err = score_strips(&model, &batch, &strips, &cfg).unwrap_err();
    assert!(err.to_string().contains("layer 0 pos (0, 0) channel 0"), "{err}");
    let _ = ModelLoss::new(&model, &batch);
}
