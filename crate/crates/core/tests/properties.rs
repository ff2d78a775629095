//! Property tests over the public API.

use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::prelude::*;
use sylnet::envelope::pick_peaks;
use sylnet::evaluation::{aggregate, relative_error_pct, Cell};
use sylnet::model::CountModel;
use sylnet::objectives::{decode_ordinal, encode_ordinal};
use sylnet::sylnet::{init_params, HeadType, SylNetConfig};

fn small_sylnet(head: HeadType) -> SylNetConfig {
    SylNetConfig {
        input_dim: 4,
        n_layers: 2,
        n_channels: 5,
        kernel_len: 3,
        accumulator_width: 4,
        head,
        rank: 6,
        dropout_rate: 0.0,
        dilations: vec![],
    }
}

proptest! {
    #[test]
    fn peaks_never_increase_with_threshold(values in prop::collection::vec(0.0f64..1.0, 0..120), a in 0u32..=100, b in 0u32..=100) {
        let (lo, hi) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
        prop_assert!(pick_peaks(&values, hi) <= pick_peaks(&values, lo));
    }

    #[test]
    fn peaks_ignore_repeated_samples(values in prop::collection::vec(0.0f64..1.0, 0..60), theta in 0.0f64..1.0) {
        let doubled: Vec<f64> = values.iter().flat_map(|&v| [v, v]).collect();
        prop_assert_eq!(pick_peaks(&values, theta), pick_peaks(&doubled, theta));
    }

    #[test]
    fn peaks_are_shift_invariant(values in prop::collection::vec(0u8..16, 0..80), theta in 0u32..=100) {
        // dyadic values keep the shifted differences exact
        let v: Vec<f64> = values.iter().map(|&x| x as f64 / 16.0).collect();
        let shifted: Vec<f64> = v.iter().map(|x| x + 3.0).collect();
        let t = theta as f64 / 100.0;
        prop_assert_eq!(pick_peaks(&v, t), pick_peaks(&shifted, t));
    }

    #[test]
    fn ordinal_round_trip(count in 1u32..60, rank in 2usize..60) {
        prop_assert_eq!(decode_ordinal(&encode_ordinal(count, rank).unwrap().bits), count.min(rank as u32 - 1));
    }

    #[test]
    fn relative_error_is_permutation_invariant(
        pairs in prop::collection::vec((-3.0f64..30.0, 1u32..25), 1..20),
        seed in any::<u64>(),
    ) {
        let (p, t): (Vec<f64>, Vec<u32>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let mut s = seed;
        for i in (1..idx.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let tt: Vec<u32> = idx.iter().map(|&i| t[i]).collect();
        let a = relative_error_pct(&p, &t).unwrap();
        let b = relative_error_pct(&pp, &tt).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        // independent term-by-term recomputation
        let oracle = 100.0 * pairs.iter().map(|&(x, s)| (x.max(0.0) - s as f64).abs() / s as f64).sum::<f64>() / pairs.len() as f64;
        assert_abs_diff_eq!(a, oracle, epsilon = 1e-10);
    }

    #[test]
    fn aggregates_match_recomputation(errors in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..80.0), 2..12)) {
        let cells: Vec<Cell> = errors
            .iter()
            .enumerate()
            .map(|(fold, e)| Cell {
                method: "m".into(),
                size_label: "30s".into(),
                size_s: 30.0,
                fold,
                error_pct: *e,
                failure: e.is_none().then(|| "failed".into()),
            })
            .collect();
        let ok: Vec<f64> = errors.iter().flatten().copied().collect();
        let aggs = aggregate(&cells);
        if ok.is_empty() {
            prop_assert!(aggs.is_empty());
        } else {
            let a = &aggs[0];
            let mean = ok.iter().sum::<f64>() / ok.len() as f64;
            prop_assert_eq!(a.n_folds, ok.len());
            assert_abs_diff_eq!(a.mean_pct, mean, epsilon = 1e-12);
            if ok.len() > 1 {
                let var = ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;
                assert_abs_diff_eq!(a.std_pct, var.sqrt(), epsilon = 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_never_changes_the_estimate(frames in 3usize..30, pad in 1usize..20, fill in -50.0f64..50.0) {
        let m = init_params(&small_sylnet(HeadType::Scalar), 5).unwrap();
        let x = Array2::from_shape_fn((frames, 4), |(t, d)| ((t * 3 + d) as f64 * 0.7).sin());
        let mut padded = Array2::from_elem((frames + pad, 4), fill);
        padded.slice_mut(ndarray::s![..frames, ..]).assign(&x);
        let a = m.forward(&x).unwrap();
        let b = m.forward_padded(&padded, frames).unwrap();
        prop_assert_eq!(a.final_estimate(), b.final_estimate());
    }

    #[test]
    fn ordinal_outputs_are_per_frame_probabilities(frames in 1usize..30) {
        let m = init_params(&small_sylnet(HeadType::Ordinal), 6).unwrap();
        let x = Array2::from_shape_fn((frames, 4), |(t, d)| ((t * 5 + d) as f64 * 0.3).cos());
        let trace = m.forward(&x).unwrap();
        prop_assert_eq!(trace.frames(), frames);
        prop_assert_eq!(trace.per_frame_head().ncols(), 5);
        prop_assert!(trace.per_frame_head().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
