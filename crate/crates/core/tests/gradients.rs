//! Analytic gradients against central finite differences on tiny networks.

use ndarray::Array2;
use sylnet::baseline_nets::{init_blstm, BlstmCountConfig};
use sylnet::model::CountModel;
use sylnet::nn::ParamSet;
use sylnet::objectives::{loss_and_grad, LossKind, OrdinalForm};
use sylnet::sylnet::{init_params, HeadType, SylNetConfig};

fn inputs(dim: usize) -> Vec<Array2<f64>> {
    vec![
        Array2::from_shape_fn((12, dim), |(t, d)| ((t * 7 + d * 3) as f64 * 0.41).sin()),
        Array2::from_shape_fn((9, dim), |(t, d)| ((t + 2 * d) as f64 * 0.23).cos() - 0.2),
    ]
}

fn batch_loss<M: CountModel>(m: &M, xs: &[Array2<f64>], targets: &[u32], kind: LossKind) -> f64 {
    let traces: Vec<_> = xs.iter().map(|x| m.forward(x).unwrap()).collect();
    let finals: Vec<&[f64]> = traces.iter().map(|t| t.final_estimate()).collect();
    loss_and_grad(kind, OrdinalForm::Euclidean, &finals, targets, m.head().rank())
        .unwrap()
        .0
}

fn analytic<M: CountModel>(m: &M, xs: &[Array2<f64>], targets: &[u32], kind: LossKind, tunable_only: bool) -> M {
    let fwd: Vec<_> = xs.iter().map(|x| m.forward_tape(x, None).unwrap()).collect();
    let finals: Vec<&[f64]> = fwd.iter().map(|(t, _)| t.final_estimate()).collect();
    let (_, d) = loss_and_grad(kind, OrdinalForm::Euclidean, &finals, targets, m.head().rank()).unwrap();
    let mut total = m.zeros_like();
    for ((_, tape), d) in fwd.iter().zip(&d) {
        total.add_assign(&m.backward(tape, d, tunable_only));
    }
    total
}

/// Returns the worst per-tensor relative error.
fn check<M: CountModel>(m: &M, xs: &[Array2<f64>], targets: &[u32], kind: LossKind) -> f64 {
    let grad = analytic(m, xs, targets, kind, false);
    let eps = 1e-6;
    let n_tensors = m.tensors().len();
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for k in 0..n_tensors {
        let len = m.tensors()[k].1.len();
        let mut fd = vec![0.0; len];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = m.clone();
            plus.tensors_mut()[k].as_slice_mut().unwrap()[i] += eps;
            let mut minus = m.clone();
            minus.tensors_mut()[k].as_slice_mut().unwrap()[i] -= eps;
            *slot = (batch_loss(&plus, xs, targets, kind) - batch_loss(&minus, xs, targets, kind)) / (2.0 * eps);
        }
        let (name, g) = &grad.tensors()[k];
        let g = g.as_slice().unwrap();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt() + fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel = if scale < 1e-9 { diff } else { diff / scale };
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
        if scale > 1e-9 {
            nonzero += 1;
        }
        worst = worst.max(rel);
    }
    // only the unused residual projection of the top layer may have a zero gradient
    assert!(nonzero + 2 >= n_tensors, "{nonzero} of {n_tensors} tensors carry gradient");
    worst
}

fn tiny(head: HeadType) -> SylNetConfig {
    SylNetConfig {
        input_dim: 5,
        n_layers: 2,
        n_channels: 4,
        kernel_len: 3,
        accumulator_width: 4,
        head,
        rank: 6,
        dropout_rate: 0.0,
        dilations: vec![],
    }
}

#[test]
fn sylnet_scalar_head() {
    let m = init_params(&tiny(HeadType::Scalar), 11).unwrap();
    check(&m, &inputs(5), &[3, 5], LossKind::L1Relative);
}

#[test]
fn sylnet_ordinal_head() {
    let m = init_params(&tiny(HeadType::Ordinal), 12).unwrap();
    check(&m, &inputs(5), &[2, 4], LossKind::Ordinal);
}

#[test]
fn sylnet_dilated() {
    let mut c = tiny(HeadType::Ordinal);
    c.dilations = vec![2, 3];
    let m = init_params(&c, 13).unwrap();
    check(&m, &inputs(5), &[2, 4], LossKind::Ordinal);
}

#[test]
fn blstm_count() {
    let c = BlstmCountConfig {
        input_dim: 3,
        cells_per_direction: 1,
        n_bidirectional_layers: 1,
        dropout_rate: 0.0,
    };
    let m = init_blstm(&c, 14).unwrap();
    check(&m, &inputs(3), &[4, 2], LossKind::L1Relative);
    let wider = init_blstm(
        &BlstmCountConfig {
            cells_per_direction: 3,
            n_bidirectional_layers: 2,
            ..c
        },
        15,
    )
    .unwrap();
    check(&wider, &inputs(3), &[4, 2], LossKind::L1Relative);
}

/// Tunable-only backward must agree with the full backward on the tunable tensors.
#[test]
fn tunable_only_matches_full_on_tunable_subset() {
    let m = init_params(&tiny(HeadType::Ordinal), 16).unwrap();
    let xs = inputs(5);
    let full = analytic(&m, &xs, &[2, 4], LossKind::Ordinal, false);
    let part = analytic(&m, &xs, &[2, 4], LossKind::Ordinal, true);
    for (((name, f), (_, p)), tunable) in full.tensors().into_iter().zip(part.tensors()).zip(m.adaptation_mask()) {
        if tunable {
            assert_eq!(f, p, "{name}");
        } else {
            assert!(p.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}
