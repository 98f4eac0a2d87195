mod common;

use common::*;
use freqrec::config::{AblationSpec, DistanceKind, FusionMode};
use freqrec::tensor::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

macro_rules! op_check {
    ($name:ident, [$($input:expr),+], |$g:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let inputs = vec![$($input),+];
            let worst = check_op(&inputs, |$g, $v| $body);
            assert!(worst < GRAD_TOL, "worst relative error {worst}");
        }
    };
}

op_check!(add_broadcast, [randn(&[2, 3, 4], 1), randn(&[4], 2)], |g, v| g.add(v[0], v[1]).unwrap());
op_check!(sub_broadcast, [randn(&[2, 3], 1), randn(&[1, 3], 2)], |g, v| g.sub(v[0], v[1]).unwrap());
op_check!(mul_broadcast, [randn(&[3, 4], 1), randn(&[3, 1], 2)], |g, v| g.mul(v[0], v[1]).unwrap());
op_check!(scale, [randn(&[5], 1)], |g, v| g.scale(v[0], -1.7));
op_check!(mul_const, [randn(&[2, 3], 1)], |g, v| g.mul_const(v[0], &randn(&[2, 3], 5)).unwrap());
op_check!(matmul_2d, [randn(&[3, 4], 1), randn(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
op_check!(matmul_batched, [randn(&[2, 3, 4], 1), randn(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
op_check!(matmul_both_batched, [randn(&[2, 2, 3, 4], 1), randn(&[2, 2, 4, 3], 2)], |g, v| g
    .matmul(v[0], v[1])
    .unwrap());
op_check!(permute, [randn(&[2, 3, 4], 1)], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
op_check!(transpose_last, [randn(&[2, 3, 4], 1)], |g, v| g.transpose_last(v[0]).unwrap());
op_check!(reshape, [randn(&[2, 6], 1)], |g, v| g.reshape(v[0], &[3, 4]).unwrap());
op_check!(slice_rows, [randn(&[5, 3], 1)], |g, v| g.slice_rows(v[0], 1, 4).unwrap());
op_check!(softmax_last, [randn(&[3, 5], 1)], |g, v| g.softmax(v[0], 1).unwrap());
op_check!(softmax_inner, [randn(&[3, 4, 2], 1)], |g, v| g.softmax(v[0], 1).unwrap());
op_check!(layer_norm, [randn(&[2, 3, 6], 1), randn(&[6], 2), randn(&[6], 3)], |g, v| g
    .layer_norm(v[0], v[1], v[2], 1e-12)
    .unwrap());
op_check!(gelu, [randn(&[10], 1)], |g, v| g.gelu(v[0]));
op_check!(leaky_relu, [randn(&[10], 1)], |g, v| g.leaky_relu(v[0], 0.2));
op_check!(abs, [randn(&[10], 1)], |g, v| g.abs(v[0]));
op_check!(square, [randn(&[10], 1)], |g, v| g.square(v[0]));
op_check!(embedding, [randn(&[6, 3], 1)], |g, v| g
    .embedding(v[0], &ids(&[2, 3], vec![0, 5, 2, 2, 1, 5]))
    .unwrap());
op_check!(sum, [randn(&[3, 4], 1)], |g, v| g.sum(v[0]));
op_check!(mean, [randn(&[3, 4], 1)], |g, v| g.mean(v[0]));

#[test]
fn rdft_parts_every_axis_and_parity() {
    for (shape, axis) in [(vec![2, 5, 3], 1), (vec![4, 3, 2], 0), (vec![3, 6, 2], 1), (vec![2, 3, 8], 2)] {
        let x = randn(&shape, 4);
        for part in 0..2 {
            let worst = check_op(&[x.clone()], |g, v| {
                let (re, im) = g.rdft(v[0], axis).unwrap();
                if part == 0 { re } else { im }
            });
            assert!(worst < GRAD_TOL, "{shape:?} axis {axis} part {part}: {worst}");
        }
    }
}

#[test]
fn irdft_every_axis_and_parity() {
    for (len, axis) in [(5usize, 1usize), (6, 1), (4, 0), (3, 0)] {
        let mut shape = vec![3, 2];
        shape[axis] = len / 2 + 1;
        shape.push(2);
        let re = randn(&shape, 6);
        let im = randn(&shape, 7);
        let worst = check_op(&[re, im], |g, v| g.irdft(v[0], v[1], axis, len).unwrap());
        assert!(worst < GRAD_TOL, "len {len} axis {axis}: {worst}");
    }
}

#[test]
fn fused_cross_entropy_with_mask() {
    let logits = randn(&[2, 3, 5], 8);
    let targets = [0, 4, 2, 1, 3, 0];
    let mask = [true, false, true, true, true, false];
    let worst = check_op(&[logits], |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap());
    assert!(worst < GRAD_TOL, "{worst}");
}

#[test]
fn full_loss_both_fusions_all_distances() {
    for fusion in [FusionMode::Parallel, FusionMode::Serial] {
        for distance in [DistanceKind::L1, DistanceKind::L2, DistanceKind::Mix] {
            let (worst, at) = check_model_gradients(grad_config(fusion, distance), &AblationSpec::full());
            assert!(worst < GRAD_TOL, "{fusion}/{distance}: {worst} at {at}");
        }
    }
}

#[test]
fn full_loss_every_ablation() {
    for fusion in [FusionMode::Parallel, FusionMode::Serial] {
        for spec in ablation_variants() {
            let (worst, at) = check_model_gradients(grad_config(fusion, DistanceKind::Mix), &spec);
            assert!(worst < GRAD_TOL, "{fusion}/{}: {worst} at {at}", spec.label());
        }
    }
}
