mod common;

use common::gradcheck::*;
use pss_core::{Tape, Tensor};

#[test]
fn matmul() {
    matmul_plain_and_transposed().unwrap();
}

#[test]
fn elementwise() {
    elementwise_ops().unwrap();
}

#[test]
fn softmax_layernorm() {
    softmax_and_layernorm().unwrap();
}

#[test]
fn shapes() {
    shape_ops().unwrap();
}

#[test]
fn cross_entropy() {
    cross_entropy_plain_and_smoothed().unwrap();
}

#[test]
fn gather_rows() {
    gather_rows_kept_match_and_dropped_are_zero().unwrap();
}

#[test]
fn relative_bias() {
    relative_bias_gather().unwrap();
}

#[test]
fn full_vit_all_tokens() {
    full_vit(1.0).unwrap();
}

#[test]
fn full_vit_with_sampling() {
    full_vit(0.5).unwrap();
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);

    let m = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert!(tape.backward(m).is_err(), "non-scalar loss must be rejected");
}
