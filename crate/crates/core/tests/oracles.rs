//! Reference values computed offline at 40 significant digits and frozen.

use tokenmix::autograd::Tape;
use tokenmix::tensor::{gelu_scalar, softmax_rows, Tensor};
use tokenmix::vit::LAYER_NORM_EPS;

const GELU_1: f64 = 0.841_344_746_068_542_948_585_232_545_632_037_9;
const GELU_MINUS_2_5: f64 = -0.015_524_163_314_440_337;
const SOFTMAX_123: [f64; 3] = [
    0.090_030_573_170_380_46,
    0.244_728_471_054_797_64,
    0.665_240_955_774_821_9,
];
/// `-log softmax([1, 2, 3])[0]`
const CE_123_TARGET_0: f64 = 2.407_605_964_444_380_304_482_919_904_545_07;
/// LayerNorm of `[1, 2, 3, 4]` with unit scale and zero shift.
const LAYER_NORM_1234: [f64; 4] = [
    -1.341_640_249_843_881_3,
    -0.447_213_416_614_627_05,
    0.447_213_416_614_627_05,
    1.341_640_249_843_881_3,
];

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn gelu_matches_extended_precision() {
    assert!(close(gelu_scalar(1.0), GELU_1, 1e-15), "{}", gelu_scalar(1.0));
    assert!(close(gelu_scalar(-2.5), GELU_MINUS_2_5, 1e-15));
}

#[test]
fn softmax_matches_extended_precision() {
    let p = softmax_rows(&[1.0, 2.0, 3.0], 3);
    for (a, b) in p.iter().zip(SOFTMAX_123) {
        assert!(close(*a, b, 1e-15), "{a} vs {b}");
    }
}

#[test]
fn cross_entropy_matches_extended_precision() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = tape.cross_entropy(logits, &[0], &[true]).unwrap();
    assert!(close(tape.value(loss).data()[0], CE_123_TARGET_0, 1e-15));
}

#[test]
fn layer_norm_matches_extended_precision() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    for (a, want) in tape.value(y).data().iter().zip(LAYER_NORM_1234) {
        assert!(close(*a, want, 1e-14), "{a} vs {want}");
    }
}
