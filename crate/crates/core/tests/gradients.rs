mod common;

use codebrain::numerics::{Tape, Tensor};
use codebrain::Error;

#[test]
fn every_primitive_matches_central_differences() {
    let mut failed = Vec::new();
    for (name, err) in common::primitive_suite(11) {
        if err >= 1e-4 {
            failed.push(format!("{name}: {err:.3e}"));
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    let a = t.scale(x, 3.0);
    let b = t.mul(x, x);
    let c = t.add(a, b);
    let s = t.sum_all(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[3.0 + 3.0, 3.0 - 4.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let d = t.detach(x);
    let y = t.mul(x, d);
    let s = t.sum_all(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0, 3.0]);
    assert!(g.get(d).is_none());
}

#[test]
fn straight_through_copies_upstream_gradient() {
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![3], vec![0.2, 0.7, -0.4]).unwrap());
    let q = t.straight_through(x, vec![0.0, 1.0, -1.0]);
    assert_eq!(t.value(q), &[0.0, 1.0, -1.0]);
    let w = t.constant_from(vec![3], vec![2.0, -1.0, 0.5]);
    let y = t.mul(q, w);
    let s = t.sum_all(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, -1.0, 0.5]);
}

#[test]
fn second_sweep_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(&Tensor::scalar(2.0));
    let y = t.mul(x, x);
    t.backward(y).unwrap();
    assert!(matches!(t.backward(y), Err(Error::InvalidState(_))));
}

#[test]
fn non_scalar_and_detached_losses_are_rejected() {
    let mut t = Tape::new();
    let x = t.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
    let mut t = Tape::new();
    let c = t.constant(&Tensor::scalar(1.0));
    let y = t.mul(c, c);
    assert!(matches!(t.backward(y), Err(Error::MissingGradient(_))));
}

