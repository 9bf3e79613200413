mod common;

use common::gradients::{self, Suite};

#[test]
fn binary_ops() {
    let mut s = Suite::default();
    gradients::binary_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn unary_ops() {
    let mut s = Suite::default();
    gradients::unary_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn linear_algebra_ops() {
    let mut s = Suite::default();
    gradients::linear_algebra_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn structural_ops() {
    let mut s = Suite::default();
    gradients::structural_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn reduction_ops() {
    let mut s = Suite::default();
    gradients::reduction_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn layer_norm_op() {
    let mut s = Suite::default();
    gradients::layer_norm_op(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn convolution_ops() {
    let mut s = Suite::default();
    gradients::convolution_ops(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn gru_cell_op() {
    let mut s = Suite::default();
    gradients::gru_cell_op(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn dropout_op() {
    let mut s = Suite::default();
    gradients::dropout_op(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}

#[test]
fn composite_chain() {
    let mut s = Suite::default();
    gradients::composite_chain(&mut s);
    assert!(s.failures().is_empty(), "{:?}", s.failures());
}
