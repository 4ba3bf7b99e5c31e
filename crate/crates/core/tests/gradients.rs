mod support;

use support::grad;

#[test]
fn conv2d_same_and_valid() {
    grad::conv2d_same_and_valid();
}

#[test]
fn conv2d_transpose() {
    grad::conv2d_transpose();
}

#[test]
fn dense_matmul_bias() {
    grad::dense_matmul_bias();
}

#[test]
fn pointwise() {
    grad::pointwise();
}

#[test]
fn binary_elementwise() {
    grad::binary_elementwise();
}

#[test]
fn softmax_family() {
    grad::softmax_family();
}

#[test]
fn shape_ops() {
    grad::shape_ops();
}

#[test]
fn mixture_kl() {
    grad::mixture_kl();
}

#[test]
fn encoder_loss_end_to_end() {
    grad::encoder_loss_end_to_end();
}

#[test]
fn decoder_loss_end_to_end() {
    grad::decoder_loss_end_to_end();
}

#[test]
fn conv_adjoint_identity() {
    grad::conv_adjoint_identity();
}
