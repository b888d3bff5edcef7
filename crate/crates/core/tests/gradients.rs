//! Central finite-difference checks of every backward pass, 20 seeds each.

mod common;

use common::grad_suite::{self, Check, SEEDS};

fn run(check: Check) {
    for seed in 0..SEEDS {
        for (name, err, tol) in check(seed) {
            assert!(
                err <= tol,
                "{name} seed {seed}: max relative error {err:e} > {tol:e}"
            );
        }
    }
}

#[test]
fn conv_input_weight_and_bias() {
    run(grad_suite::conv);
}

#[test]
fn relu_away_from_the_kink() {
    run(grad_suite::relu);
}

#[test]
fn pooling_upsampling_and_concat() {
    run(grad_suite::resampling);
}

#[test]
fn dilated_filter_image_and_kernels() {
    run(grad_suite::dilated_filter);
}

#[test]
fn fusion_and_kernel_softmax() {
    run(grad_suite::fusion_and_softmax);
}

#[test]
fn ssim_l1_and_combined_loss() {
    run(grad_suite::losses);
}

#[test]
fn network_adjoint_on_linear_probe() {
    run(grad_suite::network_adjoint);
}

#[test]
fn loss_through_network() {
    run(grad_suite::loss_through_network);
}
