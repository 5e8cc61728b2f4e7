//! Finite-difference checks for every differentiable op and loss.

#[path = "support/grad.rs"]
mod grad;

#[test]
fn unary_ops() {
    grad::unary_ops();
}

#[test]
fn binary_ops() {
    grad::binary_ops();
}

#[test]
fn reductions_and_broadcast() {
    grad::reductions_and_broadcast();
}

#[test]
fn matmul_both_sides() {
    grad::matmul_both_sides();
}

#[test]
fn conv2d_input_and_kernel() {
    grad::conv2d_input_and_kernel();
}

#[test]
fn bias_and_layout_ops() {
    grad::bias_and_layout_ops();
}

#[test]
fn group_norm_all_inputs() {
    grad::group_norm_all_inputs();
}

#[test]
fn max_pool_without_ties() {
    grad::max_pool_without_ties();
}

#[test]
fn l2_normalize_rows() {
    grad::l2_normalize_rows();
}

#[test]
fn fused_losses() {
    grad::fused_losses();
}

#[test]
fn giou_on_overlapping_and_disjoint_boxes() {
    grad::giou_on_overlapping_and_disjoint_boxes();
}

#[test]
fn conv_normalize_cosine_focal_chain() {
    grad::conv_normalize_cosine_focal_chain();
}
