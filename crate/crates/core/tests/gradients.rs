mod common;

use common::*;

fn assert_report(name: &str, r: Report) {
    assert!(r.ok(), "{name}: {}", r.summary());
}

#[test]
fn field_gradients_match_finite_differences() {
    assert_report("field", check_field(1));
}

#[test]
fn volume_render_gradients_match_finite_differences() {
    assert_report("volume_render", check_volume_render(2));
}

#[test]
fn distill_gradients_match_finite_differences() {
    assert_report("distill", check_distill(3));
}

#[test]
fn recon_gradients_match_finite_differences() {
    assert_report("recon", check_recon(4));
}

#[test]
fn perceptual_gradients_match_finite_differences() {
    assert_report("perceptual", check_perceptual(5));
}

#[test]
fn depth_gradients_match_finite_differences() {
    assert_report("depth", check_depth(6));
}
