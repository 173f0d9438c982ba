mod common;

use common::metric_checks;
use sga_core::metrics::{psd_sqrt, ssim, write_metrics_csv, SsimParams, METRICS_CSV_HEADER};
use sga_core::Tensor;
use nalgebra::DMatrix;

fn ok(r: common::checks::Check) {
    assert!(r.is_ok(), "{r:?}");
}

#[test]
fn ssim_matches_the_naive_window_sum() {
    ok(metric_checks::ssim_against_oracle());
}

#[test]
fn ssim_of_unrelated_images_is_low() {
    let a = common::synthetic_image(1, 32, 32);
    let b = common::randn_like(&[3, 32, 32], 9).map(|v| v.abs());
    let s = ssim(&a, &b, &SsimParams::default()).unwrap();
    assert!(s < 0.5, "{s}");
    let tiny = Tensor::zeros(&[3, 8, 8]);
    assert!(ssim(&tiny, &tiny, &SsimParams::default()).is_err());
}

#[test]
fn frechet_distance_closed_forms() {
    ok(metric_checks::frechet_closed_forms());
}

#[test]
fn feature_distance_is_zero_on_identical_sets() {
    ok(metric_checks::feature_distance_identity());
}

#[test]
fn psd_sqrt_squares_back() {
    let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    let r = psd_sqrt(&m).unwrap();
    assert!((&r * &r - &m).abs().max() < 1e-10);
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(psd_sqrt(&bad).is_err());
}

#[test]
fn metrics_csv_layout() {
    let mut out = Vec::new();
    write_metrics_csv(&[("a".into(), 0.5), ("b".into(), 0.75)], 1.25, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_CSV_HEADER);
    assert_eq!(lines[1], "a,0.5,");
    assert_eq!(lines.last().unwrap(), &"mean,0.625,1.25");
}
