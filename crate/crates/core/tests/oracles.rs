// Hand-computed expected values are written out as literals on purpose.
#![allow(clippy::approx_constant)]

mod common;

use approx::assert_relative_eq;
use cfvqa_core::eval::{attention_overlap, l1_distance};
use cfvqa_core::generator::composite;
use cfvqa_core::gradcam::{gaussian_kernel, AttentionMap, SMOOTHING_SIGMA};
use cfvqa_core::objectives::flip_loss_value;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn assert_check(c: common::Check) {
    assert!(c.passed, "{}", c.detail);
    eprintln!("{}", c.detail);
}

#[test]
fn gradcam_gradients_match_finite_differences() {
    assert_check(common::gradcam_finite_differences());
}

#[test]
fn gradcam_two_by_two_worked_example() {
    assert_check(common::gradcam_hand_example());
}

#[test]
fn blur_matches_direct_convolution() {
    assert_check(common::blur_oracle());
}

#[test]
fn smoothing_kernel_has_seventeen_unit_mass_taps() {
    let k = gaussian_kernel(SMOOTHING_SIGMA);
    assert_eq!(k.len(), 17);
    assert_relative_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    assert_relative_eq!(k[8] / k[9], (1.0 / 8.0f64).exp(), max_relative = 1e-12);
}

#[test]
fn spectral_norm_matches_svd_on_random_kernels() {
    assert_check(common::spectral_norm_oracle(100));
}

#[test]
fn compositing_identities_and_bound() {
    assert_check(common::compositing_oracle(1000));
}

#[test]
fn loss_values_match_definitions() {
    assert_check(common::loss_trivial_cases());
    assert_relative_eq!(flip_loss_value(&[0.1, 0.9], 0).unwrap(), -2.302_585_093, epsilon = 1e-6);
}

#[test]
fn loss_gradients_match_finite_differences() {
    assert_check(common::loss_finite_differences());
}

#[test]
fn ten_thousand_samples_are_sound() {
    assert_check(common::dataset_sweep(10_000));
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
    proptest::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |v| Array3::from_shape_vec((3, h, w), v).unwrap())
}

fn triple() -> impl Strategy<Value = (Array3<f32>, Array3<f32>, Array2<f32>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        (
            image(h, w),
            image(h, w),
            proptest::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap()),
        )
    })
}

proptest! {
    #[test]
    fn composite_stays_within_the_map((i, g, m) in triple()) {
        let map = AttentionMap::new(m.clone()).unwrap();
        let out = composite(&g, &i, &map).unwrap();
        for ((c, y, x), v) in out.indexed_iter() {
            prop_assert!((v - i[[c, y, x]]).abs() <= m[[y, x]] + 1e-6);
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn l1_is_a_symmetric_unit_interval_distance((a, b, _) in triple()) {
        let d = l1_distance(&a, &b).unwrap();
        prop_assert_eq!(d, l1_distance(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn overlap_fraction_is_bounded((_, _, m) in triple(), bits in proptest::collection::vec(any::<bool>(), 64)) {
        let (h, w) = m.dim();
        let mask = Array2::from_shape_fn((h, w), |(y, x)| bits[(y * w + x) % bits.len()]);
        let o = attention_overlap(&AttentionMap::new(m.clone()).unwrap(), &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&o.mass_fraction));
        if o.hit && m.iter().any(|&v| v > 0.0) {
            prop_assert!(o.mass_fraction > 0.0);
        }
    }
}
