use proptest::prelude::*;
use pyoco_core::ndcore::{RngStream, Shape, Tensor};
use pyoco_core::noise_prior::{
    empirical_correlation, frame_covariance, frame_variances, sample_noise, NoiseKind, NoiseSpec,
};
use pyoco_core::Error;

fn spec(kind: NoiseKind, alpha: f64) -> NoiseSpec {
    NoiseSpec::new(kind, alpha).unwrap()
}

fn draw(s: &NoiseSpec, b: usize, n: usize, side: usize, seed: u64) -> Tensor<f64> {
    let shape = Shape::video(b, n, 1, side, side).unwrap();
    sample_noise(s, &shape, &mut RngStream::new(seed, 0)).unwrap()
}

#[test]
fn negative_or_nan_alpha_is_rejected() {
    assert!(matches!(
        NoiseSpec::new(NoiseKind::Mixed, -0.1),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        NoiseSpec::new(NoiseKind::Progressive, f64::NAN),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        NoiseSpec::with_alpha(NoiseKind::Mixed, -1.0),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn infinite_alpha_selects_frozen() {
    let s = NoiseSpec::with_alpha(NoiseKind::Mixed, f64::INFINITY).unwrap();
    assert_eq!(s.kind(), NoiseKind::Frozen);
    assert_eq!(s.effective_alpha(), f64::INFINITY);
}

#[test]
fn covariance_examples() {
    assert_eq!(frame_covariance(&NoiseSpec::iid(), 0, 5), 0.0);
    assert!((frame_covariance(&spec(NoiseKind::Progressive, 2.0), 0, 2) - 0.8).abs() < 1e-15);
    assert_eq!(frame_covariance(&spec(NoiseKind::Mixed, 1.0), 3, 7), 0.5);
    assert_eq!(frame_covariance(&NoiseSpec::frozen(), 1, 6), 1.0);
    assert_eq!(frame_covariance(&spec(NoiseKind::Mixed, 3.0), 2, 2), 1.0);
}

#[test]
fn frozen_frames_are_bit_identical() {
    let x = draw(&NoiseSpec::frozen(), 3, 4, 3, 1);
    let fsz = 9;
    for item in x.data().chunks(4 * fsz) {
        for f in 1..4 {
            assert_eq!(&item[..fsz], &item[f * fsz..(f + 1) * fsz]);
        }
    }
    let c = empirical_correlation(&x).unwrap();
    assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn progressive_lag_one_at_two() {
    let x = draw(&spec(NoiseKind::Progressive, 2.0), 100_000, 8, 2, 3);
    let c = empirical_correlation(&x).unwrap();
    let want = 2.0 / 5f64.sqrt();
    for i in 0..7 {
        let r = c.data()[i * 8 + i + 1];
        assert!((r - want).abs() < 0.01, "lag-1 corr at {i}: {r}");
    }
}

#[test]
fn mixed_alpha_one_pairs() {
    let x = draw(&spec(NoiseKind::Mixed, 1.0), 100_000, 4, 2, 4);
    let c = empirical_correlation(&x).unwrap();
    for i in 0..4 {
        assert_eq!(c.data()[i * 5], 1.0);
        for j in 0..4 {
            if i != j {
                assert!((c.data()[i * 4 + j] - 0.5).abs() < 0.01);
            }
        }
    }
}

#[test]
fn iid_is_uncorrelated() {
    let x = draw(&NoiseSpec::iid(), 100_000, 3, 1, 5);
    let c = empirical_correlation(&x).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(c.data()[i * 3 + j].abs() < 0.01);
            }
        }
    }
}

#[test]
fn correlation_needs_two_items_and_variance() {
    let one = draw(&NoiseSpec::iid(), 1, 3, 2, 0);
    assert!(matches!(empirical_correlation(&one), Err(Error::Shape(_))));
    let zeros = Tensor::<f64>::zeros(Shape::video(4, 2, 1, 2, 2).unwrap());
    assert!(matches!(
        empirical_correlation(&zeros),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn exchangeable_and_stationary_structure() {
    let m = draw(&spec(NoiseKind::Mixed, 0.7), 50_000, 6, 2, 9);
    let c = empirical_correlation(&m).unwrap();
    let off: Vec<f64> = (0..6)
        .flat_map(|i| (0..6).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| c.data()[i * 6 + j])
        .collect();
    let spread =
        off.iter().cloned().fold(f64::MIN, f64::max) - off.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 0.02, "mixed spread {spread}");

    let p = draw(&spec(NoiseKind::Progressive, 1.3), 50_000, 6, 2, 10);
    let c = empirical_correlation(&p).unwrap();
    for lag in 1..6 {
        let vals: Vec<f64> = (0..6 - lag).map(|i| c.data()[i * 6 + i + lag]).collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max)
            - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.02, "lag {lag} spread {spread}");
    }
}

#[test]
fn large_alpha_approaches_frozen() {
    let prev = frame_covariance(&spec(NoiseKind::Mixed, 1e4), 0, 1);
    assert!(prev > 1.0 - 1e-7);
    let p = frame_covariance(&spec(NoiseKind::Progressive, 1e4), 0, 3);
    assert!(p > 1.0 - 1e-7);
}

fn all_kinds() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![
        Just(NoiseKind::Iid),
        Just(NoiseKind::Mixed),
        Just(NoiseKind::Progressive),
        Just(NoiseKind::Frozen)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_alpha_reproduces_iid_bitwise(seed in any::<u64>(), b in 1usize..4, n in 1usize..6, side in 1usize..4) {
        let shape = Shape::video(b, n, 1, side, side).unwrap();
        let iid: Tensor<f64> = NoiseSpec::iid().sample(&shape, &mut RngStream::new(seed, 1)).unwrap();
        for kind in [NoiseKind::Mixed, NoiseKind::Progressive] {
            let x: Tensor<f64> = spec(kind, 0.0).sample(&shape, &mut RngStream::new(seed, 1)).unwrap();
            prop_assert_eq!(x.data(), iid.data());
        }
    }

    #[test]
    fn marginals_are_unit_variance(kind in all_kinds(), alpha in 0.0f64..6.0, seed in any::<u64>()) {
        let x = draw(&spec(kind, alpha), 20_000, 4, 2, seed);
        for v in frame_variances(&x).unwrap() {
            prop_assert!((v - 1.0).abs() < 0.04, "variance {}", v);
        }
    }

    #[test]
    fn empirical_matches_oracle(kind in all_kinds(), alpha in 0.0f64..6.0, seed in any::<u64>()) {
        let s = spec(kind, alpha);
        let x = draw(&s, 20_000, 4, 2, seed);
        let c = empirical_correlation(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d = (c.data()[i * 4 + j] - s.frame_covariance(i, j)).abs();
                prop_assert!(d < 0.04, "({}, {}) off by {}", i, j, d);
            }
        }
    }

    #[test]
    fn covariance_increases_with_alpha(a in 0.0f64..50.0, da in 1e-3f64..5.0, lag in 1usize..6) {
        for kind in [NoiseKind::Mixed, NoiseKind::Progressive] {
            let lo = frame_covariance(&spec(kind, a), 0, lag);
            let hi = frame_covariance(&spec(kind, a + da), 0, lag);
            prop_assert!(hi > lo);
            prop_assert!(hi < 1.0);
        }
    }

    #[test]
    fn sampling_is_deterministic(kind in all_kinds(), alpha in 0.0f64..4.0, seed in any::<u64>()) {
        let a = draw(&spec(kind, alpha), 3, 5, 2, seed);
        let b = draw(&spec(kind, alpha), 3, 5, 2, seed);
        prop_assert_eq!(a, b);
    }
}
