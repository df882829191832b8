use proptest::prelude::*;
use pyoco_core::ndcore::RngStream;
use pyoco_core::toydata::{
    ball_radius, ball_trajectory, generate, reflect_step, Dataset, DatasetKind, DatasetSpec,
    DATA_STREAM,
};
use pyoco_core::Error;
use std::f64::consts::PI;

const KINDS: [DatasetKind; 3] = [
    DatasetKind::BouncingBall,
    DatasetKind::MovingBars,
    DatasetKind::DriftingGradient,
];

fn small(kind: DatasetKind, n: usize) -> DatasetSpec {
    DatasetSpec {
        kind,
        n_videos: n,
        ..DatasetSpec::default()
    }
}

fn frame(d: &Dataset, v: usize, f: usize) -> Vec<f64> {
    let s = &d.spec().clone();
    let fsz = s.height * s.width;
    let start = (v * s.n_frames + f) * fsz;
    d.videos().unwrap().data()[start..start + fsz].to_vec()
}

/// Unconstrained motion folded into `[lo, hi]` by the triangle wave.
fn fold(p: f64, lo: f64, hi: f64) -> f64 {
    let l = hi - lo;
    let m = (p - lo).rem_euclid(2.0 * l);
    lo + if m > l { 2.0 * l - m } else { m }
}

#[test]
fn static_motion_repeats_one_frame() {
    for kind in KINDS {
        let d = generate(&DatasetSpec {
            motion_scale: 0.0,
            ..small(kind, 6)
        })
        .unwrap();
        for v in 0..6 {
            let first = frame(&d, v, 0);
            for f in 1..8 {
                assert_eq!(frame(&d, v, f), first, "{kind} video {v} frame {f}");
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    for kind in KINDS {
        let s = small(kind, 5);
        let (a, b) = (generate(&s).unwrap(), generate(&s).unwrap());
        assert_eq!(a.videos().unwrap(), b.videos().unwrap());
        assert_eq!(a.labels(), b.labels());
        let c = generate(&DatasetSpec { seed: 1, ..s }).unwrap();
        assert_ne!(a.videos().unwrap(), c.videos().unwrap());
    }
}

#[test]
fn ball_follows_reflected_motion_inside_the_frame() {
    let spec = DatasetSpec {
        motion_scale: 3.0,
        n_frames: 40,
        ..small(DatasetKind::BouncingBall, 64)
    };
    let (h, w) = (spec.height as f64, spec.width as f64);
    let r = ball_radius(spec.height, spec.width);
    let root = RngStream::new(spec.seed, DATA_STREAM);
    for v in 0..spec.n_videos {
        let (traj, _) = ball_trajectory(&spec, &mut root.split(v as u64));
        let mut rng = root.split(v as u64);
        let y0 = r + rng.uniform() * (h - 1.0 - 2.0 * r);
        let x0 = r + rng.uniform() * (w - 1.0 - 2.0 * r);
        let theta = rng.uniform() * 2.0 * PI;
        let speed = spec.motion_scale * 0.12 * h.min(w);
        for (t, &(y, x)) in traj.iter().enumerate() {
            let ey = fold(y0 + speed * theta.sin() * t as f64, r, h - 1.0 - r);
            let ex = fold(x0 + speed * theta.cos() * t as f64, r, w - 1.0 - r);
            assert!(
                (y - ey).abs() < 1e-9 && (x - ex).abs() < 1e-9,
                "video {v} frame {t}"
            );
            assert!((0.0..=h - 1.0).contains(&y) && (0.0..=w - 1.0).contains(&x));
        }
    }
}

#[test]
fn reflection_examples() {
    assert_eq!(reflect_step(9.0, 2.0, 0.0, 10.0), (9.0, -2.0));
    assert_eq!(reflect_step(1.0, -3.0, 0.0, 10.0), (2.0, 3.0));
    assert_eq!(reflect_step(5.0, 1.0, 0.0, 10.0), (6.0, 1.0));
    // Faster than the span: folds twice.
    assert_eq!(reflect_step(0.0, 25.0, 0.0, 10.0), (5.0, 25.0));
}

#[test]
fn pure_video_and_pure_image_batches() {
    let d = generate(&small(DatasetKind::MovingBars, 10)).unwrap();
    let mut rng = RngStream::new(0, 2);
    let v = d.next_batch::<f32>(4, 0, &mut rng).unwrap();
    assert_eq!(v.videos.unwrap().dims(), &[4, 8, 1, 16, 16]);
    assert!(v.image_frames.is_none() && v.image_labels.is_empty());
    assert_eq!(v.labels.len(), 4);
    let i = d.next_batch::<f32>(0, 6, &mut rng).unwrap();
    assert!(i.videos.is_none() && i.labels.is_empty());
    assert_eq!(i.image_frames.unwrap().dims(), &[6, 1, 1, 16, 16]);
    assert!(matches!(
        d.next_batch::<f32>(0, 0, &mut rng),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn image_frames_are_genuine_frames() {
    let d = generate(&small(DatasetKind::BouncingBall, 7)).unwrap();
    let b = d
        .next_batch::<f64>(0, 20, &mut RngStream::new(3, 2))
        .unwrap();
    let imgs = b.image_frames.unwrap();
    for (k, img) in imgs.data().chunks(256).enumerate() {
        let hit = (0..7)
            .flat_map(|v| (0..8).map(move |f| (v, f)))
            .find(|&(v, f)| frame(&d, v, f) == img);
        let (v, _) = hit.unwrap_or_else(|| panic!("image {k} is not a dataset frame"));
        assert_eq!(d.labels()[v], b.image_labels[k]);
    }
}

#[test]
fn videos_are_sampled_uniformly() {
    let d = generate(&DatasetSpec {
        height: 4,
        width: 4,
        n_frames: 1,
        ..small(DatasetKind::DriftingGradient, 10)
    })
    .unwrap();
    let mut counts = [0usize; 10];
    let mut rng = RngStream::new(5, 2);
    let mut remaining = 100_000;
    while remaining > 0 {
        let b = d.next_batch::<f64>(1000, 0, &mut rng).unwrap();
        for item in b.videos.unwrap().data().chunks(16) {
            let v = (0..10).find(|&v| frame(&d, v, 0) == item).unwrap();
            counts[v] += 1;
        }
        remaining -= 1000;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 1.0).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn frame_statistics_are_stationary() {
    for kind in KINDS {
        let d = generate(&small(kind, 4000)).unwrap();
        let stats: Vec<(f64, f64)> = (0..8)
            .map(|f| {
                let vals: Vec<f64> = (0..4000).flat_map(|v| frame(&d, v, f)).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                (
                    mean,
                    vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n,
                )
            })
            .collect();
        for &(m, var) in &stats[1..] {
            assert!((m - stats[0].0).abs() < 0.02, "{kind} means {stats:?}");
            assert!(
                (var - stats[0].1).abs() < 0.02,
                "{kind} variances {stats:?}"
            );
        }
    }
}

#[test]
fn moving_frames_are_pairwise_distinct() {
    for kind in KINDS {
        let d = generate(&small(kind, 20)).unwrap();
        for v in 0..20 {
            let frames: Vec<Vec<f64>> = (0..8).map(|f| frame(&d, v, f)).collect();
            for i in 0..8 {
                for j in i + 1..8 {
                    assert_ne!(frames[i], frames[j], "{kind} video {v} frames {i},{j}");
                }
            }
        }
    }
}

#[test]
fn values_stay_in_range_and_labels_in_classes() {
    for kind in KINDS {
        let d = generate(&DatasetSpec {
            motion_scale: 2.5,
            class_count: 3,
            ..small(kind, 50)
        })
        .unwrap();
        assert!(d
            .videos()
            .unwrap()
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        assert!(d.labels().iter().all(|&l| l < 3));
    }
}

#[test]
fn export_import_round_trip() {
    let spec = small(DatasetKind::BouncingBall, 3);
    let d = generate(&spec).unwrap();
    let dir = std::env::temp_dir().join(format!("pyoco-data-{}", std::process::id()));
    d.export(&dir).unwrap();
    let back = Dataset::import(&dir, &spec).unwrap();
    assert_eq!(back.videos().unwrap(), d.videos().unwrap());
    assert_eq!(back.labels(), d.labels());
    let other = DatasetSpec { seed: 9, ..spec };
    assert!(matches!(
        Dataset::import(&dir, &other),
        Err(Error::Format(_))
    ));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn empty_dataset_refuses_batches() {
    let d = generate(&small(DatasetKind::BouncingBall, 3)).unwrap();
    let empty = d.subset(&[]).unwrap();
    assert!(empty.is_empty());
    assert!(matches!(
        empty.next_batch::<f64>(1, 0, &mut RngStream::new(0, 0)),
        Err(Error::State(_))
    ));
    assert!(matches!(empty.videos(), Err(Error::State(_))));
}

#[test]
fn degenerate_specs_are_rejected() {
    assert!(matches!(
        generate(&DatasetSpec {
            height: 3,
            ..DatasetSpec::default()
        }),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        generate(&DatasetSpec {
            n_videos: 0,
            ..DatasetSpec::default()
        }),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        generate(&DatasetSpec {
            motion_scale: f64::NAN,
            ..DatasetSpec::default()
        }),
        Err(Error::Parameter(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reflection_agrees_with_folding(p in 0.0f64..10.0, v in -40.0f64..40.0, steps in 1usize..20) {
        let (mut q, mut u) = (p, v);
        for _ in 0..steps {
            (q, u) = reflect_step(q, u, 0.0, 10.0);
        }
        prop_assert!((q - fold(p + v * steps as f64, 0.0, 10.0)).abs() < 1e-9);
        prop_assert!((0.0..=10.0).contains(&q));
    }

    #[test]
    fn any_valid_spec_is_in_range(kind in 0usize..3, seed in any::<u64>(), scale in 0.0f64..4.0, h in 4usize..12) {
        let spec = DatasetSpec { kind: KINDS[kind], seed, motion_scale: scale, height: h, width: h + 2, n_videos: 3, n_frames: 4, ..DatasetSpec::default() };
        let d = generate(&spec).unwrap();
        prop_assert!(d.videos().unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
