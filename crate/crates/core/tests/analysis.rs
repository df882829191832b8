use proptest::prelude::*;
use pyoco_core::analysis::csv::{alpha_sweep_csv, strategies_csv};
use pyoco_core::analysis::experiment;
use pyoco_core::analysis::{
    build_noise_bank, build_noise_bank_with, cosine_stats, frechet_distance, param_hash,
    pca_embed_2d, run_alpha_sweep, run_strategy_comparison, video_stats, ExperimentContext,
    ExperimentSettings, NoiseBank, NoiseEntry, VideoStats,
};
use pyoco_core::denoiser::{init_from_image_model, DenoiserModel, ModelConfig, OptimizerConfig};
use pyoco_core::edm::EdmParams;
use pyoco_core::ndcore::{gaussian, RngStream, Shape, Tensor};
use pyoco_core::noise_prior::{NoiseKind, NoiseSpec};
use pyoco_core::sampler::{GaussianDenoiser, SamplerConfig};
use pyoco_core::toydata::{generate, Dataset, DatasetSpec};
use pyoco_core::train::{train, Phase, TrainConfig};
use pyoco_core::Error;

fn bank_from(maps: &[Vec<f64>], per_video: usize) -> NoiseBank {
    NoiseBank {
        entries: maps
            .iter()
            .enumerate()
            .map(|(i, m)| NoiseEntry {
                video_id: i / per_video,
                frame_index: i % per_video,
                noise: m.clone(),
            })
            .collect(),
    }
}

fn normal_maps(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let t: Tensor<f64> = gaussian(&mut RngStream::new(seed, 4), &[n, d]).unwrap();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

/// Product of Householder reflections, applied without forming the matrix.
fn rotate(maps: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
    let d = maps[0].len();
    let vs = normal_maps(4, d, seed);
    maps.iter()
        .map(|m| {
            let mut x = m.clone();
            for v in &vs {
                let vv: f64 = v.iter().map(|a| a * a).sum();
                let k = 2.0 * x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / vv;
                x.iter_mut().zip(v).for_each(|(a, b)| *a -= k * b);
            }
            x
        })
        .collect()
}

#[test]
fn identical_maps_have_unit_cosine() {
    let m = normal_maps(1, 32, 0).remove(0);
    let s = cosine_stats(&bank_from(&vec![m; 6], 3)).unwrap();
    assert!((s.same_mean - 1.0).abs() < 1e-12 && (s.diff_mean - 1.0).abs() < 1e-12);
    assert!(s.same_std < 1e-7 && s.diff_std < 1e-7);
    assert_eq!((s.same_pairs, s.diff_pairs), (6, 9));
}

#[test]
fn independent_maps_concentrate_near_zero() {
    let d = 1024;
    let s = cosine_stats(&bank_from(&normal_maps(120, d, 1), 4)).unwrap();
    let want = 1.0 / (d as f64).sqrt();
    assert!(
        s.same_mean.abs() < 0.01 && s.diff_mean.abs() < 0.01,
        "{s:?}"
    );
    assert!(
        (s.same_std / want - 1.0).abs() < 0.2 && (s.diff_std / want - 1.0).abs() < 0.2,
        "{s:?}"
    );
}

#[test]
fn cosine_statistics_survive_rotation() {
    let maps = normal_maps(12, 40, 2);
    let a = cosine_stats(&bank_from(&maps, 3)).unwrap();
    let b = cosine_stats(&bank_from(&rotate(&maps, 3), 3)).unwrap();
    for (x, y) in [
        (a.same_mean, b.same_mean),
        (a.same_std, b.same_std),
        (a.diff_mean, b.diff_mean),
        (a.diff_std, b.diff_std),
    ] {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn mixed_prior_bank_matches_its_covariance() {
    let spec = NoiseSpec::new(NoiseKind::Mixed, 1.0).unwrap();
    let x: Tensor<f64> = spec
        .sample(
            &Shape::video(40, 6, 1, 16, 16).unwrap(),
            &mut RngStream::new(4, 4),
        )
        .unwrap();
    let maps: Vec<Vec<f64>> = x.data().chunks(256).map(|c| c.to_vec()).collect();
    let s = cosine_stats(&bank_from(&maps, 6)).unwrap();
    assert!(
        (s.same_mean - spec.frame_covariance(0, 1)).abs() < 0.03,
        "{s:?}"
    );
    assert!(s.diff_mean.abs() < 0.03, "{s:?}");
}

#[test]
fn degenerate_banks_are_refused() {
    let one = bank_from(&normal_maps(1, 8, 5), 1);
    assert!(matches!(cosine_stats(&one), Err(Error::Degenerate(_))));
    assert!(matches!(pca_embed_2d(&one), Err(Error::Degenerate(_))));
    let singletons = bank_from(&normal_maps(4, 8, 5), 1);
    assert!(matches!(
        cosine_stats(&singletons),
        Err(Error::Degenerate(_))
    ));
    let mut zero = bank_from(&normal_maps(4, 8, 5), 2);
    zero.entries[1].noise.iter_mut().for_each(|v| *v = 0.0);
    assert!(matches!(cosine_stats(&zero), Err(Error::Degenerate(_))));
    let same = bank_from(&vec![vec![1.0; 8]; 4], 2);
    assert!(matches!(pca_embed_2d(&same), Err(Error::Degenerate(_))));
}

#[test]
fn collinear_maps_embed_on_a_line() {
    let base = normal_maps(2, 20, 6);
    let maps: Vec<Vec<f64>> = [-1.0, 0.5, 2.0, 3.5]
        .iter()
        .map(|c| {
            base[0]
                .iter()
                .zip(&base[1])
                .map(|(b, v)| b + c * v)
                .collect()
        })
        .collect();
    for p in pca_embed_2d(&bank_from(&maps, 2)).unwrap() {
        assert!(p.y.abs() < 1e-8, "{p:?}");
    }
}

#[test]
fn first_component_separates_two_clusters() {
    let mut maps = normal_maps(40, 16, 7);
    for (i, m) in maps.iter_mut().enumerate() {
        m[3] += if i < 20 { 2.5 } else { -2.5 };
    }
    let pts = pca_embed_2d(&bank_from(&maps, 2)).unwrap();
    let sign = pts[0].x.signum();
    for (i, p) in pts.iter().enumerate() {
        assert_eq!(p.x.signum() == sign, i < 20, "point {i}: {p:?}");
    }
}

#[test]
fn embedding_distances_survive_rotation() {
    let maps = normal_maps(10, 12, 8);
    let a = pca_embed_2d(&bank_from(&maps, 2)).unwrap();
    let b = pca_embed_2d(&bank_from(&rotate(&maps, 9), 2)).unwrap();
    let dist = |p: &[pyoco_core::analysis::EmbeddedPoint], i: usize, j: usize| {
        ((p[i].x - p[j].x).powi(2) + (p[i].y - p[j].y).powi(2)).sqrt()
    };
    for i in 0..10 {
        for j in 0..10 {
            assert!((dist(&a, i, j) - dist(&b, i, j)).abs() < 1e-8);
        }
    }
}

fn univariate(mean: f64, var: f64) -> VideoStats {
    VideoStats {
        mean: vec![mean],
        cov: vec![var],
        n: 100,
    }
}

#[test]
fn frechet_examples() {
    assert_eq!(
        frechet_distance(&univariate(0.0, 1.0), &univariate(0.0, 1.0)).unwrap(),
        0.0
    );
    assert!(
        (frechet_distance(&univariate(0.0, 1.0), &univariate(1.0, 1.0)).unwrap() - 1.0).abs()
            < 1e-12
    );
    // (μ₁−μ₂)² + (s₁−s₂)²
    let d = frechet_distance(&univariate(0.5, 4.0), &univariate(-1.0, 0.25)).unwrap();
    assert!((d - (2.25 + 2.25)).abs() < 1e-12, "{d}");
    let two = VideoStats {
        mean: vec![0.0, 0.0],
        cov: vec![1.0, 0.0, 0.0, 1.0],
        n: 10,
    };
    assert!(matches!(
        frechet_distance(&univariate(0.0, 1.0), &two),
        Err(Error::Shape(_))
    ));
    let bad = VideoStats {
        mean: vec![0.0, 0.0],
        cov: vec![1.0, 3.0, 3.0, 1.0],
        n: 10,
    };
    assert!(matches!(
        frechet_distance(&bad, &two),
        Err(Error::Numeric(_))
    ));
}

fn freeze(videos: &Tensor<f64>) -> Tensor<f64> {
    let (b, n, c, h, w) = videos.shape().as_video().unwrap();
    let fsz = c * h * w;
    let data = videos
        .data()
        .chunks(n * fsz)
        .flat_map(|v| v[..fsz].repeat(n))
        .collect();
    Tensor::from_vec(Shape::video(b, n, c, h, w).unwrap(), data).unwrap()
}

#[test]
fn self_distance_is_small_against_frozen_videos() {
    let spec = DatasetSpec {
        n_videos: 10_000,
        height: 8,
        width: 8,
        ..DatasetSpec::default()
    };
    let a = generate(&spec).unwrap();
    let b = generate(&DatasetSpec { seed: 7, ..spec }).unwrap();
    let sa = video_stats(a.videos().unwrap()).unwrap();
    let own = frechet_distance(&sa, &video_stats(b.videos().unwrap()).unwrap()).unwrap();
    let frozen =
        frechet_distance(&sa, &video_stats(&freeze(b.videos().unwrap())).unwrap()).unwrap();
    assert!(own < 0.05 * frozen, "self {own}, frozen {frozen}");
}

fn gaussian_dataset(n_videos: usize, side: usize, std: f64, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        n_videos,
        n_frames: 2,
        height: side,
        width: side,
        ..DatasetSpec::default()
    };
    let v: Tensor<f64> =
        gaussian(&mut RngStream::new(seed, 1), &[n_videos, 2, 1, side, side]).unwrap();
    Dataset::from_videos(&spec, v.map(|x| std * x), vec![0; n_videos]).unwrap()
}

#[test]
fn analytic_inversion_gives_unit_variance_maps() {
    let data = gaussian_dataset(3, 128, 0.5, 10);
    let g = GaussianDenoiser {
        mean: 0.0,
        std: 0.5,
    };
    let bank = build_noise_bank_with::<f64, _>(
        &g,
        &SamplerConfig::heun(40),
        &data,
        3,
        2,
        &mut RngStream::new(0, 4),
    )
    .unwrap();
    assert_eq!(bank.len(), 6);
    for e in &bank.entries {
        let n = e.noise.len() as f64;
        let var = e.noise.iter().map(|v| v * v).sum::<f64>() / n;
        assert!(
            (var - 1.0).abs() < 0.05,
            "video {} frame {}: {var}",
            e.video_id,
            e.frame_index
        );
    }
}

#[test]
fn duplicated_frames_invert_identically() {
    let one = gaussian_dataset(1, 8, 0.5, 11);
    let v = one.videos().unwrap();
    let twin = Tensor::from_dims(&[2, 2, 1, 8, 8], v.data().repeat(2)).unwrap();
    let spec = DatasetSpec {
        n_videos: 2,
        ..one.spec().clone()
    };
    let data = Dataset::from_videos(&spec, twin, vec![0, 0]).unwrap();
    let g = GaussianDenoiser {
        mean: 0.1,
        std: 0.4,
    };
    let bank = build_noise_bank_with::<f64, _>(
        &g,
        &SamplerConfig::heun(20),
        &data,
        2,
        2,
        &mut RngStream::new(0, 4),
    )
    .unwrap();
    assert_eq!(bank.entries[0].noise, bank.entries[2].noise);
    assert_eq!(bank.entries[1].noise, bank.entries[3].noise);
}

#[test]
fn noise_bank_preconditions() {
    let data = gaussian_dataset(2, 8, 0.5, 12);
    let cfg = ModelConfig {
        in_channels: 1,
        base_channels: 4,
        levels: 2,
        emb_dim: 6,
        groups: 2,
        temporal_enabled: false,
        ..ModelConfig::default()
    };
    let mut model = DenoiserModel::<f64>::new(cfg.clone(), &mut RngStream::new(0, 0)).unwrap();
    let sc = SamplerConfig::heun(4);
    let edm = EdmParams::default();
    let mut rng = RngStream::new(0, 4);
    assert!(matches!(
        build_noise_bank(&model, &edm, &sc, &data, 2, 2, &mut rng),
        Err(Error::State(_))
    ));
    model.set_steps_trained(5);
    let bank = build_noise_bank(&model, &edm, &sc, &data, 1, 1, &mut rng).unwrap();
    assert!(matches!(cosine_stats(&bank), Err(Error::Degenerate(_))));
    model.set_temporal_enabled(true);
    assert!(matches!(
        build_noise_bank(&model, &edm, &sc, &data, 2, 2, &mut rng),
        Err(Error::State(_))
    ));
    model.set_temporal_enabled(false);
    assert!(matches!(
        build_noise_bank(&model, &edm, &sc, &data, 3, 2, &mut rng),
        Err(Error::Parameter(_))
    ));
}

struct Fixture {
    image: DenoiserModel<f32>,
    data: Dataset,
    held_out: Dataset,
    settings: ExperimentSettings,
}

fn fixture(steps: usize) -> Fixture {
    let spec = DatasetSpec {
        n_videos: 12,
        n_frames: 4,
        height: 8,
        width: 8,
        ..DatasetSpec::default()
    };
    let data = generate(&spec).unwrap();
    let held_out = generate(&spec.held_out(12)).unwrap();
    let model = ModelConfig {
        in_channels: 1,
        base_channels: 4,
        levels: 2,
        emb_dim: 6,
        groups: 2,
        max_frames: 4,
        temporal_enabled: false,
        ..ModelConfig::default()
    };
    let mut image = DenoiserModel::<f32>::new(model.clone(), &mut RngStream::new(0, 2)).unwrap();
    let img_cfg = TrainConfig {
        steps: 3,
        batch_size: 0,
        image_batch: 4,
        optimizer: OptimizerConfig::default(),
    };
    train(
        &mut image,
        &data,
        Phase::Image,
        &img_cfg,
        &NoiseSpec::iid(),
        &EdmParams::default(),
        &RngStream::new(0, 2),
    )
    .unwrap();
    let settings = ExperimentSettings {
        seed: 3,
        model,
        edm: EdmParams::default(),
        sampler: SamplerConfig::deis(2, 4),
        video_training: TrainConfig {
            steps,
            batch_size: 2,
            image_batch: 1,
            optimizer: OptimizerConfig::default(),
        },
        n_generate: 6,
        use_ema: true,
        repeats: 1,
    };
    Fixture {
        image,
        data,
        held_out,
        settings,
    }
}

#[test]
fn sweep_is_reproducible_with_expected_rows() {
    let f = fixture(2);
    let alphas = [0.0, 1.0, 2.0, f64::INFINITY];
    let kinds = [NoiseKind::Mixed, NoiseKind::Progressive];
    let run = || {
        let ctx = ExperimentContext::new(&f.image, &f.data, &f.held_out).unwrap();
        alpha_sweep_csv(&run_alpha_sweep(&ctx, &f.settings, &alphas, &kinds).unwrap())
    };
    let a = run();
    assert_eq!(a, run());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "kind,alpha,video_metric,frame_metric,seed,steps");
    assert_eq!(lines.len(), 1 + 2 * alphas.len() + 1);
    assert_eq!(lines.iter().filter(|l| l.starts_with("mixed,")).count(), 4);
    assert_eq!(
        lines
            .iter()
            .filter(|l| l.starts_with("progressive,"))
            .count(),
        4
    );
    assert!(lines.last().unwrap().starts_with("scratch,"));
    assert!(lines.iter().any(|l| l.starts_with("mixed,inf,")));
}

#[test]
fn zero_alpha_row_equals_plain_finetuning() {
    let f = fixture(2);
    let sweep = {
        let ctx = ExperimentContext::new(&f.image, &f.data, &f.held_out).unwrap();
        run_alpha_sweep(
            &ctx,
            &f.settings,
            &[0.0],
            &[NoiseKind::Mixed, NoiseKind::Progressive],
        )
        .unwrap()
    };
    let strategies = {
        let ctx = ExperimentContext::new(&f.image, &f.data, &f.held_out).unwrap();
        run_strategy_comparison(&ctx, &f.settings, 1.0, 2.0).unwrap()
    };
    let finetune = &strategies[1].results[0];
    assert_eq!(strategies[1].kind, "finetune");
    for row in &sweep[..2] {
        assert_eq!(row.results[0].video_metric, finetune.video_metric);
        assert_eq!(row.results[0].frame_metric, finetune.frame_metric);
    }
    assert_eq!(
        sweep[2].results[0].video_metric,
        strategies[0].results[0].video_metric
    );
}

#[test]
fn zero_budget_rows_keep_their_initialization() {
    let f = fixture(0);
    let ctx = ExperimentContext::new(&f.image, &f.data, &f.held_out).unwrap();
    let rows = run_strategy_comparison(&ctx, &f.settings, 0.0, 0.0).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.kind.as_str()).collect();
    assert_eq!(names, ["scratch", "finetune", "mixed", "progressive"]);
    let root = RngStream::new(f.settings.seed, experiment::TRAINING_STREAM);
    let inflated = init_from_image_model(
        &f.image,
        &mut root.split(experiment::streams::TEMPORAL_INIT),
    )
    .unwrap();
    for r in &rows {
        assert_eq!(r.results[0].init_hash, r.results[0].final_hash);
    }
    for r in &rows[1..] {
        assert_eq!(r.results[0].init_hash, param_hash(inflated.params()));
        assert_eq!(r.results[0].video_metric, rows[1].results[0].video_metric);
        assert_eq!(r.results[0].frame_metric, rows[1].results[0].frame_metric);
    }
    assert_ne!(rows[0].results[0].init_hash, rows[1].results[0].init_hash);
    let csv = strategies_csv(&rows);
    assert!(csv
        .lines()
        .nth(2)
        .unwrap()
        .ends_with(&rows[1].results[0].init_hash));
}

#[test]
fn sweep_rejects_other_kinds() {
    let f = fixture(1);
    let ctx = ExperimentContext::new(&f.image, &f.data, &f.held_out).unwrap();
    assert!(matches!(
        run_alpha_sweep(&ctx, &f.settings, &[1.0], &[NoiseKind::Iid]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        run_alpha_sweep(&ctx, &f.settings, &[], &[NoiseKind::Mixed]),
        Err(Error::Config(_))
    ));
}

fn stats_strategy() -> impl Strategy<Value = VideoStats> {
    (
        prop::collection::vec(-3.0f64..3.0, 3),
        prop::collection::vec(-1.0f64..1.0, 9),
    )
        .prop_map(|(mean, a)| {
            // A·Aᵀ + 0.1 I is symmetric positive definite.
            let mut cov = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    cov[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * a[j * 3 + k]).sum::<f64>()
                        + if i == j { 0.1 } else { 0.0 };
                }
            }
            VideoStats { mean, cov, n: 50 }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in stats_strategy(), b in stats_strategy()) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    }
}
