use pyoco_core::denoiser::{DenoiserModel, ModelConfig};
use pyoco_core::edm::{draw_noise, gradient_check, Conditioning, EdmParams};
use pyoco_core::ndcore::{gaussian, RngStream, Shape};
use pyoco_core::noise_prior::{NoiseKind, NoiseSpec};

fn small_config(levels: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_channels: 4,
        levels,
        emb_dim: 6,
        groups: 2,
        num_classes: classes,
        max_frames: 4,
        temporal_enabled: true,
        norm_eps: 1e-5,
    }
}

#[test]
fn full_model_gradients_match_central_differences() {
    let cfg = small_config(2, 3);
    let mut rng = RngStream::new(11, 0);
    let mut model = DenoiserModel::<f64>::new(cfg, &mut rng).unwrap();
    model.randomize(&mut rng, 0.4);
    assert!(model.num_params() <= 10_000);
    let shape = Shape::video(2, 3, 1, 4, 4).unwrap();
    let x = gaussian::<f64>(&mut rng, shape.dims()).unwrap().scale(0.5);
    let spec = NoiseSpec::new(NoiseKind::Mixed, 1.0).unwrap();
    let params = EdmParams::default();
    let draw = draw_noise(&shape, &spec, &params, &RngStream::new(3, 2)).unwrap();
    let cond = Conditioning::classes(vec![0, 2]);
    let all: Vec<usize> = (0..model.num_params()).collect();
    let report = gradient_check(&model, &x, &cond, &draw, &params, &all, 3e-3).unwrap();
    let name = model
        .layout()
        .views()
        .iter()
        .find(|v| v.range().contains(&report.worst_index))
        .map(|v| v.name.clone());
    assert!(report.max_rel_error < 1e-4, "{report:?} at {name:?}");
}
