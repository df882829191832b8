use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use pyoco_core::analysis::csv::{
    alpha_sweep_csv, cosine_stats_csv, embed_2d_csv, fmt_float, strategies_csv,
};
use pyoco_core::analysis::experiment::{
    streams, ANALYSIS_STREAM, SAMPLING_STREAM, TRAINING_STREAM,
};
use pyoco_core::analysis::{
    build_noise_bank, cosine_stats, generate_videos, pca_embed_2d, run_alpha_sweep,
    run_strategy_comparison, ExperimentContext,
};
use pyoco_core::config::ExperimentConfig;
use pyoco_core::denoiser::{
    init_from_image_model, load_checkpoint, save_checkpoint, DenoiserModel,
};
use pyoco_core::edm::{draw_noise, gradient_check, Conditioning};
use pyoco_core::ndcore::{gaussian, ptns, RngStream, Shape};
use pyoco_core::noise_prior::NoiseSpec;
use pyoco_core::sampler::{invert, ModelDenoiser};
use pyoco_core::toydata::{generate, Dataset};
use pyoco_core::train::{train, Phase, TrainOutcome};
use pyoco_core::{ModelF32, TensorF32};

use crate::manifest::{self, Manifest};
use crate::{Command, ModelChoice, UsageError};

const GRADCHECK_TOL: f64 = 1e-4;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::parse(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn train_data(&self) -> PathBuf {
        self.root.join("data/train")
    }
    fn held_out_data(&self) -> PathBuf {
        self.root.join("data/held_out")
    }
    fn checkpoint(&self, m: ModelChoice) -> PathBuf {
        self.root.join("checkpoints").join(m.dir_name())
    }
}

fn load_data(dir: &Path, spec: &pyoco_core::toydata::DatasetSpec) -> Result<Dataset> {
    if !dir.join("index.txt").exists() {
        return Err(usage(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    Ok(Dataset::import(dir, spec)?)
}

/// Loads a checkpoint, substituting EMA weights when the config asks for them.
fn load_model(cfg: &ExperimentConfig, paths: &Paths, which: ModelChoice) -> Result<ModelF32> {
    let dir = paths.checkpoint(which);
    if !dir.join("manifest.txt").exists() {
        let producer = match which {
            ModelChoice::Image => "train-image",
            ModelChoice::Video => "finetune-video",
            ModelChoice::Scratch => "train-scratch",
        };
        return Err(usage(format!(
            "no {} checkpoint at {}; run {producer} first",
            which.dir_name(),
            dir.display()
        )));
    }
    let ck = load_checkpoint::<f32>(&dir, &cfg.model_config())?;
    Ok(if cfg.use_ema {
        ck.ema_model()
    } else {
        ck.model
    })
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", fmt_float(*l)));
    }
    s
}

fn write(path: &Path, text: &str, m: &mut Manifest) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    m.output(path)
}

fn save_trained(
    dir: &Path,
    model: &ModelF32,
    outcome: &TrainOutcome<f32>,
    losses: &Path,
    m: &mut Manifest,
) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    save_checkpoint(dir, model, Some(outcome.optimizer.ema()))?;
    m.output(dir)?;
    write(losses, &losses_csv(&outcome.losses), m)?;
    let l = &outcome.losses;
    if let (Some(first), Some(last)) = (l.first(), l.last()) {
        println!("trained {} steps: loss {first:.4} -> {last:.4}", l.len());
    }
    Ok(())
}

pub fn run(command: &Command, config: Option<&Path>, verify: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let name = command.name();
    let manifest_path = manifest::manifest_path(&cfg, name);
    let previous = if verify {
        Some(
            fs::read_to_string(&manifest_path)
                .map_err(|e| usage(format!("no manifest at {}: {e}", manifest_path.display())))?,
        )
    } else {
        None
    };
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut m = Manifest::new(name);
    let code = execute(command, &cfg, &mut m)?;
    let text = m.render(&cfg);
    if let Some(old) = previous {
        let diff = manifest::diff(&old, &text);
        if !diff.is_empty() {
            for line in &diff {
                eprintln!("{line}");
            }
            bail!(
                "re-run differs from {} in {} line(s)",
                manifest_path.display(),
                diff.len()
            );
        }
        println!("manifest verified: {}", manifest_path.display());
    }
    fs::write(&manifest_path, text)?;
    Ok(code)
}

fn execute(command: &Command, cfg: &ExperimentConfig, m: &mut Manifest) -> Result<ExitCode> {
    let paths = Paths {
        root: cfg.output_dir.clone(),
    };
    let training = RngStream::new(cfg.seed, TRAINING_STREAM);
    match command {
        Command::GenData => {
            for (dir, spec) in [
                (paths.train_data(), cfg.dataset.clone()),
                (paths.held_out_data(), cfg.held_out_spec()),
            ] {
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                generate(&spec)?.export(&dir)?;
                m.output(&dir)?;
            }
        }
        Command::TrainImage => {
            let data = load_data(&paths.train_data(), &cfg.dataset)?;
            m.input(&paths.train_data().join("index.txt"))?;
            let mut model = DenoiserModel::<f32>::new(
                cfg.model_config(),
                &mut training.split(streams::MODEL_INIT),
            )?;
            let outcome = train(
                &mut model,
                &data,
                Phase::Image,
                &cfg.image_training,
                &NoiseSpec::iid(),
                &cfg.edm,
                &training.split(streams::IMAGE_PHASE),
            )?;
            save_trained(
                &paths.checkpoint(ModelChoice::Image),
                &model,
                &outcome,
                &paths.root.join("image_losses.csv"),
                m,
            )?;
        }
        Command::FinetuneVideo | Command::TrainScratch => {
            let data = load_data(&paths.train_data(), &cfg.dataset)?;
            m.input(&paths.train_data().join("index.txt"))?;
            let (mut model, which) = if matches!(command, Command::FinetuneVideo) {
                let image = load_model(cfg, &paths, ModelChoice::Image)?;
                m.input(&paths.checkpoint(ModelChoice::Image))?;
                let model =
                    init_from_image_model(&image, &mut training.split(streams::TEMPORAL_INIT))?;
                (model, ModelChoice::Video)
            } else {
                let mut mc = cfg.model_config();
                mc.temporal_enabled = true;
                (
                    DenoiserModel::<f32>::new(mc, &mut training.split(streams::MODEL_INIT))?,
                    ModelChoice::Scratch,
                )
            };
            let outcome = train(
                &mut model,
                &data,
                Phase::Video,
                &cfg.training,
                &cfg.noise()?,
                &cfg.edm,
                &training.split(streams::VIDEO_PHASE),
            )?;
            let losses = paths.root.join(format!("{}_losses.csv", which.dir_name()));
            save_trained(&paths.checkpoint(which), &model, &outcome, &losses, m)?;
        }
        Command::Sample {
            n,
            out,
            model: which,
        } => {
            let n = n.unwrap_or(cfg.sample_count);
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            m.arg("n", n);
            m.arg("model", which.dir_name());
            let data = load_data(&paths.train_data(), &cfg.dataset)?;
            let model = load_model(cfg, &paths, *which)?;
            m.input(&paths.checkpoint(*which))?;
            let videos = generate_videos(
                &model,
                &cfg.edm,
                &cfg.sampler,
                &cfg.noise()?,
                &data,
                n,
                &RngStream::new(cfg.seed, SAMPLING_STREAM),
            )?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            ptns::write(out, &videos)?;
            m.output(out)?;
        }
        Command::Invert {
            input,
            out,
            model: which,
        } => {
            m.arg("model", which.dir_name());
            if !input.exists() {
                return Err(usage(format!("input {} does not exist", input.display())));
            }
            m.input(input)?;
            let video: TensorF32 = ptns::read(input)?;
            let (b, t, c, h, w) = video.shape().as_video()?;
            let model = load_model(cfg, &paths, *which)?;
            m.input(&paths.checkpoint(*which))?;
            let den = ModelDenoiser::new(&model, Conditioning::none(), cfg.edm);
            let sampler = cfg.inversion_sampler();
            let noise = if model.temporal_enabled() {
                invert(&den, &sampler, &video)?
            } else {
                let frames = video.clone().reshape(Shape::video(b * t, 1, c, h, w)?)?;
                invert(&den, &sampler, &frames)?.reshape(video.shape().clone())?
            };
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            ptns::write(out, &noise)?;
            m.output(out)?;
        }
        Command::AnalyzeNoise => {
            let data = load_data(&paths.train_data(), &cfg.dataset)?;
            let image = load_model(cfg, &paths, ModelChoice::Image)?;
            m.input(&paths.checkpoint(ModelChoice::Image))?;
            let a = &cfg.analysis;
            let bank = build_noise_bank(
                &image,
                &cfg.edm,
                &cfg.inversion_sampler(),
                &data,
                a.bank_videos,
                a.bank_frames,
                &mut RngStream::new(cfg.seed, ANALYSIS_STREAM),
            )?;
            let stats = cosine_stats(&bank)?;
            println!(
                "same video {:.4} ± {:.4}   different video {:.4} ± {:.4}",
                stats.same_mean, stats.same_std, stats.diff_mean, stats.diff_std
            );
            write(
                &paths.root.join("cosine_stats.csv"),
                &cosine_stats_csv(&stats),
                m,
            )?;
            write(
                &paths.root.join("embed_2d.csv"),
                &embed_2d_csv(&pca_embed_2d(&bank)?),
                m,
            )?;
        }
        Command::SweepAlpha { alphas } => {
            let mut local = cfg.clone();
            if let Some(list) = alphas {
                local.analysis.alphas =
                    ExperimentConfig::parse(&format!("analysis.alphas = {list}"))
                        .map_err(|e| usage(format!("--alphas: {e}")))?
                        .analysis
                        .alphas;
            }
            m.arg(
                "alphas",
                local
                    .analysis
                    .alphas
                    .iter()
                    .map(|&x| fmt_float(x))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            let (data, held, image) = experiment_inputs(cfg, &paths, m)?;
            let ctx = ExperimentContext::new(&image, &data, &held)?;
            let rows = run_alpha_sweep(
                &ctx,
                &local.experiment_settings(),
                &local.analysis.alphas,
                &local.analysis.kinds,
            )?;
            for r in &rows {
                println!(
                    "{:<12} alpha {:>6}  video {:.5}  frame {:.5}",
                    r.kind,
                    fmt_alpha(r.alpha),
                    r.mean_video(),
                    r.mean_frame()
                );
            }
            write(
                &paths.root.join("alpha_sweep.csv"),
                &alpha_sweep_csv(&rows),
                m,
            )?;
        }
        Command::CompareStrategies => {
            let (data, held, image) = experiment_inputs(cfg, &paths, m)?;
            let ctx = ExperimentContext::new(&image, &data, &held)?;
            let a = &cfg.analysis;
            let rows = run_strategy_comparison(
                &ctx,
                &cfg.experiment_settings(),
                a.mixed_alpha,
                a.progressive_alpha,
            )?;
            for r in &rows {
                println!(
                    "{:<12} video {:.5}  frame {:.5}",
                    r.kind,
                    r.mean_video(),
                    r.mean_frame()
                );
            }
            write(
                &paths.root.join("strategies.csv"),
                &strategies_csv(&rows),
                m,
            )?;
        }
        Command::Gradcheck { max_params } => return gradcheck(cfg, *max_params, &paths, m),
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_alpha(a: f64) -> String {
    if a.is_infinite() {
        "inf".into()
    } else {
        format!("{a}")
    }
}

fn experiment_inputs(
    cfg: &ExperimentConfig,
    paths: &Paths,
    m: &mut Manifest,
) -> Result<(Dataset, Dataset, ModelF32)> {
    let data = load_data(&paths.train_data(), &cfg.dataset)?;
    let held = load_data(&paths.held_out_data(), &cfg.held_out_spec())?;
    m.input(&paths.train_data().join("index.txt"))?;
    m.input(&paths.held_out_data().join("index.txt"))?;
    let image = load_model(cfg, paths, ModelChoice::Image)?;
    m.input(&paths.checkpoint(ModelChoice::Image))?;
    Ok((data, held, image))
}

/// Checks the configured architecture in f64 on a two-video clip with
/// randomised weights, so zero-initialised layers do not hide errors.
fn gradcheck(
    cfg: &ExperimentConfig,
    max_params: Option<usize>,
    paths: &Paths,
    m: &mut Manifest,
) -> Result<ExitCode> {
    let mut mc = cfg.model_config();
    mc.temporal_enabled = true;
    let side = (1usize << (mc.levels - 1)).max(4);
    let frames = cfg.dataset.n_frames.min(3);
    let root = RngStream::new(cfg.seed, ANALYSIS_STREAM);
    let mut rng = root.split(0);
    let mut model = DenoiserModel::<f64>::new(mc.clone(), &mut rng)?;
    model.randomize(&mut rng, 0.4);
    let shape = Shape::video(2, frames, mc.in_channels, side, side)?;
    let x = gaussian::<f64>(&mut rng, shape.dims())?.scale(0.5);
    let draw = draw_noise(&shape, &cfg.noise()?, &cfg.edm, &root.split(1))?;
    let cond = if mc.num_classes > 0 {
        Conditioning::classes((0..2).map(|i| i % mc.num_classes).collect())
    } else {
        Conditioning::none()
    };
    let total = model.num_params();
    let count = max_params.unwrap_or(total).clamp(1, total);
    m.arg("checked", count);
    let indices: Vec<usize> = (0..count).map(|i| i * total / count).collect();
    let report = gradient_check(&model, &x, &cond, &draw, &cfg.edm, &indices, 3e-3)?;
    let worst = model
        .layout()
        .views()
        .iter()
        .find(|v| v.range().contains(&report.worst_index))
        .map(|v| v.name.clone())
        .unwrap_or_default();
    let passed = report.max_rel_error < GRADCHECK_TOL;
    let text = format!(
        "checked = {}\nnum_params = {total}\nmax_rel_error = {}\nworst_index = {}\nworst_param = {worst}\ntolerance = {}\npassed = {passed}\n",
        report.checked,
        fmt_float(report.max_rel_error),
        report.worst_index,
        fmt_float(GRADCHECK_TOL),
    );
    print!("{text}");
    write(&paths.root.join("gradcheck.txt"), &text, m)?;
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
