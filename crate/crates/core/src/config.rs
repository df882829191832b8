//! Experiment configuration as flat `key = value` lines with dotted section
//! prefixes. `#` starts a comment. Every key has a default; unknown or
//! repeated keys are errors.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::analysis::ExperimentSettings;
use crate::denoiser::{ModelConfig, OptimizerConfig};
use crate::edm::EdmParams;
use crate::error::{Error, Result};
use crate::noise_prior::{NoiseKind, NoiseSpec};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::toydata::{DatasetKind, DatasetSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub bank_videos: usize,
    pub bank_frames: usize,
    /// Heun steps for inversion.
    pub invert_steps: usize,
    pub n_generate: usize,
    pub repeats: usize,
    pub alphas: Vec<f64>,
    pub kinds: Vec<NoiseKind>,
    pub mixed_alpha: f64,
    pub progressive_alpha: f64,
    pub held_out_videos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub edm: EdmParams,
    pub noise_kind: NoiseKind,
    pub noise_alpha: f64,
    pub sampler: SamplerConfig,
    pub use_ema: bool,
    pub image_training: TrainConfig,
    pub training: TrainConfig,
    pub analysis: AnalysisConfig,
    pub sample_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig {
            lr: 1e-3,
            ema_decay: 0.99,
            ..OptimizerConfig::default()
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec {
                n_videos: 512,
                height: 8,
                width: 8,
                ..DatasetSpec::default()
            },
            model: ModelConfig {
                base_channels: 8,
                temporal_enabled: false,
                ..ModelConfig::default()
            },
            edm: EdmParams::default(),
            noise_kind: NoiseKind::Mixed,
            noise_alpha: 1.0,
            sampler: SamplerConfig::deis(3, 20),
            use_ema: true,
            image_training: TrainConfig {
                steps: 3000,
                batch_size: 0,
                image_batch: 32,
                optimizer,
            },
            training: TrainConfig {
                steps: 400,
                batch_size: 8,
                image_batch: 8,
                optimizer,
            },
            analysis: AnalysisConfig {
                bank_videos: 50,
                bank_frames: 8,
                invert_steps: 40,
                n_generate: 256,
                repeats: 1,
                alphas: vec![0.0, 0.2, 1.0, 2.0, 10.0, f64::INFINITY],
                kinds: vec![NoiseKind::Mixed, NoiseKind::Progressive],
                mixed_alpha: 1.0,
                progressive_alpha: 2.0,
                held_out_videos: 512,
            },
            sample_count: 16,
        }
    }
}

fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{x:?}")
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        _ => s
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("'{s}' is not a number")),
    }
}

fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| format!("'{s}': {e}"))
}

fn parse_list<T>(
    s: &str,
    item: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(|p| item(p.trim())).collect()
}

const TRAIN_KEYS: [[&str; 9]; 2] = [
    [
        "image_training.steps",
        "image_training.batch_size",
        "image_training.image_batch",
        "image_training.lr",
        "image_training.beta1",
        "image_training.beta2",
        "image_training.eps",
        "image_training.weight_decay",
        "image_training.ema_decay",
    ],
    [
        "training.steps",
        "training.batch_size",
        "training.image_batch",
        "training.lr",
        "training.beta1",
        "training.beta2",
        "training.eps",
        "training.weight_decay",
        "training.ema_decay",
    ],
];

fn train_entries(out: &mut Vec<(&'static str, String)>, keys: [&'static str; 9], t: &TrainConfig) {
    let o = &t.optimizer;
    let values = [
        t.steps.to_string(),
        t.batch_size.to_string(),
        t.image_batch.to_string(),
        fmt_f64(o.lr),
        fmt_f64(o.beta1),
        fmt_f64(o.beta2),
        fmt_f64(o.eps),
        fmt_f64(o.weight_decay),
        fmt_f64(o.ema_decay),
    ];
    out.extend(keys.into_iter().zip(values));
}

impl ExperimentConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let m = &self.model;
        let s = &self.sampler;
        let a = &self.analysis;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("dataset.kind", d.kind.to_string()),
            ("dataset.n_videos", d.n_videos.to_string()),
            ("dataset.n_frames", d.n_frames.to_string()),
            ("dataset.height", d.height.to_string()),
            ("dataset.width", d.width.to_string()),
            ("dataset.channels", d.channels.to_string()),
            ("dataset.motion_scale", fmt_f64(d.motion_scale)),
            ("dataset.class_count", d.class_count.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.levels", m.levels.to_string()),
            ("model.emb_dim", m.emb_dim.to_string()),
            ("model.groups", m.groups.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.max_frames", m.max_frames.to_string()),
            ("model.norm_eps", fmt_f64(m.norm_eps)),
            ("edm.sigma_data", fmt_f64(self.edm.sigma_data)),
            ("edm.p_mean", fmt_f64(self.edm.p_mean)),
            ("edm.p_std", fmt_f64(self.edm.p_std)),
            ("noise.kind", self.noise_kind.to_string()),
            ("noise.alpha", fmt_f64(self.noise_alpha)),
            ("sampler.kind", s.kind.to_string()),
            ("sampler.deis_order", s.deis_order.to_string()),
            ("sampler.steps", s.steps.to_string()),
            ("sampler.sigma_min", fmt_f64(s.sigma_min)),
            ("sampler.sigma_max", fmt_f64(s.sigma_max)),
            ("sampler.grid_rho", fmt_f64(s.grid_rho)),
            ("sampler.churn", fmt_f64(s.churn)),
            ("sampler.use_ema", self.use_ema.to_string()),
            ("sampler.count", self.sample_count.to_string()),
        ];
        train_entries(&mut out, TRAIN_KEYS[0], &self.image_training);
        train_entries(&mut out, TRAIN_KEYS[1], &self.training);
        out.extend([
            ("analysis.bank_videos", a.bank_videos.to_string()),
            ("analysis.bank_frames", a.bank_frames.to_string()),
            ("analysis.invert_steps", a.invert_steps.to_string()),
            ("analysis.n_generate", a.n_generate.to_string()),
            ("analysis.repeats", a.repeats.to_string()),
            (
                "analysis.alphas",
                a.alphas
                    .iter()
                    .map(|&x| fmt_f64(x))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "analysis.kinds",
                a.kinds
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("analysis.mixed_alpha", fmt_f64(a.mixed_alpha)),
            ("analysis.progressive_alpha", fmt_f64(a.progressive_alpha)),
            ("analysis.held_out_videos", a.held_out_videos.to_string()),
        ]);
        out
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        match section {
            "" => match field {
                "seed" => self.seed = parse(v)?,
                "output_dir" => self.output_dir = PathBuf::from(v),
                _ => return Err(format!("unknown key '{key}'")),
            },
            "dataset" => {
                let d = &mut self.dataset;
                match field {
                    "kind" => d.kind = DatasetKind::from_str(v).map_err(|e| e.to_string())?,
                    "n_videos" => d.n_videos = parse(v)?,
                    "n_frames" => d.n_frames = parse(v)?,
                    "height" => d.height = parse(v)?,
                    "width" => d.width = parse(v)?,
                    "channels" => d.channels = parse(v)?,
                    "motion_scale" => d.motion_scale = parse_f64(v)?,
                    "class_count" => d.class_count = parse(v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
            "model" => {
                let m = &mut self.model;
                match field {
                    "base_channels" => m.base_channels = parse(v)?,
                    "levels" => m.levels = parse(v)?,
                    "emb_dim" => m.emb_dim = parse(v)?,
                    "groups" => m.groups = parse(v)?,
                    "num_classes" => m.num_classes = parse(v)?,
                    "max_frames" => m.max_frames = parse(v)?,
                    "norm_eps" => m.norm_eps = parse_f64(v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
            "edm" => match field {
                "sigma_data" => self.edm.sigma_data = parse_f64(v)?,
                "p_mean" => self.edm.p_mean = parse_f64(v)?,
                "p_std" => self.edm.p_std = parse_f64(v)?,
                _ => return Err(format!("unknown key '{key}'")),
            },
            "noise" => match field {
                "kind" => self.noise_kind = NoiseKind::from_str(v).map_err(|e| e.to_string())?,
                "alpha" => self.noise_alpha = parse_f64(v)?,
                _ => return Err(format!("unknown key '{key}'")),
            },
            "sampler" => {
                let s = &mut self.sampler;
                match field {
                    "kind" => s.kind = SamplerKind::from_str(v).map_err(|e| e.to_string())?,
                    "deis_order" => s.deis_order = parse(v)?,
                    "steps" => s.steps = parse(v)?,
                    "sigma_min" => s.sigma_min = parse_f64(v)?,
                    "sigma_max" => s.sigma_max = parse_f64(v)?,
                    "grid_rho" => s.grid_rho = parse_f64(v)?,
                    "churn" => s.churn = parse_f64(v)?,
                    "use_ema" => self.use_ema = parse(v)?,
                    "count" => self.sample_count = parse(v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
            "image_training" | "training" => {
                let t = if section == "training" {
                    &mut self.training
                } else {
                    &mut self.image_training
                };
                match field {
                    "steps" => t.steps = parse(v)?,
                    "batch_size" => t.batch_size = parse(v)?,
                    "image_batch" => t.image_batch = parse(v)?,
                    "lr" => t.optimizer.lr = parse_f64(v)?,
                    "beta1" => t.optimizer.beta1 = parse_f64(v)?,
                    "beta2" => t.optimizer.beta2 = parse_f64(v)?,
                    "eps" => t.optimizer.eps = parse_f64(v)?,
                    "weight_decay" => t.optimizer.weight_decay = parse_f64(v)?,
                    "ema_decay" => t.optimizer.ema_decay = parse_f64(v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
            "analysis" => {
                let a = &mut self.analysis;
                match field {
                    "bank_videos" => a.bank_videos = parse(v)?,
                    "bank_frames" => a.bank_frames = parse(v)?,
                    "invert_steps" => a.invert_steps = parse(v)?,
                    "n_generate" => a.n_generate = parse(v)?,
                    "repeats" => a.repeats = parse(v)?,
                    "alphas" => a.alphas = parse_list(v, parse_f64)?,
                    "kinds" => {
                        a.kinds =
                            parse_list(v, |k| NoiseKind::from_str(k).map_err(|e| e.to_string()))?
                    }
                    "mixed_alpha" => a.mixed_alpha = parse_f64(v)?,
                    "progressive_alpha" => a.progressive_alpha = parse_f64(v)?,
                    "held_out_videos" => a.held_out_videos = parse(v)?,
                    _ => return Err(format!("unknown key '{key}'")),
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses `text` on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key '{k}' given twice")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let mut m = self.model.clone();
        m.in_channels = self.dataset.channels;
        m.validate()?;
        let div = 1 << (m.levels - 1);
        if !self.dataset.height.is_multiple_of(div) || !self.dataset.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "resolution {}×{} not divisible by {div} for {} levels",
                self.dataset.height, self.dataset.width, m.levels
            )));
        }
        self.edm.validate()?;
        self.noise()?;
        self.sampler.validate()?;
        self.image_training.optimizer.validate()?;
        self.training.optimizer.validate()?;
        if self.analysis.repeats == 0 {
            return Err(Error::Config("analysis.repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> Result<NoiseSpec> {
        NoiseSpec::with_alpha(self.noise_kind, self.noise_alpha)
    }

    /// Image-model architecture: temporal layers disabled.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.dataset.channels,
            temporal_enabled: false,
            ..self.model.clone()
        }
    }

    pub fn held_out_spec(&self) -> DatasetSpec {
        self.dataset.held_out(self.analysis.held_out_videos)
    }

    pub fn experiment_settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            seed: self.seed,
            model: self.model_config(),
            edm: self.edm,
            sampler: self.sampler,
            video_training: self.training,
            n_generate: self.analysis.n_generate,
            use_ema: self.use_ema,
            repeats: self.analysis.repeats,
        }
    }

    pub fn inversion_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            kind: SamplerKind::Heun,
            steps: self.analysis.invert_steps,
            churn: 0.0,
            ..self.sampler
        }
    }

    /// SHA-256 of the serialized config without `output_dir`, as 16 hex digits.
    pub fn hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "output_dir")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let d = Sha256::digest(text.as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
