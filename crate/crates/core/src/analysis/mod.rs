//! Evidence experiments: inverted-noise statistics, a 2-D embedding export,
//! a Fréchet metric over hand-crafted video features, and the finetuning
//! comparisons.

mod bank;
pub mod csv;
pub mod experiment;
pub mod metric;

pub use bank::{
    build_noise_bank, build_noise_bank_with, cosine_stats, pca_embed_2d, CosineStats,
    EmbeddedPoint, NoiseBank, NoiseEntry,
};
pub use experiment::{
    generate_videos, param_hash, run_alpha_sweep, run_cell, run_cells, run_strategy_comparison,
    Cell, CellResult, ExperimentContext, ExperimentSettings, Init, SweepRow,
};
pub use metric::{
    frame_features, frame_stats, frechet_distance, frechet_video_metric, video_features,
    video_stats, VideoStats,
};
