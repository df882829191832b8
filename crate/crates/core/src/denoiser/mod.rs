//! The trainable denoiser `F_θ`: a two-level U-Net over `b × n_s × c × h × w`
//! videos whose 1×3×3 spatial layers are shared with the image model and
//! whose temporal layers (3×1×1 convolutions, frame attention) start as the
//! identity.

mod checkpoint;
pub mod layers;
mod model;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{
    is_temporal_name, DenoiserModel, ForwardCache, ModelConfig, ParamLayout, ParamView,
};
pub use optim::{AdamW, OptimizerConfig, OptimizerState, ParamGroups};

use crate::error::{bail, Result};
use crate::ndcore::RngStream;
use crate::scalar::Scalar;

/// Video model whose spatial parameters come from `image` and whose temporal
/// parameters are freshly initialized, so its first forward pass equals
/// per-frame application of `image`.
pub fn init_from_image_model<T: Scalar>(
    image: &DenoiserModel<T>,
    rng: &mut RngStream,
) -> Result<DenoiserModel<T>> {
    if image.temporal_enabled() {
        bail!(
            Config,
            "source model has temporal layers enabled; expected an image model"
        );
    }
    let mut video = image.clone();
    video.set_temporal_enabled(true);
    video.reset_temporal(rng);
    video.set_steps_trained(0);
    Ok(video)
}
