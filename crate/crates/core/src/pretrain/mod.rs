//! RGB-as-slices pretraining, weight files and depth transfer.

mod simulate;
mod transfer;
mod weights;

pub use simulate::simulate_pretraining;
pub use transfer::{transfer_depth, TransferMode};
pub use weights::{load_weights, LoadReport, StoreMeta, WeightStore, MAGIC, META_PREFIX, VERSION};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a `[3, H, W]` image as a one-channel, three-slice volume
/// `[1, 3, H, W]`; values are untouched.
pub fn rgb_to_volume(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        &[3, h, w] => image.reshape(&[1, 3, h, w]),
        s => Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// Inverse of [`rgb_to_volume`].
pub fn volume_to_rgb(volume: &Tensor) -> Result<Tensor> {
    match volume.shape() {
        &[1, 3, h, w] => volume.reshape(&[3, h, w]),
        s => Err(Error::Shape(format!("expected a [1, 3, H, W] volume, got {s:?}"))),
    }
}
