use super::{rgb_to_volume, WeightStore};
use crate::data::{RgbSample, SliceSample};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::train::{train, LossRecord, TrainConfig, TrainOutcome};

/// Pre-trains a three-slice detector on colour images, each decomposed into
/// three slices. Returns the final weights and the training record.
pub fn simulate_pretraining(
    images: &[RgbSample],
    model: ModelGraph,
    cfg: &TrainConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<(WeightStore, TrainOutcome)> {
    if model.arch.input_slices() != 3 {
        return Err(Error::Config(format!(
            "pre-training decomposes colour channels into 3 slices, but the model takes {}",
            model.arch.input_slices()
        )));
    }
    let samples = images
        .iter()
        .map(|img| {
            let v = rgb_to_volume(&img.image)?;
            let s = v.shape();
            Ok(SliceSample { window: v.reshape(&s[1..])?, center_index: 1, gt_boxes: img.boxes.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = train(model, &samples, cfg, on_step)?;
    Ok((WeightStore::from_model(&outcome.model), outcome))
}
