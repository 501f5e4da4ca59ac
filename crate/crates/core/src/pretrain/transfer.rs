use super::weights::{load_weights, LoadReport, WeightStore};
use crate::backbone::PoolingPolicy;
use crate::error::{Error, Result};
use crate::model::ModelGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Every parameter, strictly.
    #[default]
    Full,
    /// Only `backbone.*` entries, non-strict; neck and head keep their init.
    Backbone,
}

/// Initialises `model` (any odd slice count) from a store trained at
/// another slice count.
///
/// The store must come from an anisotropic-pooling model: an isotropic
/// stack has the same parameter shapes but collapses depth early, so its
/// weights never learned to use more than a few slices.
pub fn transfer_depth(store: &WeightStore, mut model: ModelGraph, mode: TransferMode) -> Result<(ModelGraph, LoadReport)> {
    let meta = store
        .meta
        .ok_or_else(|| Error::Transfer("the weight file carries no pooling-policy metadata".into()))?;
    if meta.pooling_policy == PoolingPolicy::Isotropic {
        return Err(Error::Transfer(format!(
            "weights come from an isotropic-pooling model trained on {} slices; its depth axis collapses after \
             the early downsampling layers, so the weights do not transfer to other slice counts",
            meta.training_slices
        )));
    }
    let source = model.arch.with_input_slices(meta.training_slices)?;
    if source.param_specs()? != model.arch.param_specs()? {
        return Err(Error::Transfer(format!(
            "parameter shapes differ between {} and {} slices",
            meta.training_slices,
            model.arch.input_slices()
        )));
    }
    let report = match mode {
        TransferMode::Full => load_weights(&mut model, store, true)?,
        TransferMode::Backbone => load_weights(&mut model, &store.filter_prefix("backbone."), false)?,
    };
    Ok((model, report))
}
