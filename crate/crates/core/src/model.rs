//! A built architecture together with its parameter values.

use crate::backbone::{Backbone, BackboneConfig};
use crate::detector::{Detector, DetectorConfig};
use crate::error::Result;
use crate::graph::{ParamSpec, ShapeTracer};
use crate::params::ParamStore;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Backbone(Backbone),
    Detector(Detector),
}

impl Architecture {
    pub fn backbone(&self) -> &Backbone {
        match self {
            Architecture::Backbone(b) => b,
            Architecture::Detector(d) => &d.backbone,
        }
    }

    pub fn input_slices(&self) -> usize {
        self.backbone().config.input_slices
    }

    /// Layer trace for a single `[1, 1, D, H, W]` window.
    pub fn trace(&self, height: usize, width: usize) -> Result<ShapeTracer> {
        match self {
            Architecture::Backbone(b) => b.trace(height, width),
            Architecture::Detector(d) => d.trace(height, width),
        }
    }

    /// The same architecture rebuilt for windows of `slices` slices.
    pub fn with_input_slices(&self, slices: usize) -> Result<Self> {
        Ok(match self {
            Architecture::Backbone(b) => {
                let config = BackboneConfig { input_slices: slices, ..b.config.clone() };
                Architecture::Backbone(Backbone::new(config)?)
            }
            Architecture::Detector(d) => {
                let config = BackboneConfig { input_slices: slices, ..d.backbone.config.clone() };
                Architecture::Detector(Detector::new(config, d.config.clone())?)
            }
        })
    }

    /// Every parameter in first-use order. None depends on the input size.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        Ok(self.trace(64, 64)?.param_specs())
    }
}

/// Layer structure plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl ModelGraph {
    /// Draws fresh parameters from the `init` stream of `seed`.
    pub fn initialize(arch: Architecture, seed: u64) -> Result<Self> {
        let params = ParamStore::initialize(&arch.param_specs()?, &mut stream(seed, "init"));
        Ok(Self { arch, params })
    }

    pub fn detector(&self) -> Option<&Detector> {
        match &self.arch {
            Architecture::Detector(d) => Some(d),
            Architecture::Backbone(_) => None,
        }
    }
}

pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<ModelGraph> {
    ModelGraph::initialize(Architecture::Backbone(Backbone::new(config)?), seed)
}

pub fn build_detector(backbone: BackboneConfig, detector: DetectorConfig, seed: u64) -> Result<ModelGraph> {
    ModelGraph::initialize(Architecture::Detector(Detector::new(backbone, detector)?), seed)
}
