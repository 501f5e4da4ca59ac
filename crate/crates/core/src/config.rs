//! The JSON experiment document shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Variant};
use crate::data::SyntheticConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::Architecture;
use crate::profiler::MacConvention;
use crate::train::TrainConfig;

/// Which architectures `profile` measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfilePreset {
    /// Full-width backbones with a 256-channel pyramid.
    Standard,
    /// The `backbone` and `detector` sections of this document.
    Config,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub preset: ProfilePreset,
    pub variants: Vec<Variant>,
    pub slices: Vec<usize>,
    /// Square input side in pixels.
    pub resolution: usize,
    pub convention: MacConvention,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            preset: ProfilePreset::Standard,
            variants: vec![Variant::Mp3d63, Variant::Mr3d50],
            slices: vec![5, 7, 9, 11],
            resolution: 512,
            convention: MacConvention::One,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub profile: ProfileConfig,
}

impl ExperimentConfig {
    /// Parses and validates a document. Errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.detector.validate()?;
        self.train.validate()?;
        if self.eval.fp_rates.iter().any(|r| !(*r > 0.0)) || !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return Err(Error::Config("eval needs positive fp_rates and iou_thresh in [0, 1]".into()));
        }
        if self.profile.slices.is_empty() || self.profile.resolution == 0 {
            return Err(Error::Config("profile needs slice counts and a positive resolution".into()));
        }
        Ok(())
    }

    /// Architectures measured by `profile`, labelled by variant.
    pub fn profile_architectures(&self) -> Result<Vec<(String, Architecture)>> {
        let p = &self.profile;
        p.variants
            .iter()
            .map(|&variant| {
                let (backbone, detector) = match p.preset {
                    ProfilePreset::Standard => {
                        let b = BackboneConfig { variant, input_slices: p.slices[0], ..BackboneConfig::default() };
                        (b, DetectorConfig::default())
                    }
                    ProfilePreset::Config => {
                        let b = BackboneConfig { variant, input_slices: p.slices[0], ..self.backbone.clone() };
                        (b, self.detector.clone())
                    }
                };
                let name = serde_json::to_value(variant)?.as_str().unwrap_or_default().to_string();
                Ok((name, Architecture::Detector(crate::detector::Detector::new(backbone, detector)?)))
            })
            .collect()
    }
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_takes_every_default() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.decay_points(), vec![13, 18]);
        assert_eq!(cfg.data.volumes, 200);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_json("{\n  \"train\": {\n    \"lrr\": 0.1\n  }\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lrr") && msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn semantic_errors_surface() {
        assert!(ExperimentConfig::from_json(r#"{"backbone": {"input_slices": 4}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
    }

    #[test]
    fn round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn hashing_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn standard_profile_presets() {
        let archs = ExperimentConfig::default().profile_architectures().unwrap();
        assert_eq!(archs.iter().map(|a| a.0.as_str()).collect::<Vec<_>>(), vec!["MP3D63", "MR3D50"]);
    }
}
