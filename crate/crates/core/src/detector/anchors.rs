use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// One anchor scale per pyramid level, each expanded over every ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Side of the ratio-1 anchor at each level, in pixels.
    pub scales: Vec<f32>,
    /// Height over width.
    pub aspect_ratios: Vec<f32>,
    pub strides: Vec<usize>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            strides: vec![4, 8, 16, 32, 64],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides != [4, 8, 16, 32, 64] {
            return Err(Error::Config(format!(
                "anchor strides must be the pyramid strides [4, 8, 16, 32, 64], got {:?}",
                self.strides
            )));
        }
        if self.scales.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} anchor scales for {} pyramid levels",
                self.scales.len(),
                self.strides.len()
            )));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().chain(&self.scales).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.aspect_ratios.len()
    }

    pub fn coarsest_stride(&self) -> usize {
        self.strides.iter().copied().max().unwrap_or(1)
    }

    /// Anchor centres sit on feature-cell centres; order is `(y, x, ratio)`
    /// within each level.
    pub fn generate(&self, height: usize, width: usize) -> Result<Vec<Vec<BBox>>> {
        let coarse = self.coarsest_stride();
        if height % coarse != 0 || width % coarse != 0 {
            return Err(Error::Divisibility { what: "image size".into(), value: height.max(width), divisor: coarse });
        }
        let shapes: Vec<(f32, f32)> = self
            .aspect_ratios
            .iter()
            .map(|&r| (r.recip().sqrt(), r.sqrt()))
            .collect();
        Ok(self
            .strides
            .iter()
            .zip(&self.scales)
            .map(|(&stride, &scale)| {
                let (fh, fw) = (height / stride, width / stride);
                let s = stride as f32;
                let mut level = Vec::with_capacity(fh * fw * shapes.len());
                for y in 0..fh {
                    for x in 0..fw {
                        let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                        for &(wf, hf) in &shapes {
                            level.push(BBox::from_center(cx, cy, scale * wf, scale * hf));
                        }
                    }
                }
                level
            })
            .collect())
    }

    pub fn generate_flat(&self, height: usize, width: usize) -> Result<Vec<BBox>> {
        Ok(self.generate(height, width)?.into_iter().flatten().collect())
    }
}
