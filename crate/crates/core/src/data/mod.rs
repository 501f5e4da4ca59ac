//! CT-style preprocessing, augmentation and a synthetic lesion dataset.
//!
//! Volumes are `[S, H, W]` stacks of axial slices. Raw intensities are in
//! Hounsfield units; [`clip_hu`] clamps them to the soft-tissue window and maps
//! that window affinely onto `[0, 1]`. A [`Units`] tag on the volume records
//! which of the two scales the data is on, so preprocessing steps can be
//! applied more than once without drifting.

mod augment;
mod io;
mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical, pad_to_multiple, resize_bilinear, AugmentConfig};
pub(crate) use io::csv_error as io_csv_error;
pub use io::{read_dataset, read_gt_csv, read_volume, write_dataset, write_gt_csv, write_volume, GtRow, Sidecar};
pub use synth::{generate_rgb, generate_synthetic, RgbSample, SeparabilityStats, SyntheticConfig, SyntheticDataset};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 1050.0;
pub const TARGET_SPACING_MM: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Hu,
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[S, H, W]`.
    pub data: Tensor,
    pub z_spacing_mm: f64,
    pub xy_spacing_mm: f64,
    pub units: Units,
}

impl Volume {
    pub fn new(data: Tensor, z_spacing_mm: f64, xy_spacing_mm: f64, units: Units) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!("volume must be [S, H, W], got {:?}", data.shape())));
        }
        if !(z_spacing_mm > 0.0 && xy_spacing_mm > 0.0) {
            return Err(Error::Config(format!("voxel spacing must be positive, got z={z_spacing_mm} xy={xy_spacing_mm}")));
        }
        Ok(Self { data, z_spacing_mm, xy_spacing_mm, units })
    }

    pub fn slices(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn slice(&self, k: usize) -> &[f32] {
        let plane = self.height() * self.width();
        &self.data.data()[k * plane..(k + 1) * plane]
    }
}

/// Clamp to `[HU_MIN, HU_MAX]` and map onto `[0, 1]`.
pub fn normalize_hu(v: f32) -> f32 {
    (v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// HU volume to the normalised scale. Volumes already normalised pass
/// through unchanged.
pub fn clip_hu(v: &Volume) -> Volume {
    match v.units {
        Units::Normalized => v.clone(),
        Units::Hu => Volume { data: v.data.map(normalize_hu), units: Units::Normalized, ..v.clone() },
    }
}

/// Source position (in input slice units) of every output slice.
fn resample_positions(slices: usize, spacing: f64, target_mm: f64) -> Vec<f64> {
    let extent = (slices - 1) as f64 * spacing;
    let count = (extent / target_mm + 1e-9).floor() as usize + 1;
    (0..count).map(|k| k as f64 * target_mm / spacing).collect()
}

/// Linear interpolation along z onto a `target_mm` grid anchored at slice 0.
pub fn resample_z(v: &Volume, target_mm: f64) -> Volume {
    let s = v.slices();
    if (v.z_spacing_mm - target_mm).abs() < 1e-9 {
        return v.clone();
    }
    if s == 1 {
        log::warn!("single-slice volume with spacing {} mm left unresampled", v.z_spacing_mm);
        return v.clone();
    }
    let plane = v.height() * v.width();
    let positions = resample_positions(s, v.z_spacing_mm, target_mm);
    let mut out = Vec::with_capacity(positions.len() * plane);
    for &p in &positions {
        let lo = (p + 1e-9).floor() as usize;
        let frac = (p - lo as f64) as f32;
        if lo + 1 >= s || frac.abs() < 1e-6 {
            out.extend_from_slice(v.slice(lo.min(s - 1)));
        } else {
            let (a, b) = (v.slice(lo), v.slice(lo + 1));
            out.extend(a.iter().zip(b).map(|(&a, &b)| a + frac * (b - a)));
        }
    }
    let data = Tensor::new(&[positions.len(), v.height(), v.width()], out).expect("resampled extents");
    Volume { data, z_spacing_mm: target_mm, ..v.clone() }
}

/// A `[D, H, W]` window around one slice, normalised to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub window: Tensor,
    pub center_index: usize,
    pub gt_boxes: Vec<BBox>,
}

impl SliceSample {
    pub fn depth(&self) -> usize {
        self.window.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.window.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.window.shape()[2]
    }
}

/// Slices `center - (d-1)/2 ..= center + (d-1)/2`, replicating the first and
/// last slice past the volume ends.
pub fn extract_window(v: &Volume, center: usize, d: usize) -> Result<SliceSample> {
    if d % 2 == 0 {
        return Err(Error::Config(format!("window depth must be odd, got {d}")));
    }
    let s = v.slices();
    if center >= s {
        return Err(Error::OutOfRange { what: "volume slices", index: center, len: s });
    }
    let half = (d / 2) as isize;
    let mut out = Vec::with_capacity(d * v.height() * v.width());
    for k in -half..=half {
        let idx = (center as isize + k).clamp(0, s as isize - 1) as usize;
        match v.units {
            Units::Normalized => out.extend_from_slice(v.slice(idx)),
            Units::Hu => out.extend(v.slice(idx).iter().map(|&x| normalize_hu(x))),
        }
    }
    let window = Tensor::new(&[d, v.height(), v.width()], out)?;
    Ok(SliceSample { window, center_index: center, gt_boxes: Vec::new() })
}

/// A volume with per-slice ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    pub volume: Volume,
    pub boxes: BTreeMap<usize, Vec<BBox>>,
    /// Slices that carry a lesion centre; these are the training and
    /// evaluation targets.
    pub key_slices: Vec<usize>,
}

impl LabeledVolume {
    pub fn boxes_on(&self, slice: usize) -> &[BBox] {
        self.boxes.get(&slice).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Window around `center` with the centre slice's boxes attached.
    pub fn sample(&self, center: usize, d: usize) -> Result<SliceSample> {
        let mut s = extract_window(&self.volume, center, d)?;
        s.gt_boxes = self.boxes_on(center).to_vec();
        Ok(s)
    }

    /// Evaluation id of one slice, `"{volume}:{slice}"`.
    pub fn image_id(&self, slice: usize) -> String {
        format!("{}:{}", self.id, slice)
    }

    /// [`resample_z`] with labels. Each output slice takes the boxes of the
    /// nearest input slice.
    pub fn resample_z(&self, target_mm: f64) -> Self {
        let volume = resample_z(&self.volume, target_mm);
        if volume.slices() == self.volume.slices() {
            return Self { volume, ..self.clone() };
        }
        let step = target_mm / self.volume.z_spacing_mm;
        let boxes = (0..volume.slices())
            .filter_map(|k| {
                let src = (k as f64 * step).round() as usize;
                self.boxes.get(&src).map(|b| (k, b.clone()))
            })
            .collect();
        let last = volume.slices() - 1;
        let mut key_slices: Vec<usize> =
            self.key_slices.iter().map(|&k| ((k as f64 / step).round() as usize).min(last)).collect();
        key_slices.dedup();
        Self { id: self.id.clone(), volume, boxes, key_slices }
    }
}
