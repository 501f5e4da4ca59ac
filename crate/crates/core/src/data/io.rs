//! On-disk dataset layout: `<id>.f32` holds raw little-endian floats in
//! `[S, H, W]` order, `<id>.json` the metadata and per-slice boxes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledVolume, Units, Volume};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: [usize; 3],
    pub z_spacing_mm: f64,
    #[serde(default = "default_xy_spacing")]
    pub xy_spacing_mm: f64,
    #[serde(default = "default_units")]
    pub units: Units,
    pub boxes: BTreeMap<usize, Vec<BBox>>,
    #[serde(default)]
    pub key_slices: Vec<usize>,
}

fn default_xy_spacing() -> f64 {
    1.0
}

fn default_units() -> Units {
    Units::Hu
}

pub fn write_volume(dir: &Path, v: &LabeledVolume) -> Result<()> {
    let raw = dir.join(format!("{}.f32", v.id));
    let bytes: Vec<u8> = v.volume.data.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let sidecar = Sidecar {
        shape: [v.volume.slices(), v.volume.height(), v.volume.width()],
        z_spacing_mm: v.volume.z_spacing_mm,
        xy_spacing_mm: v.volume.xy_spacing_mm,
        units: v.volume.units,
        boxes: v.boxes.clone(),
        key_slices: v.key_slices.clone(),
    };
    let json = dir.join(format!("{}.json", v.id));
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
}

pub fn read_volume(dir: &Path, id: &str) -> Result<LabeledVolume> {
    let json = dir.join(format!("{id}.json"));
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text)?;
    let raw = dir.join(format!("{id}.f32"));
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = sidecar.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes but shape {:?} needs {expected}",
            raw.display(),
            bytes.len(),
            sidecar.shape
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let volume = Volume::new(Tensor::new(&sidecar.shape, data)?, sidecar.z_spacing_mm, sidecar.xy_spacing_mm, sidecar.units)?;
    Ok(LabeledVolume { id: id.to_string(), volume, boxes: sidecar.boxes, key_slices: sidecar.key_slices })
}

/// Writes every volume plus `gt.csv`.
pub fn write_dataset(dir: &Path, volumes: &[LabeledVolume]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in volumes {
        write_volume(dir, v)?;
    }
    write_gt_csv(&dir.join("gt.csv"), volumes)
}

/// Reads every `<id>.json` with a matching `<id>.f32`, sorted by id.
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledVolume>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let stem = path.file_stem()?.to_str()?.to_string();
            (path.extension()? == "json" && dir.join(format!("{stem}.f32")).is_file()).then_some(stem)
        })
        .collect();
    ids.sort();
    ids.iter().map(|id| read_volume(dir, id)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRow {
    pub image_id: String,
    pub slice: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl GtRow {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

/// Ground truth of every key slice, one row per box.
pub fn write_gt_csv(path: &Path, volumes: &[LabeledVolume]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image_id", "slice", "x1", "y1", "x2", "y2"]).map_err(|e| csv_error(path, e))?;
    for v in volumes {
        for &k in &v.key_slices {
            for b in v.boxes_on(k) {
                let row = GtRow { image_id: v.id.clone(), slice: k, x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 };
                w.serialize(row).map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::Csv { path: PathBuf::from(path), line, msg },
    }
}
