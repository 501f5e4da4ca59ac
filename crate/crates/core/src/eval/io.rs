use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::Prediction;
use crate::boxes::BBox;
use crate::data::io_csv_error as csv_error;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Row {
    image_id: String,
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
    score: f32,
}

/// `image_id,x1,y1,x2,y2,score`, four decimals.
pub fn write_predictions_csv(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::from("image_id,x1,y1,x2,y2,score\n");
    for p in preds {
        let b = p.bbox;
        out.push_str(&format!("{},{:.4},{:.4},{:.4},{:.4},{:.4}\n", p.image_id, b.x1, b.y1, b.x2, b.y2, p.score));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok(Prediction { image_id: row.image_id, bbox: BBox::new(row.x1, row.y1, row.x2, row.y2), score: row.score })
        })
        .collect()
}
