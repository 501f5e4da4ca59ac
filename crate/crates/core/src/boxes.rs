//! Axis-aligned boxes in pixel coordinates.

use serde::{Deserialize, Serialize};

/// `(x1, y1, x2, y2)` with continuous extents: width is `x2 - x1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        (self.width().max(0.0) as f64) * (self.height().max(0.0) as f64)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f32, sy: f32) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Mirror across the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f32) -> Self {
        Self::new(width - self.x2, self.y1, width - self.x1, self.y2)
    }

    pub fn flip_vertical(&self, height: f32) -> Self {
        Self::new(self.x1, height - self.y2, self.x2, height - self.y1)
    }
}

/// Intersection over union, computed in `f64`. Zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 5.0, 15.0, 15.0)) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&BBox::new(1.0, 1.0, 1.0, 5.0), &BBox::new(1.0, 1.0, 1.0, 5.0)), 0.0);
    }

    #[test]
    fn flips_are_involutions() {
        let b = BBox::new(10.0, 20.0, 30.0, 40.0);
        assert_eq!(b.flip_horizontal(512.0).flip_horizontal(512.0), b);
        assert_eq!(b.flip_vertical(512.0).flip_vertical(512.0), b);
    }

    #[test]
    fn serialises_as_array() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
        assert_eq!(serde_json::from_str::<BBox>("[1,2,3,4]").unwrap(), b);
    }
}
