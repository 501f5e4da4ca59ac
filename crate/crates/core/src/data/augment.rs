use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::SliceSample;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Target sizes, read relative to `reference_size`: an image of side
    /// `n` is resized to `round(n * scale / reference_size)`.
    pub scales: Vec<usize>,
    pub reference_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, scales: vec![448, 512, 576], reference_size: 512 }
    }
}

/// Random flips and rescaling applied identically to every slice.
///
/// Draw order is horizontal flip, vertical flip, then scale, so the same
/// stream state always gives the same transform.
pub fn augment(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut Rng) -> SliceSample {
    let hflip = rng.gen_bool(cfg.flip_prob);
    let vflip = rng.gen_bool(cfg.flip_prob);
    let scale = if cfg.scales.is_empty() { cfg.reference_size } else { cfg.scales[rng.gen_range(0..cfg.scales.len())] };

    let mut out = sample.clone();
    if hflip {
        out = flip_horizontal(&out);
    }
    if vflip {
        out = flip_vertical(&out);
    }
    let rescale = |n: usize| ((n * scale) as f64 / cfg.reference_size as f64).round().max(1.0) as usize;
    let (h, w) = (rescale(out.height()), rescale(out.width()));
    resize_bilinear(&out, h, w)
}

fn remap(sample: &SliceSample, f: impl Fn(usize, usize, usize) -> usize) -> Tensor {
    let (d, h, w) = (sample.depth(), sample.height(), sample.width());
    let src = sample.window.data();
    Tensor::from_fn(&[d, h, w], |i| {
        let (k, y, x) = (i / (h * w), i / w % h, i % w);
        src[f(k, y, x)]
    })
}

pub fn flip_horizontal(sample: &SliceSample) -> SliceSample {
    let (h, w) = (sample.height(), sample.width());
    SliceSample {
        window: remap(sample, |k, y, x| (k * h + y) * w + (w - 1 - x)),
        center_index: sample.center_index,
        gt_boxes: sample.gt_boxes.iter().map(|b| b.flip_horizontal(w as f32)).collect(),
    }
}

pub fn flip_vertical(sample: &SliceSample) -> SliceSample {
    let (h, w) = (sample.height(), sample.width());
    SliceSample {
        window: remap(sample, |k, y, x| (k * h + (h - 1 - y)) * w + x),
        center_index: sample.center_index,
        gt_boxes: sample.gt_boxes.iter().map(|b| b.flip_vertical(h as f32)).collect(),
    }
}

/// Source taps and weights for one output axis, half-pixel-centre convention.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of every slice to `h × w`; boxes scale by the exact ratio.
pub fn resize_bilinear(sample: &SliceSample, h: usize, w: usize) -> SliceSample {
    let (d, h0, w0) = (sample.depth(), sample.height(), sample.width());
    if (h, w) == (h0, w0) {
        return sample.clone();
    }
    let (ty, tx) = (taps(h0, h), taps(w0, w));
    let src = sample.window.data();
    let mut out = Vec::with_capacity(d * h * w);
    for k in 0..d {
        let plane = &src[k * h0 * w0..(k + 1) * h0 * w0];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w0 + x0] + fx * (plane[y0 * w0 + x1] - plane[y0 * w0 + x0]);
                let bot = plane[y1 * w0 + x0] + fx * (plane[y1 * w0 + x1] - plane[y1 * w0 + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    let (sx, sy) = (w as f32 / w0 as f32, h as f32 / h0 as f32);
    SliceSample {
        window: Tensor::new(&[d, h, w], out).expect("resize extents"),
        center_index: sample.center_index,
        gt_boxes: sample.gt_boxes.iter().map(|b| b.scale(sx, sy).clip(w as f32, h as f32)).collect(),
    }
}

/// Zero-pad bottom and right so both sides are multiples of `m`.
pub fn pad_to_multiple(sample: &SliceSample, m: usize) -> SliceSample {
    let (d, h0, w0) = (sample.depth(), sample.height(), sample.width());
    let (h, w) = (h0.div_ceil(m) * m, w0.div_ceil(m) * m);
    if (h, w) == (h0, w0) {
        return sample.clone();
    }
    let src = sample.window.data();
    let window = Tensor::from_fn(&[d, h, w], |i| {
        let (k, y, x) = (i / (h * w), i / w % h, i % w);
        if y < h0 && x < w0 {
            src[(k * h0 + y) * w0 + x]
        } else {
            0.0
        }
    });
    SliceSample { window, ..sample.clone() }
}

