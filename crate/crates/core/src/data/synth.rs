//! Synthetic CT volumes where a single slice is not enough to tell lesions
//! from look-alikes.
//!
//! Lesions are ellipsoids spanning several slices. Confusers are rendered
//! from the same distribution as a lesion's centre slice but exist on one
//! slice only, so their neighbours are plain background.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalize_hu, LabeledVolume, Units, Volume};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

/// Sub-samples per slice used to integrate an ellipsoid across the slab.
const Z_SUBSAMPLES: usize = 4;
/// Cross-sections thinner than this are left unlabelled.
const MIN_BOX_SIDE: f32 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum objects of each kind before the separability check is enforced.
const MIN_OBJECTS_FOR_STATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub volumes: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub z_spacing_mm: f64,
    pub xy_spacing_mm: f64,
    /// Inclusive `[min, max]` ranges.
    pub lesions: [usize; 2],
    pub semi_axis_xy: [f32; 2],
    /// In slices; the minimum must be at least 1.5.
    pub semi_axis_z: [f32; 2],
    pub confusers: [usize; 2],
    pub contrast_hu: [f32; 2],
    pub background_hu: f32,
    pub noise_sigma_hu: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            volumes: 200,
            height: 64,
            width: 64,
            slices: 24,
            z_spacing_mm: 2.5,
            xy_spacing_mm: 0.8,
            lesions: [1, 2],
            semi_axis_xy: [5.0, 10.0],
            semi_axis_z: [1.5, 3.0],
            confusers: [1, 2],
            contrast_hu: [150.0, 300.0],
            background_hu: 40.0,
            noise_sigma_hu: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.slices == 0 {
            return bad(format!("empty volume extents {}x{}x{}", self.slices, self.height, self.width));
        }
        if !(self.z_spacing_mm > 0.0 && self.xy_spacing_mm > 0.0) {
            return bad("voxel spacing must be positive".into());
        }
        if self.lesions[0] > self.lesions[1] || self.confusers[0] > self.confusers[1] {
            return bad("count ranges must satisfy min <= max".into());
        }
        for (name, [lo, hi]) in [
            ("semi_axis_xy", self.semi_axis_xy),
            ("semi_axis_z", self.semi_axis_z),
            ("contrast_hu", self.contrast_hu),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.semi_axis_xy[0] <= 0.0 {
            return bad("semi_axis_xy must be positive".into());
        }
        if self.semi_axis_z[0] < 1.5 {
            return bad(format!("semi_axis_z minimum {} is below 1.5 slices", self.semi_axis_z[0]));
        }
        if !(self.noise_sigma_hu >= 0.0) {
            return bad("noise_sigma_hu must be non-negative".into());
        }
        Ok(())
    }

    fn check_fits(&self, objects: usize) -> Result<()> {
        let side = 2.0 * self.semi_axis_xy[1] + 2.0;
        if side > self.height.min(self.width) as f32 {
            return Err(Error::Generation(format!(
                "semi-axis {} px does not fit a {}x{} image",
                self.semi_axis_xy[1], self.height, self.width
            )));
        }
        if objects > 0 && 2 * self.semi_axis_z[1].ceil() as usize + 1 > self.slices {
            return Err(Error::Generation(format!(
                "z semi-axis {} slices does not fit {} slices",
                self.semi_axis_z[1], self.slices
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    cz: usize,
    a: f32,
    b: f32,
    c: f32,
    contrast: f32,
}

impl Blob {
    fn draw(cfg: &SyntheticConfig, rng: &mut Rng, cz: usize) -> Self {
        let u = |rng: &mut Rng, [lo, hi]: [f32; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let a = u(rng, cfg.semi_axis_xy);
        let b = u(rng, cfg.semi_axis_xy);
        let c = u(rng, cfg.semi_axis_z);
        let contrast = u(rng, cfg.contrast_hu);
        let cx = rng.gen_range(a + 1.0..=cfg.width as f32 - a - 1.0);
        let cy = rng.gen_range(b + 1.0..=cfg.height as f32 - b - 1.0);
        Self { cx, cy, cz, a, b, c, contrast }
    }

    fn footprint(&self) -> BBox {
        BBox::new(self.cx - self.a, self.cy - self.b, self.cx + self.a, self.cy + self.b)
    }

    /// Slices `cz ± reach` touched by the ellipsoid.
    fn reach(&self) -> usize {
        (self.c + 0.5).ceil() as usize - 1
    }

    /// Tight box of the cross-section over slice `s`'s slab.
    fn box_on(&self, s: usize) -> Option<BBox> {
        let dz = ((s as f32 - self.cz as f32).abs() - 0.5).max(0.0);
        if dz >= self.c {
            return None;
        }
        let k = (1.0 - (dz / self.c).powi(2)).sqrt();
        let bbox = BBox::new(self.cx - self.a * k, self.cy - self.b * k, self.cx + self.a * k, self.cy + self.b * k);
        (bbox.width().min(bbox.height()) >= MIN_BOX_SIDE).then_some(bbox)
    }

    /// Slab-averaged profile at pixel `(x, y)` of slice offset `dz`.
    fn intensity(&self, x: usize, y: usize, dz: f32) -> f32 {
        let rx = (x as f32 + 0.5 - self.cx) / self.a;
        let ry = (y as f32 + 0.5 - self.cy) / self.b;
        let rxy = rx * rx + ry * ry;
        if rxy >= 1.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for j in 0..Z_SUBSAMPLES {
            let z = (dz + (j as f32 + 0.5) / Z_SUBSAMPLES as f32 - 0.5) / self.c;
            let r2 = rxy + z * z;
            if r2 < 1.0 {
                acc += 1.0 - r2 * r2;
            }
        }
        self.contrast * acc / Z_SUBSAMPLES as f32
    }

    /// Adds this blob's slice at offset `dz` into `plane`.
    fn render(&self, plane: &mut [f32], w: usize, h: usize, dz: f32) {
        let x0 = (self.cx - self.a).floor().max(0.0) as usize;
        let y0 = (self.cy - self.b).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.a).ceil() as usize).min(w);
        let y1 = ((self.cy + self.b).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                plane[y * w + x] += self.intensity(x, y, dz);
            }
        }
    }
}

fn disjoint(a: &BBox, b: &BBox, margin: f32) -> bool {
    a.x2 + margin <= b.x1 || b.x2 + margin <= a.x1 || a.y2 + margin <= b.y1 || b.y2 + margin <= a.y1
}

/// Per-object summaries collected while rendering.
#[derive(Default)]
struct Observed {
    lesion_center: Vec<f32>,
    confuser_center: Vec<f32>,
    lesion_neighbor: Vec<f64>,
    confuser_neighbor: Vec<f64>,
}

/// Evidence that a single slice cannot separate lesions from confusers
/// while the neighbouring slices can.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityStats {
    pub lesions: usize,
    pub confusers: usize,
    /// Histogram overlap of centre-slice intensities inside the objects.
    pub center_overlap: Option<f64>,
    /// Mean contrast over background, in HU, on the slices adjacent to the
    /// object's centre slice.
    pub lesion_neighbor_contrast: Option<f64>,
    pub confuser_neighbor_contrast: Option<f64>,
}

impl SeparabilityStats {
    fn check(&self, cfg: &SyntheticConfig) -> Result<()> {
        if self.lesions < MIN_OBJECTS_FOR_STATS || self.confusers < MIN_OBJECTS_FOR_STATS {
            return Ok(());
        }
        let overlap = self.center_overlap.unwrap_or(0.0);
        if overlap < 0.5 {
            return Err(Error::Generation(format!("centre-slice intensity overlap {overlap:.3} is below 0.5")));
        }
        let gap = self.lesion_neighbor_contrast.unwrap_or(0.0) - self.confuser_neighbor_contrast.unwrap_or(0.0);
        let need = 0.25 * cfg.contrast_hu[0] as f64;
        if gap < need {
            return Err(Error::Generation(format!(
                "neighbouring-slice contrast gap {gap:.1} HU is below {need:.1} HU"
            )));
        }
        Ok(())
    }
}

/// Histogram overlap coefficient of two samples over their joint range.
pub(crate) fn overlap_coefficient(a: &[f32], b: &[f32], bins: usize) -> f64 {
    let (lo, hi) = a.iter().chain(b).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return 1.0;
    }
    let hist = |xs: &[f32]| {
        let mut h = vec![0.0f64; bins];
        for &v in xs {
            let i = (((v - lo) / (hi - lo)) * bins as f32) as usize;
            h[i.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(p, q)| p.min(*q)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub volumes: Vec<LabeledVolume>,
    pub stats: SeparabilityStats,
}

/// Generates `config.volumes` labelled HU volumes. Each volume draws from
/// its own named random stream, so volumes are produced in parallel and the
/// result is independent of the thread count.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    config.check_fits(config.lesions[1] + config.confusers[1])?;
    let parts: Vec<(LabeledVolume, Observed)> =
        (0..config.volumes).into_par_iter().map(|i| generate_volume(config, i)).collect::<Result<_>>()?;

    let mut all = Observed::default();
    let mut volumes = Vec::with_capacity(parts.len());
    for (v, o) in parts {
        all.lesion_center.extend(o.lesion_center);
        all.confuser_center.extend(o.confuser_center);
        all.lesion_neighbor.extend(o.lesion_neighbor);
        all.confuser_neighbor.extend(o.confuser_neighbor);
        volumes.push(v);
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let stats = SeparabilityStats {
        lesions: all.lesion_neighbor.len(),
        confusers: all.confuser_neighbor.len(),
        center_overlap: (!all.lesion_center.is_empty() && !all.confuser_center.is_empty())
            .then(|| overlap_coefficient(&all.lesion_center, &all.confuser_center, 32)),
        lesion_neighbor_contrast: mean(&all.lesion_neighbor),
        confuser_neighbor_contrast: mean(&all.confuser_neighbor),
    };
    stats.check(config)?;
    Ok(SyntheticDataset { volumes, stats })
}

fn place(cfg: &SyntheticConfig, rng: &mut Rng, cz: impl Fn(&mut Rng) -> usize, ok: impl Fn(&Blob) -> bool) -> Result<Blob> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let z = cz(rng);
        let blob = Blob::draw(cfg, rng, z);
        if ok(&blob) {
            return Ok(blob);
        }
    }
    Err(Error::Generation(format!(
        "could not place an object without overlap after {PLACEMENT_ATTEMPTS} attempts; \
         reduce object counts or sizes for a {}x{}x{} volume",
        cfg.slices, cfg.height, cfg.width
    )))
}

fn generate_volume(cfg: &SyntheticConfig, index: usize) -> Result<(LabeledVolume, Observed)> {
    let mut rng = stream(cfg.seed, &format!("synth/{index}"));
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let n_lesions = rng.gen_range(cfg.lesions[0]..=cfg.lesions[1]);
    let n_confusers = rng.gen_range(cfg.confusers[0]..=cfg.confusers[1]);

    let zmargin = cfg.semi_axis_z[1].ceil() as usize;
    let mut lesions: Vec<Blob> = Vec::new();
    for _ in 0..n_lesions {
        let blob = place(
            cfg,
            &mut rng,
            |r| r.gen_range(zmargin..s - zmargin),
            |b| {
                lesions.iter().all(|o| {
                    disjoint(&b.footprint(), &o.footprint(), 2.0) || b.cz.abs_diff(o.cz) > b.reach() + o.reach() + 1
                })
            },
        )?;
        lesions.push(blob);
    }
    let mut key_slices: Vec<usize> = lesions.iter().map(|b| b.cz).collect();
    key_slices.sort_unstable();
    key_slices.dedup();

    let mut confusers: Vec<Blob> = Vec::new();
    for _ in 0..n_confusers {
        let keys = key_slices.clone();
        let blob = place(
            cfg,
            &mut rng,
            |r| if keys.is_empty() { r.gen_range(0..s) } else { keys[r.gen_range(0..keys.len())] },
            |b| {
                let clear_of = |o: &Blob, reach: usize| {
                    disjoint(&b.footprint(), &o.footprint(), 2.0) || b.cz.abs_diff(o.cz) > reach + 1
                };
                lesions.iter().all(|o| clear_of(o, o.reach())) && confusers.iter().all(|o| clear_of(o, 0))
            },
        )?;
        confusers.push(blob);
    }

    let plane = h * w;
    let mut data = vec![cfg.background_hu; s * plane];
    for blob in &lesions {
        let r = blob.reach();
        for z in blob.cz.saturating_sub(r)..=(blob.cz + r).min(s - 1) {
            blob.render(&mut data[z * plane..(z + 1) * plane], w, h, z as f32 - blob.cz as f32);
        }
    }
    for blob in &confusers {
        blob.render(&mut data[blob.cz * plane..(blob.cz + 1) * plane], w, h, 0.0);
    }
    if cfg.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_sigma_hu).expect("finite sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }

    let mut obs = Observed::default();
    let record = |blob: &Blob, center: &mut Vec<f32>, neighbor: &mut Vec<f64>| {
        let fp = blob.footprint();
        let (mut near, mut n) = (0.0f64, 0usize);
        for y in fp.y1.floor() as usize..(fp.y2.ceil() as usize).min(h) {
            for x in fp.x1.floor() as usize..(fp.x2.ceil() as usize).min(w) {
                let rx = (x as f32 + 0.5 - blob.cx) / blob.a;
                let ry = (y as f32 + 0.5 - blob.cy) / blob.b;
                let r2 = rx * rx + ry * ry;
                if r2 < 1.0 {
                    center.push(data[blob.cz * plane + y * w + x]);
                }
                if r2 < 0.25 {
                    for z in [blob.cz.wrapping_sub(1), blob.cz + 1] {
                        if z < s {
                            near += (data[z * plane + y * w + x] - cfg.background_hu) as f64;
                            n += 1;
                        }
                    }
                }
            }
        }
        if n > 0 {
            neighbor.push(near / n as f64);
        }
    };
    for b in &lesions {
        record(b, &mut obs.lesion_center, &mut obs.lesion_neighbor);
    }
    for b in &confusers {
        record(b, &mut obs.confuser_center, &mut obs.confuser_neighbor);
    }

    let mut boxes: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    for blob in &lesions {
        let r = blob.reach();
        for z in blob.cz.saturating_sub(r)..=(blob.cz + r).min(s - 1) {
            if let Some(b) = blob.box_on(z) {
                boxes.entry(z).or_default().push(b);
            }
        }
    }
    let volume = Volume::new(Tensor::new(&[s, h, w], data)?, cfg.z_spacing_mm, cfg.xy_spacing_mm, Units::Hu)?;
    Ok((LabeledVolume { id: format!("vol_{index:04}"), volume, boxes, key_slices }, obs))
}

/// One pre-training image: three colour channels and its object boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbSample {
    /// `[3, H, W]`, normalised to `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

/// Natural-image stand-in for pre-training: coloured 2D blobs on a noisy
/// background, one image per configured volume. Only the in-plane settings
/// of `config` are used; there are no confusers.
pub fn generate_rgb(config: &SyntheticConfig) -> Result<Vec<RgbSample>> {
    config.validate()?;
    config.check_fits(0)?;
    (0..config.volumes).into_par_iter().map(|i| generate_rgb_image(config, i)).collect()
}

fn generate_rgb_image(cfg: &SyntheticConfig, index: usize) -> Result<RgbSample> {
    let mut rng = stream(cfg.seed, &format!("synth-rgb/{index}"));
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.gen_range(cfg.lesions[0]..=cfg.lesions[1]);
    let mut blobs: Vec<(Blob, [f32; 3])> = Vec::new();
    for _ in 0..count {
        let blob = place(cfg, &mut rng, |_| 0, |b| blobs.iter().all(|(o, _)| disjoint(&b.footprint(), &o.footprint(), 2.0)))?;
        let colour = [rng.gen_range(0.5..=1.0), rng.gen_range(0.5..=1.0), rng.gen_range(0.5..=1.0)];
        blobs.push((blob, colour));
    }
    let plane = h * w;
    let mut data = vec![cfg.background_hu; 3 * plane];
    let mut shape = vec![0.0f32; plane];
    for (blob, colour) in &blobs {
        shape.iter_mut().for_each(|v| *v = 0.0);
        // A large z semi-axis makes the slab average equal the 2D profile.
        let flat = Blob { c: f32::MAX.sqrt(), ..*blob };
        flat.render(&mut shape, w, h, 0.0);
        for (ch, &k) in colour.iter().enumerate() {
            for (d, s) in data[ch * plane..(ch + 1) * plane].iter_mut().zip(&shape) {
                *d += k * s;
            }
        }
    }
    if cfg.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_sigma_hu).expect("finite sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    let data = data.into_iter().map(normalize_hu).collect();
    Ok(RgbSample {
        image: Tensor::new(&[3, h, w], data)?,
        boxes: blobs.iter().map(|(b, _)| b.footprint()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_ellipsoid_cross_sections() {
        let blob = Blob { cx: 32.0, cy: 32.0, cz: 10, a: 8.0, b: 8.0, c: 2.0, contrast: 100.0 };
        let center = blob.box_on(10).unwrap();
        assert_eq!((center.width(), center.height()), (16.0, 16.0));
        let present: Vec<usize> = (0..20).filter(|&z| blob.box_on(z).is_some()).collect();
        assert_eq!(present, vec![8, 9, 10, 11, 12]);
        assert_eq!(blob.reach(), 2);
        let side = 16.0 * (1.0f32 - 0.75 * 0.75).sqrt();
        assert!((blob.box_on(12).unwrap().width() - side).abs() < 1e-4);
    }

    #[test]
    fn rendered_support_stays_inside_the_box() {
        let blob = Blob { cx: 20.3, cy: 17.8, cz: 5, a: 6.5, b: 4.2, c: 2.5, contrast: 1.0 };
        let (w, h) = (40, 40);
        for z in 0..11 {
            let mut plane = vec![0.0; w * h];
            blob.render(&mut plane, w, h, z as f32 - 5.0);
            let lit = plane.iter().any(|&v| v > 0.0);
            match blob.box_on(z) {
                Some(b) => {
                    assert!(lit, "slice {z} labelled but empty");
                    for (i, &v) in plane.iter().enumerate() {
                        let (x, y) = ((i % w) as f32 + 0.5, (i / w) as f32 + 0.5);
                        if v > 0.0 {
                            assert!(x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2, "slice {z} pixel ({x},{y})");
                        }
                    }
                }
                None => assert!(!lit || z.abs_diff(5) as f32 - 0.5 >= 2.5 - 0.5, "slice {z}"),
            }
        }
    }

    #[test]
    fn overlap_coefficient_bounds() {
        let a: Vec<f32> = (0..100).map(|i| i as f32).collect();
        assert!((overlap_coefficient(&a, &a, 16) - 1.0).abs() < 1e-9);
        let b: Vec<f32> = (0..100).map(|i| 1000.0 + i as f32).collect();
        assert_eq!(overlap_coefficient(&a, &b, 16), 0.0);
    }
}
