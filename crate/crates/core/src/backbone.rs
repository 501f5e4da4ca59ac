//! Residual backbones over slice stacks and their 3D→2D conversion.
//!
//! Every layer works on `[N, C, D, H, W]` feature maps. Under the
//! anisotropic policy nothing ever strides or pools along `D`, so the four
//! stage outputs keep the input's slice count and each is collapsed to a
//! `[N, C, H, W]` map by a group transform (or a centre crop).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Exec, ShapeTracer};
use crate::tensor::{ConvGeometry, PoolGeometry, PoolMode, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Pseudo-3D bottlenecks: 1×3×3 spatial then 3×1×1 depth.
    #[serde(rename = "MP3D63")]
    Mp3d63,
    /// Full 3×3×3 bottlenecks.
    #[serde(rename = "MR3D50")]
    Mr3d50,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mp3d63 => "MP3D63",
            Variant::Mr3d50 => "MR3D50",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingPolicy {
    Anisotropic,
    Isotropic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    Gtm,
    Ctm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub pooling_policy: PoolingPolicy,
    pub conversion: Conversion,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stem_channels: usize,
    /// Slices per input window; odd.
    pub input_slices: usize,
    /// Largest slice count a group transform can absorb. Fixed per model so
    /// that weights do not depend on `input_slices`.
    pub gtm_max_slices: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mp3d63,
            pooling_policy: PoolingPolicy::Anisotropic,
            conversion: Conversion::Gtm,
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [256, 512, 1024, 2048],
            stem_channels: 64,
            input_slices: 9,
            gtm_max_slices: 11,
        }
    }
}

/// Spatial stride of each stage output relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

impl BackboneConfig {
    pub fn mp3d63(input_slices: usize) -> Self {
        Self { input_slices, ..Self::default() }
    }

    pub fn mr3d50(input_slices: usize) -> Self {
        Self { variant: Variant::Mr3d50, input_slices, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_slices % 2 == 0 {
            return bad(format!("input_slices must be odd, got {}", self.input_slices));
        }
        if self.gtm_max_slices % 2 == 0 || self.gtm_max_slices < self.input_slices {
            return bad(format!(
                "gtm_max_slices must be odd and at least input_slices ({}), got {}",
                self.input_slices, self.gtm_max_slices
            ));
        }
        if self.stem_channels == 0 || self.stage_blocks.iter().any(|&b| b == 0) {
            return bad("stem_channels and every stage_blocks entry must be positive".into());
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return bad(format!("stage channels must be positive multiples of 4, got {c}"));
        }
        if self.conversion == Conversion::Ctm {
            if let Some(d) = self.stage_depths().into_iter().find(|d| d % 2 == 0) {
                return bad(format!(
                    "centre-crop conversion needs odd stage depths; this pooling policy yields depth {d}"
                ));
            }
        }
        Ok(())
    }

    /// Depth extent of the C2..C5 outputs.
    pub fn stage_depths(&self) -> [usize; 4] {
        let mut d = self.input_slices;
        let mut out = [0; 4];
        for slot in out.iter_mut() {
            // Stage 2 sees the stem pool; later stages stride their first block.
            if self.pooling_policy == PoolingPolicy::Isotropic {
                d = (d - 1) / 2 + 1;
            }
            *slot = d;
        }
        out
    }

    fn depth_stride(&self) -> usize {
        match self.pooling_policy {
            PoolingPolicy::Anisotropic => 1,
            PoolingPolicy::Isotropic => 2,
        }
    }

    fn stem_pool(&self) -> PoolGeometry {
        match self.pooling_policy {
            PoolingPolicy::Anisotropic => {
                PoolGeometry::new(PoolMode::Max, [1, 3, 3], [1, 2, 2]).with_pad([0, 1, 1])
            }
            PoolingPolicy::Isotropic => {
                PoolGeometry::new(PoolMode::Max, [3, 3, 3], [2, 2, 2]).with_pad([1, 1, 1])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Pseudo3d,
    Full3d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub block_kind: BlockKind,
    pub spatial_stride: usize,
    /// 1 except in the isotropic ablation.
    pub depth_stride: usize,
}

impl BlockSpec {
    fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.spatial_stride != 1 || self.depth_stride != 1
    }

    /// Convolutions of the residual branch in execution order, with their
    /// suffixes; each is followed by a group norm of the same index.
    pub fn branch(&self) -> Vec<ConvSpec> {
        let (ci, cm, co) = (self.in_channels, self.bottleneck_channels, self.out_channels);
        let (s, sd) = (self.spatial_stride, self.depth_stride);
        match self.block_kind {
            BlockKind::Pseudo3d => vec![
                ConvSpec::new(ci, cm, [1, 1, 1], [1, 1, 1]),
                ConvSpec::new(cm, cm, [1, 3, 3], [1, s, s]),
                ConvSpec::new(cm, cm, [3, 1, 1], [sd, 1, 1]),
                ConvSpec::new(cm, co, [1, 1, 1], [1, 1, 1]),
            ],
            BlockKind::Full3d => vec![
                ConvSpec::new(ci, cm, [1, 1, 1], [1, 1, 1]),
                ConvSpec::new(cm, cm, [3, 3, 3], [sd, s, s]),
                ConvSpec::new(cm, co, [1, 1, 1], [1, 1, 1]),
            ],
        }
    }

    pub fn projection(&self) -> Option<ConvSpec> {
        self.has_projection().then(|| {
            ConvSpec::new(
                self.in_channels,
                self.out_channels,
                [1, 1, 1],
                [self.depth_stride, self.spatial_stride, self.spatial_stride],
            )
        })
    }

    /// Runs the block under parameter prefix `name`.
    pub fn forward<E: Exec>(&self, e: &mut E, name: &str, x: &E::Value) -> Result<E::Value> {
        let convs = self.branch();
        let last = convs.len();
        let mut h = x.clone();
        for (i, conv) in convs.iter().enumerate() {
            let idx = i + 1;
            h = e.conv(&format!("{name}.conv{idx}"), &h, conv)?;
            h = e.group_norm(&format!("{name}.gn{idx}"), &h, gn_groups(conv.cout))?;
            if idx != last {
                h = e.relu(&format!("{name}.relu{idx}"), &h);
            }
        }
        let shortcut = match self.projection() {
            Some(proj) => {
                let s = e.conv(&format!("{name}.downsample.conv"), x, &proj)?;
                e.group_norm(&format!("{name}.downsample.gn"), &s, gn_groups(proj.cout))?
            }
            None => x.clone(),
        };
        let sum = e.add(&format!("{name}.add"), &h, &shortcut)?;
        Ok(e.relu(&format!("{name}.out"), &sum))
    }
}

/// Largest divisor of `channels` not exceeding 32.
pub fn gn_groups(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Stage outputs before and after 3D→2D conversion.
#[derive(Clone, Debug)]
pub struct BackboneOutput<V> {
    /// C2..C5 as `[N, C, D, H, W]`.
    pub stages: Vec<V>,
    /// C2..C5 as `[N, C, H, W]`.
    pub features: Vec<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvSpec,
    pub pool: PoolGeometry,
    pub stages: Vec<Vec<BlockSpec>>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let kind = match config.variant {
            Variant::Mp3d63 => BlockKind::Pseudo3d,
            Variant::Mr3d50 => BlockKind::Full3d,
        };
        let stem = ConvSpec::new(1, config.stem_channels, [1, 7, 7], [1, 2, 2]);
        let mut cin = config.stem_channels;
        let mut stages = Vec::new();
        for (s, (&blocks, &cout)) in config.stage_blocks.iter().zip(&config.stage_channels).enumerate() {
            let down = s > 0;
            let stage = (0..blocks)
                .map(|b| {
                    let first = b == 0;
                    BlockSpec {
                        in_channels: if first { cin } else { cout },
                        bottleneck_channels: cout / 4,
                        out_channels: cout,
                        block_kind: kind,
                        spatial_stride: if first && down { 2 } else { 1 },
                        depth_stride: if first && down { config.depth_stride() } else { 1 },
                    }
                })
                .collect();
            stages.push(stage);
            cin = cout;
        }
        Ok(Self { pool: config.stem_pool(), stem, stages, config })
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        self.config.stage_channels
    }

    /// Backbone over a `[N, 1, D, H, W]` input.
    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::Value) -> Result<BackboneOutput<E::Value>> {
        let shape = e.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2] != self.config.input_slices {
            return Err(Error::Shape(format!(
                "backbone expects [N, 1, {}, H, W], got {shape:?}",
                self.config.input_slices
            )));
        }
        let mut h = e.conv("backbone.stem.conv", x, &self.stem)?;
        h = e.group_norm("backbone.stem.gn", &h, gn_groups(self.stem.cout))?;
        h = e.relu("backbone.stem.relu", &h);
        h = e.pool("backbone.stem.pool", &h, self.pool)?;
        let mut stages = Vec::with_capacity(4);
        let mut features = Vec::with_capacity(4);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                h = block.forward(e, &format!("backbone.layer{}.{b}", s + 1), &h)?;
            }
            let flat = match self.config.conversion {
                Conversion::Gtm => e.group_transform(&format!("backbone.gtm{}", s + 2), &h, self.config.gtm_max_slices)?,
                Conversion::Ctm => center_crop_transform(e, &h)?,
            };
            stages.push(h.clone());
            features.push(flat);
        }
        Ok(BackboneOutput { stages, features })
    }

    /// Traces the backbone on a `[1, 1, D, H, W]` input.
    pub fn trace(&self, height: usize, width: usize) -> Result<ShapeTracer> {
        let mut t = ShapeTracer::new();
        self.forward(&mut t, &vec![1, 1, self.config.input_slices, height, width])?;
        Ok(t)
    }
}

/// Keeps the centre depth plane of every channel: `[N,C,D,H,W] → [N,C,H,W]`.
pub fn center_crop_transform<E: Exec>(e: &mut E, x: &E::Value) -> Result<E::Value> {
    let s = e.shape(x);
    let [n, c, d, h, w] = s[..] else {
        return Err(Error::Shape(format!("centre crop expects [N,C,D,H,W], got {s:?}")));
    };
    if d % 2 == 0 {
        return Err(Error::Shape(format!("centre crop needs an odd depth, got {d}")));
    }
    let mid = e.narrow(x, 2, (d - 1) / 2, 1)?;
    e.reshape(&mid, &[n, c, h, w])
}

/// Group transform with an explicit `[C, D]` weight and `[C]` bias:
/// each channel's `D` depth planes are mixed by its own weight row.
pub fn group_transform<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [n, c, d, h, w] = s[..] else {
        return Err(Error::Shape(format!("group transform expects [N,C,D,H,W], got {s:?}")));
    };
    let ws = tape.shape(weight).to_vec();
    if ws != [c, d] {
        return Err(Error::Shape(format!("group transform weight must be [{c}, {d}], got {ws:?}")));
    }
    let kernel = tape.reshape(weight, &[c, d, 1, 1, 1])?;
    let flat = tape.reshape(x, &[n, c * d, 1, h, w])?;
    let y = tape.conv3d(flat, kernel, Some(bias), ConvGeometry::default().with_groups(c))?;
    tape.reshape(y, &[n, c, h, w])
}
