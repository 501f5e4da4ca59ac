use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Exec, Init};
use crate::tensor::{PoolGeometry, PoolMode};

/// Lateral 1×1 convs, a nearest-neighbour top-down pathway and 3×3 output
/// convs over C2..C5, plus P6 subsampled from P5.
#[derive(Clone, Debug, PartialEq)]
pub struct Fpn {
    pub in_channels: [usize; 4],
    pub out_channels: usize,
}

impl Fpn {
    pub fn new(in_channels: [usize; 4], out_channels: usize) -> Self {
        Self { in_channels, out_channels }
    }

    fn lateral(&self, level: usize) -> ConvSpec {
        ConvSpec::new(self.in_channels[level], self.out_channels, [1, 1, 1], [1, 1, 1]).with_bias(Init::LecunFanIn, 0.0)
    }

    fn output(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, [1, 3, 3], [1, 1, 1]).with_bias(Init::LecunFanIn, 0.0)
    }

    /// Maps `[N, C_i, H_i, W_i]` stage features (strides 4..32) to five
    /// `[N, out, 1, H, W]` pyramid levels P2..P6.
    pub fn forward<E: Exec>(&self, e: &mut E, features: &[E::Value]) -> Result<Vec<E::Value>> {
        if features.len() != 4 {
            return Err(Error::Shape(format!("pyramid expects 4 stage features, got {}", features.len())));
        }
        let shapes: Vec<Vec<usize>> = features.iter().map(|f| e.shape(f)).collect();
        for i in 1..4 {
            let (fine, coarse) = (&shapes[i - 1], &shapes[i]);
            if fine.len() != 4 || coarse.len() != 4 || fine[2] != 2 * coarse[2] || fine[3] != 2 * coarse[3] {
                return Err(Error::Shape(format!(
                    "stride mismatch between stage {} {fine:?} and stage {} {coarse:?}",
                    i + 1,
                    i + 2
                )));
            }
        }
        let mut laterals = Vec::with_capacity(4);
        for (i, f) in features.iter().enumerate() {
            let s = &shapes[i];
            let f = e.reshape(f, &[s[0], s[1], 1, s[2], s[3]])?;
            laterals.push(e.conv(&format!("neck.lateral{}", i + 2), &f, &self.lateral(i))?);
        }
        let mut top_down = vec![laterals[3].clone()];
        for i in (0..3).rev() {
            let up = e.upsample2x(&format!("neck.up{}", i + 2), top_down.last().expect("nonempty"))?;
            top_down.push(e.add(&format!("neck.merge{}", i + 2), &laterals[i], &up)?);
        }
        top_down.reverse();
        let mut levels = Vec::with_capacity(5);
        for (i, t) in top_down.iter().enumerate() {
            levels.push(e.conv(&format!("neck.output{}", i + 2), t, &self.output())?);
        }
        let p6 = PoolGeometry::new(PoolMode::Max, [1, 1, 1], [1, 2, 2]);
        let p6 = e.pool("neck.p6", &levels[3], p6)?;
        levels.push(p6);
        Ok(levels)
    }
}

/// Shared single-class dense head applied to every pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub channels: usize,
    pub anchors_per_location: usize,
}

impl Head {
    fn specs(&self) -> [ConvSpec; 3] {
        let (c, a) = (self.channels, self.anchors_per_location);
        [
            ConvSpec::new(c, c, [1, 3, 3], [1, 1, 1]).with_bias(Init::Normal(0.01), 0.0),
            ConvSpec::new(c, a, [1, 1, 1], [1, 1, 1]).with_bias(Init::Normal(0.01), 0.0),
            ConvSpec::new(c, 4 * a, [1, 1, 1], [1, 1, 1]).with_bias(Init::Normal(0.01), 0.0),
        ]
    }

    /// Objectness logits `[N, total]` and deltas `[N, total, 4]` in anchor
    /// order `(level, y, x, ratio)`.
    pub fn forward<E: Exec>(&self, e: &mut E, levels: &[E::Value]) -> Result<(E::Value, E::Value)> {
        let [conv, cls, reg] = self.specs();
        let a = self.anchors_per_location;
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        for (i, p) in levels.iter().enumerate() {
            let lvl = i + 2;
            let h = e.conv("head.conv", p, &conv)?;
            let h = e.relu(&format!("head.relu.p{lvl}"), &h);
            let l = e.conv("head.cls", &h, &cls)?;
            let d = e.conv("head.reg", &h, &reg)?;
            let s = e.shape(&l);
            let (n, hw) = (s[0], s[3] * s[4]);
            let l = e.reshape(&l, &[n, a, hw])?;
            let l = e.permute(&l, &[0, 2, 1])?;
            logits.push(e.reshape(&l, &[n, hw * a])?);
            let d = e.reshape(&d, &[n, a, 4, hw])?;
            let d = e.permute(&d, &[0, 3, 1, 2])?;
            deltas.push(e.reshape(&d, &[n, hw * a, 4])?);
        }
        Ok((e.concat(&logits, 1)?, e.concat(&deltas, 1)?))
    }
}
