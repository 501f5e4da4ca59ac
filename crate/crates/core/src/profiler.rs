//! Closed-form parameter and FLOP accounting over a traced model.
//!
//! Conventions: a conv costs `mac · kd·kh·kw · Cin/g · Cout` per output
//! position (bias ignored); group norm 2 per element, relu and residual add
//! 1 per element, pooling 1 per window element per output, nearest
//! upsampling free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{LayerKind, LayerOp};
use crate::model::{Architecture, ModelGraph};

/// FLOPs charged per multiply-accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacConvention {
    #[serde(rename = "mac1")]
    One,
    #[serde(rename = "mac2")]
    Two,
}

impl MacConvention {
    pub fn flops_per_mac(self) -> u64 {
        match self {
            MacConvention::One => 1,
            MacConvention::Two => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            MacConvention::One => "mac=1",
            MacConvention::Two => "mac=2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    /// `(N, D, H, W)` of the profiled input.
    pub input: (usize, usize, usize, usize),
    pub convention: MacConvention,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

/// Cost of one traced layer under `mac`.
pub fn layer_flops(op: &LayerOp, mac: MacConvention) -> u64 {
    let out: u64 = op.output.iter().product::<usize>() as u64;
    match op.kind {
        LayerKind::Conv { kernel, cin, groups, .. } => {
            let k = (kernel[0] * kernel[1] * kernel[2]) as u64;
            mac.flops_per_mac() * k * (cin / groups) as u64 * out
        }
        LayerKind::GroupNorm => 2 * out,
        LayerKind::Relu | LayerKind::Add => out,
        LayerKind::Pool { window } => (window[0] * window[1] * window[2]) as u64 * out,
        LayerKind::Upsample => 0,
    }
}

fn report(ops: &[LayerOp], input: (usize, usize, usize, usize), convention: MacConvention) -> CostReport {
    let mut seen = std::collections::HashSet::new();
    let rows: Vec<LayerCost> = ops
        .iter()
        .map(|op| {
            let params = op
                .params
                .iter()
                .filter(|p| seen.insert(p.name.clone()))
                .map(|p| p.shape.iter().product::<usize>() as u64)
                .sum();
            LayerCost { name: op.name.clone(), params, flops: layer_flops(op, convention) }
        })
        .collect();
    CostReport {
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
        input,
        convention,
    }
}

/// Parameter counts grouped by layer; flops are left at zero.
pub fn count_params(model: &ModelGraph) -> Result<CostReport> {
    let d = model.arch.input_slices();
    let mut r = report(&model.arch.trace(64, 64)?.ops, (1, d, 64, 64), MacConvention::Two);
    for row in &mut r.rows {
        row.flops = 0;
    }
    r.total_flops = 0;
    Ok(r)
}

/// Parameter and FLOP accounting of `arch` on a `[1, 1, D, H, W]` input.
/// `D` may differ from the slice count the architecture was built with.
pub fn count_flops(arch: &Architecture, input: (usize, usize, usize), convention: MacConvention) -> Result<CostReport> {
    let (d, h, w) = input;
    let arch = if d == arch.input_slices() { arch.clone() } else { arch.with_input_slices(d)? };
    Ok(report(&arch.trace(h, w)?.ops, (1, d, h, w), convention))
}

/// CSV rows `variant,slices,params,flops,gflops` for every architecture at
/// every slice count.
pub fn report_table(
    variants: &[(String, Architecture)],
    slices: &[usize],
    hw: (usize, usize),
    convention: MacConvention,
) -> Result<String> {
    let mut out = String::from("variant,slices,params,flops,gflops\n");
    for (name, arch) in variants {
        for &d in slices {
            let r = count_flops(arch, (d, hw.0, hw.1), convention)?;
            writeln!(out, "{name},{d},{},{},{:.2}", r.total_params, r.total_flops, r.gflops()).expect("string write");
        }
    }
    Ok(out)
}

/// Outcome of matching one reference figure by choosing the counting
/// convention and the input resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub convention: MacConvention,
    pub resolution: usize,
    pub gflops: f64,
    pub relative_error: f64,
}

/// Picks the `(convention, square resolution)` whose cost at `slices` is
/// closest to `target_gflops`.
pub fn calibrate(arch: &Architecture, slices: usize, target_gflops: f64, resolutions: &[usize]) -> Result<Calibration> {
    let mut best: Option<Calibration> = None;
    for convention in [MacConvention::One, MacConvention::Two] {
        for &res in resolutions {
            let g = count_flops(arch, (slices, res, res), convention)?.gflops();
            let relative_error = (g - target_gflops).abs() / target_gflops;
            if best.map_or(true, |b| relative_error < b.relative_error) {
                best = Some(Calibration { convention, resolution: res, gflops: g, relative_error });
            }
        }
    }
    Ok(best.expect("at least one resolution"))
}
