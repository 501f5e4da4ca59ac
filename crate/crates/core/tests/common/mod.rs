//! Independent reference implementations used by the integration suites.
//!
//! Nothing here calls into the crate's kernels: every oracle is a direct
//! loop over the mathematical definition.

#![allow(dead_code)]

use mp3d::tensor::{Scalar, Tensor};
use mp3d::{Tape, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Seven-nested-loop grouped 3D convolution with zero padding.
pub fn conv3d_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let (n, cin, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (cout, cig, kd, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]);
    assert_eq!(cig * groups, cin);
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (wd + 2 * pad[2] - kw) / stride[2] + 1;
    let cog = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, od, oh, ow]);
    let mut data = out.data().to_vec();
    for s in 0..n {
        for co in 0..cout {
            let g = co / cog;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cig {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let zi = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let yi = (y * stride[1] + b) as isize - pad[1] as isize;
                                        let xi = (xo * stride[2] + e) as isize - pad[2] as isize;
                                        if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                            continue;
                                        }
                                        acc += x.at(&[s, g * cig + ci, zi as usize, yi as usize, xi as usize])
                                            * w.at(&[co, ci, a, b, e]);
                                    }
                                }
                            }
                        }
                        data[(((s * cout + co) * od + z) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
    }
    out = Tensor::new(&[n, cout, od, oh, ow], data).unwrap();
    out
}

/// Loop-based pooling (no padding); `max` selects max pooling, else average.
pub fn pool3d_direct(x: &Tensor<f64>, window: [usize; 3], stride: [usize; 3], max: bool) -> Tensor<f64> {
    let s = x.shape();
    let o: Vec<usize> = (0..3).map(|a| (s[2 + a] - window[a]) / stride[a] + 1).collect();
    let mut data = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for z in 0..o[0] {
                for y in 0..o[1] {
                    for xo in 0..o[2] {
                        let mut vals = Vec::new();
                        for a in 0..window[0] {
                            for b in 0..window[1] {
                                for e in 0..window[2] {
                                    vals.push(x.at(&[n, c, z * stride[0] + a, y * stride[1] + b, xo * stride[2] + e]));
                                }
                            }
                        }
                        let v = if max {
                            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        };
                        data.push(v);
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], o[0], o[1], o[2]], data).unwrap()
}

/// Largest relative error between the tape gradient of `f` with respect to
/// each leaf and central finite differences.
///
/// `f` must rebuild the whole graph from the leaf values it is given and
/// return the scalar loss.
pub fn finite_difference_check<T: Scalar>(
    leaves: &[Tensor<T>],
    step: f64,
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0].as_f64()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = tape.grad(vars[li]).unwrap().clone();
        // Scale used to keep the relative error meaningful near zero.
        let scale = analytic.data().iter().map(|g| g.as_f64().abs()).fold(0.0, f64::max).max(1e-3);
        for i in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            let bump = |t: &Tensor<T>, delta: f64| {
                let mut d = t.data().to_vec();
                d[i] = T::from_f64(d[i].as_f64() + delta);
                Tensor::new(t.shape(), d).unwrap()
            };
            plus[li] = bump(leaf, step);
            minus[li] = bump(leaf, -step);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.data()[i].as_f64();
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(scale));
            worst = worst.max(err);
        }
    }
    worst
}

/// A random box inside `[0, size)²` with sides in `[min_side, max_side]`.
pub fn random_box(rng: &mut ChaCha8Rng, size: f32, min_side: f32, max_side: f32) -> [f32; 4] {
    let w = rng.gen_range(min_side..=max_side);
    let h = rng.gen_range(min_side..=max_side);
    let x1 = rng.gen_range(0.0..(size - w).max(1e-3));
    let y1 = rng.gen_range(0.0..(size - h).max(1e-3));
    [x1, y1, x1 + w, y1 + h]
}

pub fn iou_direct(a: [f32; 4], b: [f32; 4]) -> f64 {
    let (a, b) = (a.map(|v| v as f64), b.map(|v| v as f64));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) greedy NMS: repeatedly take the best remaining box and drop every
/// box overlapping it by more than `thresh`.
pub fn nms_direct(boxes: &[[f32; 4]], scores: &[f32], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou_direct(boxes[i], boxes[best]) <= thresh);
    }
    keep
}

/// FROC by enumerating every candidate threshold and recounting from scratch.
pub fn froc_direct(flags: &[bool], scores: &[f64], num_images: usize, num_gts: usize, rate: f64) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &thresholds {
        let tp = (0..flags.len()).filter(|&i| scores[i] >= t && flags[i]).count();
        let fp = (0..flags.len()).filter(|&i| scores[i] >= t && !flags[i]).count();
        if fp as f64 / num_images as f64 <= rate {
            best = best.max(tp as f64 / num_gts as f64);
        }
    }
    best
}

/// All-points AP from a per-threshold precision/recall enumeration.
pub fn ap_direct(flags: &[bool], scores: &[f64], num_gts: usize) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = (0..flags.len()).filter(|&i| scores[i] >= t && flags[i]).count() as f64;
            let n = (0..flags.len()).filter(|&i| scores[i] >= t).count() as f64;
            (tp / num_gts as f64, tp / n)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * envelope;
        prev_recall = r;
    }
    ap
}

/// A detection as `(image, box, score)` for the matching oracle.
pub type RawDet = (usize, [f32; 4], f32);

/// Greedy matching by repeated full scans: the highest-scoring unvisited
/// detection (earliest on ties) claims the unclaimed same-image ground truth
/// of highest IoU (earliest on ties) when that IoU reaches `thresh`.
pub fn match_direct(dets: &[RawDet], gts: &[(usize, [f32; 4])], thresh: f64) -> Vec<bool> {
    let mut visited = vec![false; dets.len()];
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for i in 0..dets.len() {
            if !visited[i] && pick.map_or(true, |p| dets[i].2 > dets[p].2) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        visited[i] = true;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.0 != dets[i].0 || claimed[g] {
                continue;
            }
            let v = iou_direct(dets[i].1, gt.1);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= thresh {
                claimed[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// Group norm of `[N, C, D, H, W]`. With `per_slice` every depth index gets
/// its own statistics; otherwise a group spans all of `D, H, W`.
pub fn group_norm_direct(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], groups: usize, per_slice: bool, eps: f64) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let cg = c / groups;
    let mut out = vec![0.0; x.numel()];
    let slabs: Vec<Vec<usize>> = if per_slice { (0..d).map(|z| vec![z]).collect() } else { vec![(0..d).collect()] };
    for b in 0..n {
        for g in 0..groups {
            for zs in &slabs {
                let mut idx = Vec::new();
                for ch in g * cg..(g + 1) * cg {
                    for &z in zs {
                        for y in 0..h {
                            for xx in 0..w {
                                idx.push((ch, x.offset(&[b, ch, z, y, xx])));
                            }
                        }
                    }
                }
                let mean = idx.iter().map(|&(_, o)| x.data()[o]).sum::<f64>() / idx.len() as f64;
                let var = idx.iter().map(|&(_, o)| (x.data()[o] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
                for &(ch, o) in &idx {
                    out[o] = (x.data()[o] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
                }
            }
        }
    }
    Tensor::new(&s, out).unwrap()
}

pub fn relu_direct(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}
