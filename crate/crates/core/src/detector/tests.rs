use super::*;
use crate::backbone::{Conversion, Variant};
use crate::boxes::iou;
use crate::graph::Init;
use crate::model::{Architecture, ModelGraph};
use crate::rng::stream;
use proptest::prelude::*;

fn tiny_backbone(d: usize) -> BackboneConfig {
    BackboneConfig {
        variant: Variant::Mp3d63,
        conversion: Conversion::Gtm,
        stage_blocks: [1, 1, 1, 1],
        stage_channels: [16, 16, 32, 32],
        stem_channels: 8,
        input_slices: d,
        ..BackboneConfig::default()
    }
}

fn tiny_detector() -> Detector {
    Detector::new(tiny_backbone(3), DetectorConfig { fpn_channels: 8, ..DetectorConfig::default() }).unwrap()
}

#[test]
fn p2_anchor_count_at_512() {
    let levels = AnchorConfig::default().generate(512, 512).unwrap();
    assert_eq!(levels[0].len(), 128 * 128 * 3);
    assert_eq!(levels.iter().map(Vec::len).sum::<usize>(), 3 * (128 * 128 + 64 * 64 + 32 * 32 + 16 * 16 + 8 * 8));
}

#[test]
fn anchor_shapes_preserve_area() {
    let cfg = AnchorConfig::default();
    let levels = cfg.generate(128, 128).unwrap();
    for (level, &scale) in levels.iter().zip(&cfg.scales) {
        for loc in level.chunks_exact(3) {
            let square = loc[1];
            assert_eq!((square.width(), square.height()), (scale, scale));
            for b in [loc[0], loc[2]] {
                assert!((b.area() - (scale * scale) as f64).abs() <= 1.0);
                let (c, d) = (b.center(), square.center());
                assert!((c.0 - d.0).abs() < 1e-3 && (c.1 - d.1).abs() < 1e-3);
            }
            assert!(loc[0].height() < loc[0].width());
        }
    }
}

#[test]
fn anchors_need_divisible_images() {
    assert!(AnchorConfig::default().generate(100, 128).is_err());
}

#[test]
fn identical_anchor_is_positive_with_zero_deltas() {
    let b = BBox::new(10.0, 12.0, 42.0, 30.0);
    let a = assign_targets(&[b, BBox::new(100.0, 100.0, 110.0, 110.0)], &[b], 0.7, 0.3);
    assert_eq!(a.labels, vec![Label::Positive, Label::Negative]);
    assert_eq!(a.deltas[0], [0.0; 4]);
}

#[test]
fn empty_ground_truth_gives_only_negatives() {
    let anchors = AnchorConfig::default().generate_flat(64, 64).unwrap();
    let a = assign_targets(&anchors, &[], 0.7, 0.3);
    assert_eq!(a.num_positive(), 0);
    assert!(a.labels.iter().all(|&l| l == Label::Negative));
}

#[test]
fn three_anchor_labels() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
    let anchors = [BBox::new(0.0, 0.0, 10.0, 8.0), BBox::new(0.0, 0.0, 10.0, 5.0), BBox::new(0.0, 0.0, 10.0, 1.0)];
    let ious: Vec<f64> = anchors.iter().map(|a| iou(a, &gt)).collect();
    assert!((ious[0] - 0.8).abs() < 1e-9 && (ious[1] - 0.5).abs() < 1e-9 && (ious[2] - 0.1).abs() < 1e-9);
    let a = assign_targets(&anchors, &[gt], 0.7, 0.3);
    assert_eq!(a.labels, vec![Label::Positive, Label::Ignore, Label::Negative]);
}

#[test]
fn weak_ground_truth_still_claims_its_best_anchors() {
    let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
    let anchors = [BBox::new(0.0, 0.0, 10.0, 4.0), BBox::new(0.0, 6.0, 10.0, 10.0), BBox::new(0.0, 0.0, 10.0, 1.0)];
    let a = assign_targets(&anchors, &[gt], 0.7, 0.3);
    assert_eq!(a.labels, vec![Label::Positive, Label::Positive, Label::Negative]);
    assert_eq!(a.matched_gt, vec![Some(0), Some(0), None]);
}

#[test]
fn sampler_respects_budget() {
    let mut labels = vec![Label::Positive; 300];
    labels.extend(vec![Label::Negative; 500]);
    labels.extend(vec![Label::Ignore; 50]);
    let asg = TargetAssignment { deltas: vec![[0.0; 4]; labels.len()], matched_gt: vec![None; labels.len()], labels };
    let (p, n) = sample_anchors(&asg, 256, 0.5, &mut stream(0, "sampler"));
    assert_eq!((p.len(), n.len()), (128, 128));
    assert!(p.iter().all(|&i| i < 300) && n.iter().all(|&i| (300..800).contains(&i)));

    let few = TargetAssignment { labels: vec![Label::Positive, Label::Negative, Label::Negative], deltas: vec![[0.0; 4]; 3], matched_gt: vec![None; 3] };
    let (p, n) = sample_anchors(&few, 256, 0.5, &mut stream(0, "sampler"));
    assert_eq!((p, n), (vec![0], vec![1, 2]));
}

fn toy_assignment() -> TargetAssignment {
    TargetAssignment {
        labels: vec![Label::Positive, Label::Negative, Label::Ignore, Label::Negative],
        deltas: vec![[0.1, -0.2, 0.3, 0.0], [0.0; 4], [0.0; 4], [0.0; 4]],
        matched_gt: vec![Some(0), None, None, None],
    }
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let asg = toy_assignment();
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::new(&[1, 4], vec![40.0, -40.0, 0.0, -40.0]).unwrap());
    let mut d = vec![0.0; 16];
    d[..4].copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
    let deltas = tape.constant(Tensor::new(&[1, 4, 4], d).unwrap());
    let parts = detection_loss(&mut tape, logits, deltas, &[asg], &LossConfig::default(), &mut stream(0, "sampler")).unwrap();
    assert!(tape.value(parts.total).data()[0] < 1e-12);
}

#[test]
fn all_ignored_loss_is_zero() {
    let asg = TargetAssignment { labels: vec![Label::Ignore; 4], deltas: vec![[0.0; 4]; 4], matched_gt: vec![None; 4] };
    let mut tape = Tape::<f32>::new();
    let logits = tape.constant(Tensor::full(&[1, 4], 3.0));
    let deltas = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
    let parts = detection_loss(&mut tape, logits, deltas, &[asg], &LossConfig::default(), &mut stream(0, "sampler")).unwrap();
    assert_eq!(tape.value(parts.total).data()[0], 0.0);
}

#[test]
fn loss_matches_straight_line_formula() {
    let asg = toy_assignment();
    let logits = [0.3f64, -1.2, 0.7, 2.0];
    let deltas: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let cfg = LossConfig { batch_size_per_image: 2, positive_fraction: 0.5, smooth_l1_beta: 1.0 / 9.0 };

    // Budget 2 with one positive: the positive plus one of the two negatives.
    let mut rng = stream(9, "sampler");
    let (pos, neg) = sample_anchors(&asg, 2, 0.5, &mut rng);
    assert_eq!(pos, vec![0]);
    assert_eq!(neg.len(), 1);
    let bce = |x: f64, t: f64| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    let cls = (bce(logits[0], 1.0) + bce(logits[neg[0]], 0.0)) / 2.0;
    let sl1 = |d: f64| {
        let b = cfg.smooth_l1_beta;
        if d.abs() < b { 0.5 * d * d / b } else { d.abs() - 0.5 * b }
    };
    let reg = (0..4).map(|k| sl1(deltas[k] - asg.deltas[0][k] as f64)).sum::<f64>() / 4.0;

    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::new(&[1, 4], logits.to_vec()).unwrap());
    let d = tape.constant(Tensor::new(&[1, 4, 4], deltas).unwrap());
    let parts = detection_loss(&mut tape, l, d, &[asg], &cfg, &mut stream(9, "sampler")).unwrap();
    assert!((tape.value(parts.cls).data()[0] - cls).abs() < 1e-12);
    assert!((tape.value(parts.reg).data()[0] - reg).abs() < 1e-9);
    assert!((tape.value(parts.total).data()[0] - cls - reg).abs() < 1e-9);
}

#[test]
fn duplicate_boxes_keep_the_higher_score() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5), vec![1]);
}

fn run_fpn(fpn: &Fpn, store: &ParamStore, feats: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, store, false);
    let vars: Vec<_> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let levels = fpn.forward(&mut TapeExec::new(&mut tape, &bound), &vars).unwrap();
    levels.iter().map(|v| tape.value(*v).clone()).collect()
}

fn fpn_fixture(out: usize) -> (Fpn, ParamStore, Vec<Tensor>) {
    let fpn = Fpn::new([4, 6, 8, 10], out);
    let sizes = [16, 8, 4, 2];
    let shapes: Vec<Vec<usize>> = fpn.in_channels.iter().zip(sizes).map(|(&c, s)| vec![1, c, s, s]).collect();
    let mut t = ShapeTracer::new();
    fpn.forward(&mut t, &shapes).unwrap();
    let store = ParamStore::initialize(&t.param_specs(), &mut stream(4, "init"));
    let feats = shapes.iter().map(|s| Tensor::from_fn(s, |i| ((i * 13 % 7) as f32) - 3.0)).collect();
    (fpn, store, feats)
}

#[test]
fn pyramid_levels_have_uniform_width() {
    let (fpn, store, feats) = fpn_fixture(12);
    let levels = run_fpn(&fpn, &store, &feats);
    let shapes: Vec<&[usize]> = levels.iter().map(|l| l.shape()).collect();
    assert_eq!(shapes, vec![&[1, 12, 1, 16, 16][..], &[1, 12, 1, 8, 8], &[1, 12, 1, 4, 4], &[1, 12, 1, 2, 2], &[1, 12, 1, 1, 1]]);
}

#[test]
fn zero_laterals_give_zero_pyramid() {
    let (fpn, mut store, feats) = fpn_fixture(6);
    for i in 2..=5 {
        let name = format!("neck.lateral{i}.weight");
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    for level in run_fpn(&fpn, &store, &feats) {
        assert!(level.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn c5_impulse_reaches_an_aligned_block_in_p2() {
    let (fpn, mut store, mut feats) = fpn_fixture(1);
    for i in 2..=5 {
        let name = format!("neck.lateral{i}.weight");
        let shape = store.get(&name).unwrap().shape().to_vec();
        let w = if i == 5 { Tensor::from_fn(&shape, |k| if k == 0 { 1.0 } else { 0.0 }) } else { Tensor::zeros(&shape) };
        store.set(&name, w).unwrap();
        store.set(&format!("neck.output{i}.weight"), Tensor::from_fn(&[1, 1, 1, 3, 3], |k| if k == 4 { 1.0 } else { 0.0 })).unwrap();
    }
    feats[3] = Tensor::from_fn(&[1, 10, 2, 2], |k| if k == 3 { 1.0 } else { 0.0 });
    let p2 = &run_fpn(&fpn, &store, &feats)[0];
    for y in 0..16 {
        for x in 0..16 {
            let inside = (8..16).contains(&y) && (8..16).contains(&x);
            assert_eq!(p2.at(&[0, 0, 0, y, x]), if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn pyramid_rejects_stride_mismatch() {
    let fpn = Fpn::new([4, 4, 4, 4], 4);
    let mut t = ShapeTracer::new();
    let shapes = vec![vec![1, 4, 16, 16], vec![1, 4, 8, 8], vec![1, 4, 8, 8], vec![1, 4, 2, 2]];
    let err = fpn.forward(&mut t, &shapes).unwrap_err();
    assert!(err.to_string().contains("stride mismatch"), "{err}");
}

#[test]
fn head_output_follows_anchor_order() {
    let det = tiny_detector();
    let mut graph = ModelGraph::initialize(Architecture::Detector(det.clone()), 0).unwrap();
    let shape = graph.params.get("head.cls.weight").unwrap().shape().to_vec();
    graph.params.set("head.cls.weight", Tensor::zeros(&shape)).unwrap();
    graph.params.set("head.cls.bias", Tensor::new(&[3], vec![0.0, 1.0, 2.0]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &graph.params, false);
    let x = tape.constant(Tensor::from_fn(&[2, 1, 3, 64, 64], |i| (i % 17) as f32 / 17.0));
    let out = det.forward(&mut TapeExec::new(&mut tape, &bound), &x).unwrap();
    let logits = tape.value(out.logits);
    let anchors = det.anchors(64, 64).unwrap();
    assert_eq!(logits.shape(), &[2, anchors.len()]);
    assert_eq!(tape.shape(out.deltas), &[2, anchors.len(), 4]);
    for (i, &l) in logits.data().iter().enumerate() {
        assert_eq!(l, (i % 3) as f32);
    }
}

#[test]
fn parameters_initialise_per_rule() {
    let det = tiny_detector();
    let specs = Architecture::Detector(det).param_specs().unwrap();
    let find = |n: &str| specs.iter().find(|s| s.name == n).unwrap().clone();
    assert_eq!(find("head.cls.weight").init, Init::Normal(0.01));
    assert_eq!(find("backbone.gtm2.weight").shape, vec![16, 11]);
    assert_eq!(find("backbone.layer1.0.gn4.weight").init, Init::Constant(1.0));
    // The shared head appears once even though five levels use it.
    assert_eq!(specs.iter().filter(|s| s.name == "head.conv.weight").count(), 1);
}

#[test]
fn prediction_boxes_are_valid_and_bounded() {
    let det = Detector::new(tiny_backbone(3), DetectorConfig { fpn_channels: 8, score_thresh: 0.0, ..DetectorConfig::default() }).unwrap();
    let graph = ModelGraph::initialize(Architecture::Detector(det.clone()), 3).unwrap();
    let x = Tensor::from_fn(&[1, 1, 3, 64, 64], |i| ((i * 7919) % 101) as f32 / 101.0);
    let dets = det.predict(&graph.params, &x).unwrap();
    assert_eq!(dets.len(), 1);
    assert!(!dets[0].is_empty() && dets[0].len() <= 100);
    for w in dets[0].windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for d in &dets[0] {
        assert!(d.bbox.is_valid() && d.bbox.x2 <= 64.0 && d.bbox.y2 <= 64.0 && d.bbox.x1 >= 0.0);
        assert!((0.0..=1.0).contains(&d.score));
    }
}

#[test]
fn flipped_dense_outputs_give_flipped_detections() {
    // Mirror the dense predictions of a symmetric model: logits follow the
    // anchor to its mirror location and the x offset changes sign.
    let cfg = AnchorConfig::default();
    let levels = cfg.generate(128, 128).unwrap();
    let anchors: Vec<BBox> = levels.iter().flatten().copied().collect();
    let mut mirror = Vec::with_capacity(anchors.len());
    let mut base = 0;
    for (level, &stride) in levels.iter().zip(&cfg.strides) {
        let side = 128 / stride;
        for i in 0..level.len() {
            let (cell, r) = (i / 3, i % 3);
            let (y, x) = (cell / side, cell % side);
            mirror.push(base + (y * side + (side - 1 - x)) * 3 + r);
        }
        base += level.len();
    }
    let mut rng = stream(2, "test");
    let logits: Vec<f32> = (0..anchors.len()).map(|_| rng.gen_range(-6.0..2.0)).collect();
    let deltas: Vec<[f32; 4]> = (0..anchors.len()).map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).collect();
    let mut fl = vec![0.0; anchors.len()];
    let mut fd = vec![[0.0; 4]; anchors.len()];
    for (i, &m) in mirror.iter().enumerate() {
        fl[m] = logits[i];
        fd[m] = [-deltas[i][0], deltas[i][1], deltas[i][2], deltas[i][3]];
    }
    let post = DetectorConfig::default().postprocess();
    let a = decode_and_nms(&logits, &deltas, &anchors, (128, 128), &post);
    let b = decode_and_nms(&fl, &fd, &anchors, (128, 128), &post);
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        let f = p.bbox.flip_horizontal(128.0);
        assert_eq!(p.score, q.score);
        for (u, v) in <[f32; 4]>::from(f).iter().zip(<[f32; 4]>::from(q.bbox)) {
            assert!((u - v).abs() < 1e-3);
        }
    }
}

use rand::Rng as _;

proptest! {
    #[test]
    fn encode_decode_round_trip(ax in 0f32..400.0, ay in 0f32..400.0, aw in 4f32..300.0, ah in 4f32..300.0,
                                gx in 0f32..400.0, gy in 0f32..400.0, gw in 4f32..300.0, gh in 4f32..300.0) {
        let a = BBox::new(ax, ay, ax + aw, ay + ah);
        let g = BBox::new(gx, gy, gx + gw, gy + gh);
        let back = decode(&a, encode(&a, &g));
        for (u, v) in <[f32; 4]>::from(back).iter().zip(<[f32; 4]>::from(g)) {
            prop_assert!((u - v).abs() < 1e-3, "{back:?} vs {g:?}");
        }
    }

    #[test]
    fn every_reasonable_box_has_a_covering_anchor(w in 12f32..=300.0, ratio in 0.5f32..=2.0, fx in 0f32..1.0, fy in 0f32..1.0) {
        let h = (w * ratio).clamp(12.0, 300.0);
        let x1 = fx * (512.0 - w);
        let y1 = fy * (512.0 - h);
        let gt = BBox::new(x1, y1, x1 + w, y1 + h);
        let anchors = AnchorConfig::default().generate_flat(512, 512).unwrap();
        let best = anchors.iter().map(|a| iou(a, &gt)).fold(0.0, f64::max);
        prop_assert!(best >= 0.3, "{gt:?} best {best}");
    }

    #[test]
    fn nms_ignores_input_order(seed in 0u64..1000) {
        let mut rng = stream(seed, "nms");
        let n = 25;
        let boxes: Vec<BBox> = (0..n).map(|_| {
            let (x, y) = (rng.gen_range(0.0..60.0f32), rng.gen_range(0.0..60.0f32));
            BBox::new(x, y, x + rng.gen_range(5.0..30.0f32), y + rng.gen_range(5.0..30.0f32))
        }).collect();
        let scores: Vec<f32> = (0..n).map(|i| i as f32 / n as f32 + rng.gen_range(0.0..0.001f32)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left((seed % 7) as usize);
        let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
        let ps: Vec<f32> = perm.iter().map(|&i| scores[i]).collect();
        let mut a: Vec<usize> = nms(&boxes, &scores, 0.5);
        let mut b: Vec<usize> = nms(&pb, &ps, 0.5).into_iter().map(|i| perm[i]).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
