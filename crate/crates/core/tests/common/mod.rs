//! Independent reference implementations shared by the integration and
//! acceptance tests. None of these call into the code they check.

#![allow(dead_code)]

use pyramid_rfcn::boxes::BBox;
use pyramid_rfcn::eval::{DetectionRecord, GroundTruth};
use pyramid_rfcn::layers::conv::{conv2d, deconv2d, ConvGeometry};
use pyramid_rfcn::layers::{l2norm_scale, smooth_l1, softmax_xent};
use pyramid_rfcn::rfcn::psroi_pool_op;
use pyramid_rfcn::rpn::{fuse_predictions, FusionLayers, RpnPrediction};
use pyramid_rfcn::{ModelParams, Result, Shape, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let x0 = rng.random_range(-0.2 * w..0.9 * w);
    let y0 = rng.random_range(-0.2 * h..0.9 * h);
    BBox::new(x0, y0, x0 + rng.random_range(1.0..0.8 * w), y0 + rng.random_range(1.0..0.8 * h))
}

// ---------------------------------------------------------------- pooling

/// Cross-layer position-sensitive pooling by visiting every pixel of every
/// level and testing bin membership directly.
pub fn psroi_brute_force(levels: &[(&Tensor, f64)], roi: &BBox, k: usize, groups: usize) -> Vec<f64> {
    let mut out = vec![0.0; groups * k * k];
    for &(map, stride) in levels {
        let s = map.shape();
        let bh = roi.height() / stride / k as f64;
        let bw = roi.width() / stride / k as f64;
        for g in 0..groups {
            for i in 0..k {
                for j in 0..k {
                    let ch = (i * k + j) * groups + g;
                    let (lo_y, hi_y) = ((roi.y_min / stride + i as f64 * bh).floor(), (roi.y_min / stride + (i + 1) as f64 * bh).ceil());
                    let (lo_x, hi_x) = ((roi.x_min / stride + j as f64 * bw).floor(), (roi.x_min / stride + (j + 1) as f64 * bw).ceil());
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for y in 0..s.h {
                        for x in 0..s.w {
                            let (yf, xf) = (y as f64, x as f64);
                            if yf >= lo_y && yf < hi_y && xf >= lo_x && xf < hi_x {
                                sum += map.at(0, ch, y, x);
                                n += 1;
                            }
                        }
                    }
                    if n > 0 {
                        out[(g * k + i) * k + j] += sum / n as f64;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- bilinear

/// Direct bilinear upsampling by `f` with half-pixel centres and edge
/// clamping: output pixel `y` samples the input at `(y + 0.5) / f - 0.5`.
pub fn bilinear_reference(map: &Tensor, f: usize) -> Tensor {
    let s = map.shape();
    let coord = |o: usize, len: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, s.h * f, s.w * f), |n, c, y, x| {
        let (y0, y1, ty) = coord(y, s.h);
        let (x0, x1, tx) = coord(x, s.w);
        let top = map.at(n, c, y0, x0) * (1.0 - tx) + map.at(n, c, y0, x1) * tx;
        let bottom = map.at(n, c, y1, x0) * (1.0 - tx) + map.at(n, c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

// ---------------------------------------------------------------- nms

fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n^2) greedy suppression: repeatedly keep the best remaining box
/// (lowest index on ties) and drop everything overlapping it above `thresh`.
pub fn nms_reference(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) > thresh {
                alive[i] = false;
            }
        }
    }
    kept
}

// ---------------------------------------------------------------- metrics

/// Greedy matching written without grouping structures: every detection in
/// global score order scans all gts. Returns (tp, ignored) flags per detection
/// and the matched flag per gt. `valid(gt)` says whether a gt counts.
pub fn match_reference(
    dets: &[DetectionRecord],
    gts: &[GroundTruth],
    valid: impl Fn(&GroundTruth) -> bool,
) -> (Vec<(bool, bool)>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![(false, false); dets.len()];
    for d in order {
        let mut best = None;
        let mut best_iou = 0.5;
        let mut ignore = false;
        for (g, gt) in gts.iter().enumerate() {
            if gt.image_id != dets[d].image_id || gt.class_id != dets[d].class_id {
                continue;
            }
            let o = iou(&dets[d].bbox, &gt.bbox);
            if o <= 0.5 {
                continue;
            }
            if !valid(gt) {
                ignore = true;
            } else if !taken[g] && o > best_iou {
                best_iou = o;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            flags[d] = (true, false);
        } else {
            flags[d] = (false, ignore);
        }
    }
    (flags, taken)
}

/// AP by sweeping every distinct score as a threshold: precision/recall of
/// the set `score >= t`, then the area under the upper envelope as a step
/// function of recall.
pub fn ap_threshold_sweep(scored: &[(f64, bool)], gt_count: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for t in thresholds {
        let tp = scored.iter().filter(|s| s.0 >= t && s.1).count();
        let all = scored.iter().filter(|s| s.0 >= t).count();
        pts.push((tp as f64 / gt_count as f64, tp as f64 / all as f64));
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (idx, &(r, _)) in pts.iter().enumerate() {
        let best_p = pts[idx..].iter().map(|p| p.1).fold(0.0, f64::max);
        area += (r - prev_r) * best_p;
        prev_r = r;
    }
    area
}

// ---------------------------------------------------------------- gradients

/// Relative error floor: differences below this magnitude count as absolute.
pub const GRAD_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-6;

/// Compares tape gradients of `sum(build(params) * R)` for a random fixed
/// `R` against central differences over every scalar of every parameter.
/// Returns the largest relative error.
pub fn grad_check(params: &ModelParams, seed: u64, build: impl Fn(&mut Tape, &ModelParams) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    let proj = random_tensor(&mut rng(seed ^ 0x9e37_79b9), tape.shape(out));
    let objective = |p: &ModelParams| -> Result<f64> {
        let mut t = Tape::inference();
        let o = build(&mut t, p)?;
        Ok(t.value(o).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let mut analytic = params.clone();
    analytic.collect_grads(&tape)?;

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let len = params.get(&name)?.data().len();
        let grad = analytic.grad(&name).cloned().unwrap_or_else(|| Tensor::zeros(params.get(&name).unwrap().shape()));
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name)?.data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(&name)?.data_mut()[i] -= STEP;
            let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * STEP);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn params_of(entries: Vec<(&str, Tensor)>) -> ModelParams {
    let mut p = ModelParams::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

/// One trial of one op, identified by name; returns the max relative error.
pub fn grad_trial(op: &str, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    match op {
        "conv" | "dilated_conv" => {
            let dilation = if op == "conv" { 1 } else { 2 };
            let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
            let k = if op == "conv" { r.random_range(1..=3) } else { 3 };
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=dilation);
            let hw = r.random_range(5..=8);
            let g = ConvGeometry::square(k, stride, pad, dilation);
            let p = params_of(vec![
                ("x", random_tensor(&mut r, Shape::new(1, ci, hw, hw))),
                ("w", random_tensor(&mut r, Shape::new(co, ci, k, k))),
                ("b", random_tensor(&mut r, Shape::new(1, co, 1, 1))),
            ]);
            grad_check(&p, seed, |t, p| {
                let (x, w, b) = (p.bind(t, "x")?, p.bind(t, "w")?, p.bind(t, "b")?);
                conv2d(t, x, w, Some(b), g)
            })
        }
        "deconv" => {
            let f = r.random_range(2..=3);
            let c = r.random_range(1..=2);
            let hw = r.random_range(2..=4);
            let p = params_of(vec![
                ("x", random_tensor(&mut r, Shape::new(1, c, hw, hw + 1))),
                ("w", random_tensor(&mut r, Shape::new(c, c, 2 * f, 2 * f))),
            ]);
            grad_check(&p, seed, |t, p| {
                let (x, w) = (p.bind(t, "x")?, p.bind(t, "w")?);
                deconv2d(t, x, w, f)
            })
        }
        "l2norm_scale" => {
            let c = r.random_range(2..=5);
            let p = params_of(vec![
                ("x", random_tensor(&mut r, Shape::new(1, c, 3, 4))),
                ("gamma", random_tensor(&mut r, Shape::new(1, c, 1, 1))),
            ]);
            grad_check(&p, seed, |t, p| {
                let (x, g) = (p.bind(t, "x")?, p.bind(t, "gamma")?);
                l2norm_scale(t, x, g, 1e-12)
            })
        }
        "softmax_xent" => {
            let (rows, classes) = (r.random_range(1..=6), r.random_range(2..=5));
            let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
            let mut logits = random_tensor(&mut r, Shape::new(rows, classes, 1, 1));
            logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            let p = params_of(vec![("logits", logits)]);
            grad_check(&p, seed, |t, p| {
                let l = p.bind(t, "logits")?;
                softmax_xent(t, l, &labels)
            })
        }
        "smooth_l1" => {
            let rows = r.random_range(1..=5);
            let shape = Shape::new(rows, 4, 1, 1);
            let pred = random_tensor(&mut r, shape).map(|v| 2.5 * v);
            let target = random_tensor(&mut r, shape);
            let scale = r.random_range(0.1..2.0);
            let p = params_of(vec![("pred", pred)]);
            grad_check(&p, seed, |t, p| {
                let x = p.bind(t, "pred")?;
                smooth_l1(t, x, target.clone(), scale)
            })
        }
        "psroi_pool" => {
            let k = r.random_range(1..=3);
            let groups = r.random_range(1..=3);
            let levels = r.random_range(1..=3);
            let strides = [4.0, 8.0, 16.0];
            let size = 64.0;
            let mut entries = Vec::new();
            let names = ["m0", "m1", "m2"];
            for (l, stride) in strides.iter().take(levels).enumerate() {
                let side = (size / stride) as usize;
                entries.push((names[l], random_tensor(&mut r, Shape::new(1, k * k * groups, side, side))));
            }
            let rois: Vec<BBox> = (0..r.random_range(1..=3)).map(|_| random_box(&mut r, size, size)).collect();
            let p = params_of(entries);
            grad_check(&p, seed, |t, p| {
                let vars = (0..levels)
                    .map(|l| Ok((p.bind(t, names[l])?, strides[l])))
                    .collect::<Result<Vec<_>>>()?;
                psroi_pool_op(t, &vars, &rois, k, groups)
            })
        }
        "fusion" => {
            let a = r.random_range(1..=2);
            let (h, w) = (r.random_range(2..=3), r.random_range(2..=3));
            let layers = FusionLayers::new("f", a);
            let mut p = params_of(vec![
                ("co", random_tensor(&mut r, Shape::new(1, 2 * a, h, w))),
                ("cb", random_tensor(&mut r, Shape::new(1, 4 * a, h, w))),
                ("fo", random_tensor(&mut r, Shape::new(1, 2 * a, 2 * h, 2 * w))),
                ("fb", random_tensor(&mut r, Shape::new(1, 4 * a, 2 * h, 2 * w))),
            ]);
            layers.init(&mut p)?;
            let perturbed: Vec<String> = p.names().filter(|n| n.starts_with("f.")).map(String::from).collect();
            for n in perturbed {
                p.get_mut(&n)?.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
            }
            grad_check(&p, seed, |t, p| {
                let coarse = RpnPrediction {
                    objectness: p.bind(t, "co")?,
                    box_deltas: p.bind(t, "cb")?,
                };
                let finer = RpnPrediction {
                    objectness: p.bind(t, "fo")?,
                    box_deltas: p.bind(t, "fb")?,
                };
                let fused = fuse_predictions(t, p, &layers, coarse, finer)?;
                let o = t.sum(fused.objectness);
                let b = t.scale(fused.box_deltas, 0.5);
                let b = t.sum(b);
                let both = t.add(o, b)?;
                let lo = t.mul(fused.objectness, fused.objectness)?;
                let lo = t.sum(lo);
                t.weighted_sum(&[(both, 1.0), (lo, 0.25)])
            })
        }
        other => panic!("unknown op {other}"),
    }
}

pub const GRAD_OPS: [&str; 8] = [
    "conv",
    "dilated_conv",
    "deconv",
    "l2norm_scale",
    "softmax_xent",
    "smooth_l1",
    "psroi_pool",
    "fusion",
];

/// Worst relative error per op over `trials` seeded trials.
pub fn gradient_suite(trials: u64) -> Vec<(&'static str, f64)> {
    GRAD_OPS
        .iter()
        .map(|&op| {
            let worst = (0..trials)
                .map(|s| grad_trial(op, 1000 + s).unwrap_or_else(|e| panic!("{op} trial {s}: {e}")))
                .fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}
