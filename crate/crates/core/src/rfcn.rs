//! Region classification with cross-layer position-sensitive RoI pooling.
//!
//! Each pyramid level carries `k^2 (C + 1)` class score maps and `4 k^2`
//! box maps. For bin `(i, j)` of an RoI, every level averages its own
//! `(i, j)` channel group over the pixels of that bin (bin edges are the
//! RoI scaled by `1 / stride`, floored at the start and ceiled at the end);
//! the per-level averages are then summed across levels. Empty bins add 0.

use rand::Rng;

use crate::boxes::{encode_box, BBox};
use crate::error::{Error, Result};
use crate::layers::{softmax, ConvGeometry, ConvLayer};
use crate::params::ModelParams;
use crate::rpn::subsample;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Bins per RoI axis.
    pub k: usize,
    /// Foreground classes; background is class 0.
    pub classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { k: 3, classes: 4 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.classes == 0 {
            return Err(Error::invalid("head_config", format!("k and C must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.k * self.k
    }

    pub fn class_channels(&self) -> usize {
        self.bins() * (self.classes + 1)
    }

    pub fn box_channels(&self) -> usize {
        self.bins() * 4
    }

    /// Score-map channel of bin `(i, j)` (row, column) and group entry `g`.
    pub fn channel(&self, i: usize, j: usize, groups: usize, g: usize) -> usize {
        (i * self.k + j) * groups + g
    }
}

/// Pixel span `[y0, y1) x [x0, x1)` of bin `(i, j)` of `roi` on a level of
/// size `h x w` and the given stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinSpan {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BinSpan {
    pub fn of(roi: &BBox, stride: f64, k: usize, i: usize, j: usize, h: usize, w: usize) -> BinSpan {
        let bin_h = roi.height() / stride / k as f64;
        let bin_w = roi.width() / stride / k as f64;
        let ry = roi.y_min / stride;
        let rx = roi.x_min / stride;
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        BinSpan {
            y0: clamp((ry + i as f64 * bin_h).floor(), h),
            y1: clamp((ry + (i + 1) as f64 * bin_h).ceil(), h),
            x0: clamp((rx + j as f64 * bin_w).floor(), w),
            x1: clamp((rx + (j + 1) as f64 * bin_w).ceil(), w),
        }
    }

    pub fn count(&self) -> usize {
        self.y1.saturating_sub(self.y0) * self.x1.saturating_sub(self.x0)
    }
}

/// Pools one level into `out` (rois, groups, k, k), accumulating.
fn pool_level(map: &Tensor, stride: f64, rois: &[BBox], k: usize, groups: usize, out: &mut [f64]) {
    let s = map.shape();
    let plane = s.plane();
    for (r, roi) in rois.iter().enumerate() {
        for i in 0..k {
            for j in 0..k {
                let span = BinSpan::of(roi, stride, k, i, j, s.h, s.w);
                let n = span.count();
                if n == 0 {
                    continue;
                }
                for g in 0..groups {
                    let ch = (i * k + j) * groups + g;
                    let chan = &map.data()[ch * plane..(ch + 1) * plane];
                    let mut acc = 0.0;
                    for y in span.y0..span.y1 {
                        acc += chan[y * s.w + span.x0..y * s.w + span.x1].iter().sum::<f64>();
                    }
                    out[((r * groups + g) * k + i) * k + j] += acc / n as f64;
                }
            }
        }
    }
}

fn check_levels(levels: &[(&Tensor, f64)], k: usize, groups: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::invalid("psroi_pool", "no score-map levels"));
    }
    for (map, stride) in levels {
        let s = map.shape();
        if s.n != 1 || s.c != k * k * groups || *stride <= 0.0 {
            return Err(Error::invalid(
                "psroi_pool",
                format!("level {s} (stride {stride}) does not hold {k}x{k}x{groups} channels"),
            ));
        }
    }
    Ok(())
}

/// Cross-layer PSRoI pooling on raw tensors. Output is (rois, groups, k, k).
pub fn psroi_pool_forward(levels: &[(&Tensor, f64)], rois: &[BBox], k: usize, groups: usize) -> Result<Tensor> {
    check_levels(levels, k, groups)?;
    let mut out = Tensor::zeros(Shape::new(rois.len(), groups, k, k));
    for (map, stride) in levels {
        if cfg!(debug_assertions) {
            let s = map.shape();
            for roi in rois {
                if roi.x_min / stride >= s.w as f64 || roi.y_min / stride >= s.h as f64 || roi.x_max <= 0.0 || roi.y_max <= 0.0 {
                    log::debug!("roi {roi} falls outside a {}x{} level", s.h, s.w);
                }
            }
        }
        pool_level(map, *stride, rois, k, groups, out.data_mut());
    }
    Ok(out)
}

struct PsRoiRule {
    rois: Vec<BBox>,
    strides: Vec<f64>,
    k: usize,
    groups: usize,
}

impl Backward for PsRoiRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (k, groups) = (self.k, self.groups);
        let mut grads = Vec::with_capacity(inputs.len());
        for ((map, &stride), &need) in inputs.iter().zip(&self.strides).zip(needs) {
            if !need {
                grads.push(None);
                continue;
            }
            let s = map.shape();
            let plane = s.plane();
            let mut d = Tensor::zeros(s);
            for (r, roi) in self.rois.iter().enumerate() {
                for i in 0..k {
                    for j in 0..k {
                        let span = BinSpan::of(roi, stride, k, i, j, s.h, s.w);
                        let n = span.count();
                        if n == 0 {
                            continue;
                        }
                        for g in 0..groups {
                            let up = grad.data()[((r * groups + g) * k + i) * k + j] / n as f64;
                            let ch = (i * k + j) * groups + g;
                            let chan = &mut d.data_mut()[ch * plane..(ch + 1) * plane];
                            for y in span.y0..span.y1 {
                                for v in &mut chan[y * s.w + span.x0..y * s.w + span.x1] {
                                    *v += up;
                                }
                            }
                        }
                    }
                }
            }
            grads.push(Some(d));
        }
        Ok(grads)
    }
}

/// Records cross-layer PSRoI pooling over `levels` (map, stride).
pub fn psroi_pool_op(tape: &mut Tape, levels: &[(Var, f64)], rois: &[BBox], k: usize, groups: usize) -> Result<Var> {
    let out = {
        let vals: Vec<(&Tensor, f64)> = levels.iter().map(|&(v, s)| (tape.value(v), s)).collect();
        psroi_pool_forward(&vals, rois, k, groups)?
    };
    let rule = PsRoiRule {
        rois: rois.to_vec(),
        strides: levels.iter().map(|l| l.1).collect(),
        k,
        groups,
    };
    Ok(tape.push("psroi_pool", out, levels.iter().map(|l| l.0).collect(), Box::new(rule)))
}

/// Per-level class and box score maps, each (1, channels, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps {
    pub stride: f64,
    pub class_maps: Tensor,
    pub box_maps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionSensitiveMaps {
    pub levels: Vec<LevelMaps>,
}

/// Pooled responses of one RoI: `classes[(i * k + j) * (C + 1) + c]` and
/// `boxes[(i * k + j) * 4 + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledScores {
    pub k: usize,
    pub classes: Vec<f64>,
    pub boxes: Vec<f64>,
}

impl PooledScores {
    pub fn class_response(&self, i: usize, j: usize, c: usize) -> f64 {
        let groups = self.classes.len() / (self.k * self.k);
        self.classes[(i * self.k + j) * groups + c]
    }
}

fn bin_major(pooled: &Tensor, k: usize, groups: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k * groups];
    for g in 0..groups {
        for i in 0..k {
            for j in 0..k {
                out[(i * k + j) * groups + g] = pooled.data()[(g * k + i) * k + j];
            }
        }
    }
    out
}

/// Pools one RoI from every level of `maps`.
pub fn psroi_pool(maps: &PositionSensitiveMaps, roi: &BBox, cfg: &HeadConfig) -> Result<PooledScores> {
    cfg.validate()?;
    roi.validate()?;
    let groups = cfg.classes + 1;
    let cls: Vec<(&Tensor, f64)> = maps.levels.iter().map(|l| (&l.class_maps, l.stride)).collect();
    let bx: Vec<(&Tensor, f64)> = maps.levels.iter().map(|l| (&l.box_maps, l.stride)).collect();
    let c = psroi_pool_forward(&cls, std::slice::from_ref(roi), cfg.k, groups)?;
    let b = psroi_pool_forward(&bx, std::slice::from_ref(roi), cfg.k, 4)?;
    Ok(PooledScores {
        k: cfg.k,
        classes: bin_major(&c, cfg.k, groups),
        boxes: bin_major(&b, cfg.k, 4),
    })
}

/// Class probabilities and box deltas voted from pooled bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Votes {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub deltas: [f64; 4],
}

/// Averages each class over the `k^2` bins, applies softmax, and averages
/// the pooled box responses per coordinate.
pub fn vote_and_classify(pooled: &PooledScores) -> Votes {
    let bins = pooled.k * pooled.k;
    let groups = pooled.classes.len() / bins;
    let mut scores = vec![0.0; groups];
    for bin in pooled.classes.chunks(groups) {
        for (s, v) in scores.iter_mut().zip(bin) {
            *s += v;
        }
    }
    scores.iter_mut().for_each(|s| *s /= bins as f64);
    let mut deltas = [0.0; 4];
    for bin in pooled.boxes.chunks(4) {
        for (d, v) in deltas.iter_mut().zip(bin) {
            *d += v;
        }
    }
    deltas.iter_mut().for_each(|d| *d /= bins as f64);
    Votes {
        probabilities: softmax(&scores),
        scores,
        deltas,
    }
}

/// Per-level 1x1 convolutions producing the class and box score maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMapLayers {
    pub class_conv: ConvLayer,
    pub box_conv: ConvLayer,
}

impl ScoreMapLayers {
    pub fn new(name: &str, in_channels: usize, cfg: &HeadConfig) -> Self {
        let g = ConvGeometry::square(1, 1, 0, 1);
        ScoreMapLayers {
            class_conv: ConvLayer::new(format!("{name}.ps_cls"), in_channels, cfg.class_channels(), g),
            box_conv: ConvLayer::new(format!("{name}.ps_box"), in_channels, cfg.box_channels(), g),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.class_conv.init(params, rng, 0.1)?;
        self.box_conv.init(params, rng, 0.1)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<(Var, Var)> {
        Ok((
            self.class_conv.forward(tape, params, x)?,
            self.box_conv.forward(tape, params, x)?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAssignConfig {
    pub foreground_iou: f64,
    pub background_low: f64,
    pub batch: usize,
    pub foreground_fraction: f64,
}

impl Default for RoiAssignConfig {
    fn default() -> Self {
        RoiAssignConfig {
            foreground_iou: 0.5,
            background_low: 0.1,
            batch: 128,
            foreground_fraction: 0.25,
        }
    }
}

/// Sampled RoI minibatch. `labels[r]` is 0 for background; `positives`
/// indexes into `rois` and pairs with class-agnostic `deltas`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<BBox>,
    pub labels: Vec<usize>,
    pub positives: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Best gt (index, IoU) of each proposal; `None` without gts.
pub fn best_matches(proposals: &[BBox], gts: &[BBox]) -> Vec<Option<(usize, f64)>> {
    proposals
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .map(|(g, gt)| (g, p.iou(gt)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
        })
        .collect()
}

/// Labels proposals foreground (IoU >= `foreground_iou`, class of the best
/// gt) or background (IoU in `[background_low, foreground_iou)`; every
/// proposal when there are no gts), then samples at most `batch` with at
/// most `foreground_fraction` foreground.
pub fn assign_roi_targets(
    proposals: &[BBox],
    gts: &[BBox],
    gt_classes: &[usize],
    cfg: &RoiAssignConfig,
    rng: &mut impl Rng,
) -> Result<RoiTargets> {
    if gts.len() != gt_classes.len() {
        return Err(Error::invalid("assign_roi_targets", "gt boxes and classes differ in length"));
    }
    let matches = best_matches(proposals, gts);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, m) in matches.iter().enumerate() {
        match m {
            None => bg.push(i),
            Some((_, iou)) if *iou >= cfg.foreground_iou => fg.push(i),
            Some((_, iou)) if *iou >= cfg.background_low => bg.push(i),
            Some(_) => {}
        }
    }
    let max_fg = (cfg.batch as f64 * cfg.foreground_fraction).round() as usize;
    let fg = subsample(&fg, max_fg, rng);
    let bg = subsample(&bg, cfg.batch - fg.len(), rng);
    let mut out = RoiTargets::default();
    for &i in &fg {
        let (g, _) = matches[i].expect("foreground has a match");
        out.positives.push(out.rois.len());
        out.rois.push(proposals[i]);
        out.labels.push(gt_classes[g]);
        out.deltas.push(encode_box(&proposals[i], &gts[g])?);
    }
    for &i in &bg {
        out.rois.push(proposals[i]);
        out.labels.push(0);
    }
    Ok(out)
}
