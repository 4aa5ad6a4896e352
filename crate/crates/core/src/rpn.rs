//! Multi-scale region proposal network: anchors, coarse-to-fine fusion of
//! per-level predictions, proposal decoding and anchor target assignment.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;

use crate::boxes::{decode_box, encode_box, nms, BBox};
use crate::error::{Error, Result};
use crate::layers::{softmax, DeconvLayer};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anchor shapes tiled over a feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub base_size: f64,
    pub scales: Vec<f64>,
    /// Height-to-width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            base_size: 8.0,
            scales: vec![1.0, 2.0, 4.0, 8.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors for an `h x w` grid with the given stride, ordered by row-major
/// cell, then scale, then ratio. Each anchor is centred on its cell centre
/// and keeps area `(base * scale)^2` across ratios.
pub fn generate_anchors(h: usize, w: usize, stride: f64, cfg: &AnchorSet) -> Result<Vec<BBox>> {
    if cfg.scales.is_empty() || cfg.ratios.is_empty() {
        return Err(Error::invalid("generate_anchors", "scales and ratios must be non-empty"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("generate_anchors", "grid must be non-empty"));
    }
    let mut shapes = Vec::with_capacity(cfg.per_cell());
    for &scale in &cfg.scales {
        for &ratio in &cfg.ratios {
            let side = cfg.base_size * scale;
            shapes.push((side / ratio.sqrt(), side * ratio.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(h * w * shapes.len());
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            out.extend(shapes.iter().map(|&(aw, ah)| BBox::from_center(cx, cy, aw, ah)));
        }
    }
    Ok(out)
}

/// Dense objectness logits (1, 2A, H, W) and box deltas (1, 4A, H, W).
/// Channel `2a` is background and `2a + 1` object for anchor `a`; box deltas
/// for anchor `a` occupy channels `4a .. 4a + 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RpnPrediction {
    pub objectness: Var,
    pub box_deltas: Var,
}

/// Upsampling layers used when merging a coarse prediction into a finer one.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayers {
    pub objectness: DeconvLayer,
    pub box_deltas: DeconvLayer,
}

impl FusionLayers {
    pub fn new(name: &str, anchors_per_cell: usize) -> Self {
        FusionLayers {
            objectness: DeconvLayer::new(format!("{name}.up_cls"), 2 * anchors_per_cell, 2),
            box_deltas: DeconvLayer::new(format!("{name}.up_box"), 4 * anchors_per_cell, 2),
        }
    }

    pub fn init(&self, params: &mut ModelParams) -> Result<()> {
        self.objectness.init(params)?;
        self.box_deltas.init(params)
    }
}

/// `upsample(coarse, 2) + finer` on both prediction maps.
pub fn fuse_predictions(
    tape: &mut Tape,
    params: &ModelParams,
    layers: &FusionLayers,
    coarse: RpnPrediction,
    finer: RpnPrediction,
) -> Result<RpnPrediction> {
    for (c, f) in [(coarse.objectness, finer.objectness), (coarse.box_deltas, finer.box_deltas)] {
        let (cs, fs) = (tape.shape(c), tape.shape(f));
        if cs.c != fs.c || cs.h * 2 != fs.h || cs.w * 2 != fs.w || cs.n != fs.n {
            return Err(Error::ShapeMismatch {
                op: "fuse_predictions",
                left: cs,
                right: fs,
            });
        }
    }
    let up_obj = layers.objectness.forward(tape, params, coarse.objectness)?;
    let up_box = layers.box_deltas.forward(tape, params, coarse.box_deltas)?;
    Ok(RpnPrediction {
        objectness: tape.add(up_obj, finer.objectness)?,
        box_deltas: tape.add(up_box, finer.box_deltas)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_iou: f64,
    pub min_side: f64,
}

impl ProposalConfig {
    pub const TRAIN: ProposalConfig = ProposalConfig {
        pre_nms: 2000,
        post_nms: 300,
        nms_iou: 0.7,
        min_side: 1.0,
    };

    pub const INFERENCE: ProposalConfig = ProposalConfig {
        pre_nms: 2000,
        post_nms: 300,
        nms_iou: 0.5,
        min_side: 1.0,
    };
}

/// Object probability of every anchor, in anchor order.
pub fn objectness_scores(objectness: &Tensor, anchors_per_cell: usize) -> Vec<f64> {
    let s = objectness.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(plane * anchors_per_cell);
    for cell in 0..plane {
        for a in 0..anchors_per_cell {
            let bg = objectness.data()[(2 * a) * plane + cell];
            let fg = objectness.data()[(2 * a + 1) * plane + cell];
            out.push(softmax(&[bg, fg])[1]);
        }
    }
    out
}

/// Box deltas of every anchor, in anchor order.
pub fn anchor_deltas(box_deltas: &Tensor, anchors_per_cell: usize) -> Vec<[f64; 4]> {
    let plane = box_deltas.shape().plane();
    let mut out = Vec::with_capacity(plane * anchors_per_cell);
    for cell in 0..plane {
        for a in 0..anchors_per_cell {
            let d = |k: usize| box_deltas.data()[(4 * a + k) * plane + cell];
            out.push([d(0), d(1), d(2), d(3)]);
        }
    }
    out
}

/// Decodes, clips, filters, ranks and suppresses anchor predictions.
pub fn decode_proposals(
    objectness: &Tensor,
    box_deltas: &Tensor,
    anchors: &[BBox],
    anchors_per_cell: usize,
    image_size: (f64, f64),
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let count = objectness.shape().plane() * anchors_per_cell;
    if count != anchors.len() || box_deltas.shape().plane() * anchors_per_cell != anchors.len() {
        return Err(Error::invalid(
            "decode_proposals",
            format!("prediction grid holds {count} anchors, got {}", anchors.len()),
        ));
    }
    let scores = objectness_scores(objectness, anchors_per_cell);
    let deltas = anchor_deltas(box_deltas, anchors_per_cell);
    let (iw, ih) = image_size;
    let mut candidates: Vec<Proposal> = Vec::with_capacity(anchors.len());
    for ((anchor, d), &score) in anchors.iter().zip(&deltas).zip(&scores) {
        let b = decode_box(anchor, d)?.clip(iw, ih);
        if b.width() >= cfg.min_side && b.height() >= cfg.min_side {
            candidates.push(Proposal { bbox: b, score });
        }
    }
    // Stable sort keeps anchor order among equal scores.
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates.truncate(cfg.pre_nms);
    let boxes: Vec<BBox> = candidates.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = candidates.iter().map(|p| p.score).collect();
    let mut keep = nms(&boxes, &scores, cfg.nms_iou);
    keep.truncate(cfg.post_nms);
    Ok(keep.into_iter().map(|i| candidates[i]).collect())
}

/// Writes proposals as `image_id,x_min,y_min,x_max,y_max,score`.
pub fn write_proposals_csv<W: Write>(out: &mut W, image_id: &str, proposals: &[Proposal], header: bool) -> Result<()> {
    if header {
        writeln!(out, "image_id,x_min,y_min,x_max,y_max,score")?;
    }
    for p in proposals {
        writeln!(
            out,
            "{image_id},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.bbox.x_min, p.bbox.y_min, p.bbox.x_max, p.bbox.y_max, p.score
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorAssignConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch: usize,
    pub positive_fraction: f64,
}

impl Default for AnchorAssignConfig {
    fn default() -> Self {
        AnchorAssignConfig {
            positive_iou: 0.7,
            negative_iou: 0.3,
            batch: 256,
            positive_fraction: 0.5,
        }
    }
}

/// Labels anchors: positive at IoU >= `positive_iou` with some gt or when
/// the anchor attains a gt's best IoU; negative below `negative_iou`;
/// ignored otherwise. Positives take the gt of highest IoU.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], cfg: &AnchorAssignConfig) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = a.iou(gt);
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = g;
            }
            if iou > gt_best[g] {
                gt_best[g] = iou;
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best_iou
        .iter()
        .zip(&best_gt)
        .map(|(&iou, &g)| {
            if iou >= cfg.positive_iou {
                AnchorLabel::Positive { gt: g }
            } else if iou < cfg.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (i, a) in anchors.iter().enumerate() {
        if matches!(labels[i], AnchorLabel::Positive { .. }) {
            continue;
        }
        for (g, gt) in gts.iter().enumerate() {
            if gt_best[g] > 0.0 && a.iou(gt) == gt_best[g] {
                labels[i] = AnchorLabel::Positive { gt: best_gt[i] };
                break;
            }
        }
    }
    labels
}

/// A sampled RPN minibatch: anchor indices with binary labels, and
/// regression targets for the positive subset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    pub sampled: Vec<usize>,
    pub labels: Vec<usize>,
    pub positives: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Labels anchors and samples up to `cfg.batch` of them at most
/// `positive_fraction` positive.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gts: &[BBox],
    cfg: &AnchorAssignConfig,
    rng: &mut impl Rng,
) -> Result<RpnTargets> {
    let labels = label_anchors(anchors, gts, cfg);
    let pos: Vec<usize> = (0..anchors.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive { .. }))
        .collect();
    let neg: Vec<usize> = (0..anchors.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let max_pos = (cfg.batch as f64 * cfg.positive_fraction) as usize;
    let pos = subsample(&pos, max_pos, rng);
    let neg = subsample(&neg, cfg.batch - pos.len(), rng);
    let mut out = RpnTargets::default();
    for &i in &pos {
        let AnchorLabel::Positive { gt } = labels[i] else { unreachable!() };
        out.sampled.push(i);
        out.labels.push(1);
        out.positives.push(i);
        out.deltas.push(encode_box(&anchors[i], &gts[gt])?);
    }
    for &i in &neg {
        out.sampled.push(i);
        out.labels.push(0);
    }
    Ok(out)
}

/// Random subset of at most `n` items, returned in ascending order.
pub(crate) fn subsample(items: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, items.len(), n).into_iter().map(|i| items[i]).collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_anchor_is_centred() {
        let cfg = AnchorSet {
            base_size: 8.0,
            scales: vec![1.0],
            ratios: vec![1.0],
        };
        let a = generate_anchors(1, 1, 4.0, &cfg).unwrap();
        assert_eq!(a, vec![BBox::new(-2.0, -2.0, 6.0, 6.0)]);
    }

    #[test]
    fn anchor_count_and_area() {
        let cfg = AnchorSet::default();
        let a = generate_anchors(3, 5, 4.0, &cfg).unwrap();
        assert_eq!(a.len(), 3 * 5 * 4 * 3);
        let (r1, r2) = (a[1], a[2]);
        assert!((r2.height() / r2.width() - 2.0).abs() < 1e-12);
        assert!((r1.area() - r2.area()).abs() < 1e-9);
        assert!(generate_anchors(
            2,
            2,
            4.0,
            &AnchorSet {
                scales: vec![],
                ..AnchorSet::default()
            }
        )
        .is_err());
    }

    #[test]
    fn zero_deltas_return_ranked_anchors() {
        let cfg = AnchorSet {
            base_size: 4.0,
            scales: vec![1.0],
            ratios: vec![1.0],
        };
        let anchors = generate_anchors(2, 2, 8.0, &cfg).unwrap();
        let obj = Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 2.0, 0.5]).unwrap();
        let deltas = Tensor::zeros(Shape::new(1, 4, 2, 2));
        let p = decode_proposals(&obj, &deltas, &anchors, 1, (16.0, 16.0), &ProposalConfig::INFERENCE).unwrap();
        let order: Vec<BBox> = p.iter().map(|p| p.bbox).collect();
        assert_eq!(order, vec![anchors[1], anchors[2], anchors[0], anchors[3]]);
        assert!(p.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn perfect_anchor_is_positive_with_zero_target() {
        let anchors = vec![BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(40.0, 40.0, 48.0, 48.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = assign_rpn_targets(&anchors, &[anchors[0]], &AnchorAssignConfig::default(), &mut rng).unwrap();
        assert_eq!(t.positives, vec![0]);
        assert_eq!(t.deltas, vec![[0.0; 4]]);
        assert_eq!(t.labels, vec![1, 0]);
    }

    #[test]
    fn best_anchor_is_positive_even_below_threshold() {
        let anchors = vec![BBox::new(0.0, 0.0, 8.0, 8.0), BBox::new(4.0, 4.0, 12.0, 12.0)];
        let gt = BBox::new(3.0, 3.0, 9.0, 9.0);
        let labels = label_anchors(&anchors, &[gt], &AnchorAssignConfig::default());
        assert!(anchors.iter().all(|a| a.iou(&gt) < 0.7));
        assert_eq!(labels[1], AnchorLabel::Positive { gt: 0 });
    }

    #[test]
    fn sampling_respects_batch_and_fraction() {
        let cfg = AnchorSet::default();
        let anchors = generate_anchors(16, 16, 4.0, &cfg).unwrap();
        let gts = vec![BBox::new(10.0, 10.0, 30.0, 30.0), BBox::new(30.0, 40.0, 38.0, 56.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = assign_rpn_targets(&anchors, &gts, &AnchorAssignConfig::default(), &mut rng).unwrap();
        assert_eq!(t.sampled.len(), 256);
        assert!(t.positives.len() <= 128 && !t.positives.is_empty());
        assert_eq!(t.positives.len(), t.deltas.len());
    }
}
