//! The two-stage detector: backbone, multi-scale RPN and the cross-layer
//! position-sensitive head, plus inference.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{pad_to_stride, Backbone, BackboneConfig, FeaturePyramid, INPUT_ALIGN, LEVEL_STRIDES};
use crate::boxes::{decode_box, nms, BBox};
use crate::error::{Error, Result};
use crate::layers::norm::DEFAULT_SCALE;
use crate::layers::PredictionHead;
use crate::params::ModelParams;
use crate::rfcn::{psroi_pool_forward, vote_and_classify, HeadConfig, PooledScores, ScoreMapLayers};
use crate::rpn::{decode_proposals, fuse_predictions, generate_anchors, AnchorSet, FusionLayers, Proposal, ProposalConfig, RpnPrediction};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub anchors: AnchorSet,
    /// Width of the 3x3 conv in each RPN prediction head.
    pub rpn_channels: usize,
    /// Use only C5 for proposals and pooling (the single-scale baseline).
    pub single_scale: bool,
    /// Per-channel means subtracted from [0, 1] pixel values.
    pub means: Vec<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            anchors: AnchorSet::default(),
            rpn_channels: 32,
            single_scale: false,
            means: vec![0.5],
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if self.means.len() != self.backbone.in_channels {
            return Err(Error::invalid(
                "model_config",
                format!("{} means for {} input channels", self.means.len(), self.backbone.in_channels),
            ));
        }
        if self.rpn_channels == 0 || self.anchors.per_cell() == 0 || self.anchors.base_size <= 0.0 {
            return Err(Error::invalid("model_config", "empty RPN head or anchor set"));
        }
        Ok(())
    }

    /// Indices (0 = C3) of the pyramid levels in use.
    pub fn levels(&self) -> Vec<usize> {
        if self.single_scale {
            vec![2]
        } else {
            vec![0, 1, 2]
        }
    }

    /// Stride of the grid the RPN predicts on.
    pub fn rpn_stride(&self) -> usize {
        if self.single_scale {
            LEVEL_STRIDES[2]
        } else {
            LEVEL_STRIDES[0]
        }
    }

    /// The same model restricted to C5 predictions.
    pub fn single_scale_variant(&self) -> ModelConfig {
        ModelConfig {
            single_scale: true,
            ..self.clone()
        }
    }
}

/// Values produced by one forward pass that later stages consume.
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub rpn: RpnPrediction,
    /// Class and box score maps per active level, with stride.
    pub score_maps: Vec<(Var, Var, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// Prediction heads of the active levels, finest first.
    pub rpn_heads: Vec<PredictionHead>,
    /// Upsampling for P5 -> P4 and (P5 + P4) -> P3.
    pub fusion: Vec<FusionLayers>,
    pub score_layers: Vec<ScoreMapLayers>,
    pub params: ModelParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Model {
    /// Builds and randomly initialises a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::with_levels(config.backbone.clone(), &config.levels())?;
        let channels = config.backbone.level_channels();
        let a = config.anchors.per_cell();
        let mut rpn_heads = Vec::new();
        let mut score_layers = Vec::new();
        for level in config.levels() {
            let name = format!("p{}", level + 3);
            rpn_heads.push(PredictionHead::new(&format!("rpn.{name}"), channels[level], config.rpn_channels, 2 * a, 4 * a));
            score_layers.push(ScoreMapLayers::new(&format!("rfcn.{name}"), channels[level], &config.head));
        }
        let fusion = if config.single_scale {
            Vec::new()
        } else {
            vec![FusionLayers::new("rpn.fuse54", a), FusionLayers::new("rpn.fuse43", a)]
        };
        let mut params = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        backbone.init(&mut params, &mut rng, DEFAULT_SCALE)?;
        for head in &rpn_heads {
            head.init(&mut params, &mut rng)?;
        }
        for f in &fusion {
            f.init(&mut params)?;
        }
        for s in &score_layers {
            s.init(&mut params, &mut rng)?;
        }
        Ok(Model {
            config,
            backbone,
            rpn_heads,
            fusion,
            score_layers,
            params,
        })
    }

    /// Rebuilds the architecture for `config` around existing parameters.
    pub fn with_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let mut model = Model::new(config)?;
        let expected: Vec<&str> = model.params.names().collect();
        let given: Vec<&str> = params.names().collect();
        if expected != given {
            return Err(Error::Data("checkpoint parameters do not match the model configuration".into()));
        }
        for (name, t) in params.iter() {
            if model.params.get(name)?.shape() != t.shape() {
                return Err(Error::Data(format!("parameter `{name}` has shape {}", t.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.config.anchors.per_cell()
    }

    /// Scales 8-bit-range pixels in [0, 1] and subtracts channel means.
    pub fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.c != self.config.means.len() {
            return Err(Error::invalid(
                "normalize",
                format!("image has {} channels, model expects {}", s.c, self.config.means.len()),
            ));
        }
        let plane = s.plane();
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v -= self.config.means[(i / plane) % s.c];
        }
        Ok(out)
    }

    /// Backbone, RPN heads with coarse-to-fine fusion, and score maps.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<ForwardOutput> {
        let params = &self.params;
        let pyramid = self.backbone.forward(tape, params, image)?;
        let levels = self.config.levels();
        let mut preds = Vec::with_capacity(levels.len());
        let mut score_maps = Vec::with_capacity(levels.len());
        for ((&level, head), scores) in levels.iter().zip(&self.rpn_heads).zip(&self.score_layers) {
            let feat = pyramid.n[level].expect("active levels are normalised");
            let (obj, bx) = head.forward(tape, params, feat)?;
            preds.push(RpnPrediction {
                objectness: obj,
                box_deltas: bx,
            });
            let (cls, reg) = scores.forward(tape, params, feat)?;
            score_maps.push((cls, reg, LEVEL_STRIDES[level] as f64));
        }
        let rpn = if self.config.single_scale {
            preds[0]
        } else {
            let p45 = fuse_predictions(tape, params, &self.fusion[0], preds[2], preds[1])?;
            fuse_predictions(tape, params, &self.fusion[1], p45, preds[0])?
        };
        Ok(ForwardOutput {
            pyramid,
            rpn,
            score_maps,
        })
    }

    /// Runs inference on one unnormalised image (values in [0, 1]).
    pub fn detect(&self, image: &Tensor, score_thresh: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let mut cache = AnchorCache::default();
        self.detect_cached(image, score_thresh, nms_iou, &mut cache)
    }

    pub fn detect_cached(&self, image: &Tensor, score_thresh: f64, nms_iou: f64, cache: &mut AnchorCache) -> Result<Vec<Detection>> {
        if image.shape().n != 1 {
            return Err(Error::invalid("detect", "expects a single image"));
        }
        let padded = pad_to_stride(&self.normalize(image)?, INPUT_ALIGN);
        let mut tape = Tape::inference();
        let input = tape.constant(padded.tensor.clone());
        let out = self.forward(&mut tape, input)?;
        let obj = tape.value(out.rpn.objectness);
        let grid = obj.shape();
        let anchors = cache.get(grid.h, grid.w, self.config.rpn_stride(), &self.config.anchors)?;
        let size = (padded.width as f64, padded.height as f64);
        let proposals = decode_proposals(
            obj,
            tape.value(out.rpn.box_deltas),
            anchors,
            self.anchors_per_cell(),
            size,
            &ProposalConfig::INFERENCE,
        )?;
        let cls: Vec<(&Tensor, f64)> = out.score_maps.iter().map(|m| (tape.value(m.0), m.2)).collect();
        let reg: Vec<(&Tensor, f64)> = out.score_maps.iter().map(|m| (tape.value(m.1), m.2)).collect();
        classify_proposals(&cls, &reg, &proposals, &self.config.head, size, score_thresh, nms_iou)
    }
}

/// Memoised anchor grids keyed by (h, w, stride).
#[derive(Default)]
pub struct AnchorCache {
    grids: HashMap<(usize, usize, usize), Vec<BBox>>,
}

impl AnchorCache {
    pub fn get(&mut self, h: usize, w: usize, stride: usize, cfg: &AnchorSet) -> Result<&[BBox]> {
        let key = (h, w, stride);
        if !self.grids.contains_key(&key) {
            self.grids.insert(key, generate_anchors(h, w, stride as f64, cfg)?);
        }
        Ok(&self.grids[&key])
    }
}

/// Pools, votes and post-processes proposals into final detections.
///
/// Boxes are regressed from their proposal, clipped to `image_size`
/// (width, height), kept when a foreground probability reaches
/// `score_thresh`, and suppressed per class at `nms_iou`.
pub fn classify_proposals(
    class_maps: &[(&Tensor, f64)],
    box_maps: &[(&Tensor, f64)],
    proposals: &[Proposal],
    head: &HeadConfig,
    image_size: (f64, f64),
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let groups = head.classes + 1;
    let k = head.k;
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let cls = psroi_pool_forward(class_maps, &rois, k, groups)?;
    let reg = psroi_pool_forward(box_maps, &rois, k, 4)?;
    let per_roi_cls = groups * k * k;
    let per_roi_reg = 4 * k * k;
    let mut by_class: Vec<Vec<Detection>> = vec![Vec::new(); groups];
    for (r, roi) in rois.iter().enumerate() {
        let pooled = PooledScores {
            k,
            classes: to_bin_major(&cls.data()[r * per_roi_cls..(r + 1) * per_roi_cls], k, groups),
            boxes: to_bin_major(&reg.data()[r * per_roi_reg..(r + 1) * per_roi_reg], k, 4),
        };
        let votes = vote_and_classify(&pooled);
        let bbox = decode_box(roi, &votes.deltas)?.clip(image_size.0, image_size.1);
        if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
            continue;
        }
        for (c, &p) in votes.probabilities.iter().enumerate().skip(1) {
            if p >= score_thresh && p > 0.0 {
                by_class[c].push(Detection {
                    bbox,
                    class_id: c,
                    score: p,
                });
            }
        }
    }
    let mut out = Vec::new();
    for dets in by_class {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        out.extend(nms(&boxes, &scores, nms_iou).into_iter().map(|i| dets[i]));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class_id.cmp(&b.class_id)));
    Ok(out)
}

/// (groups, k, k) block to `(i * k + j) * groups + g` order.
fn to_bin_major(block: &[f64], k: usize, groups: usize) -> Vec<f64> {
    let mut out = vec![0.0; block.len()];
    for g in 0..groups {
        for b in 0..k * k {
            out[b * groups + g] = block[g * k * k + b];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    pub(crate) fn tiny_config(single_scale: bool) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                widths: [4, 4, 6, 6, 8],
                blocks: [1, 1, 1, 1, 1],
            },
            head: HeadConfig { k: 2, classes: 2 },
            anchors: AnchorSet {
                base_size: 8.0,
                scales: vec![1.0, 2.0],
                ratios: vec![1.0],
            },
            rpn_channels: 4,
            single_scale,
            means: vec![0.5],
            seed: 3,
        }
    }

    #[test]
    fn fused_rpn_grid_is_stride_four() {
        let model = Model::new(tiny_config(false)).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::zeros(Shape::new(1, 1, 64, 48)));
        let out = model.forward(&mut tape, img).unwrap();
        let s = tape.shape(out.rpn.objectness);
        assert_eq!((s.h, s.w), (16, 12));
        assert_eq!(s.c, 2 * model.anchors_per_cell());
        assert_eq!(out.score_maps.len(), 3);
    }

    #[test]
    fn single_scale_uses_c5_only() {
        let model = Model::new(tiny_config(true)).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::zeros(Shape::new(1, 1, 64, 48)));
        let out = model.forward(&mut tape, img).unwrap();
        let s = tape.shape(out.rpn.objectness);
        assert_eq!((s.h, s.w), (4, 3));
        assert_eq!(out.score_maps.len(), 1);
        assert!(model.params.names().all(|n| !n.contains("p3") && !n.contains("p4") && !n.contains("fuse")));
    }

    #[test]
    fn threshold_one_yields_nothing() {
        let model = Model::new(tiny_config(false)).unwrap();
        let img = Tensor::from_fn(Shape::new(1, 1, 40, 40), |_, _, y, x| ((x * y) % 7) as f64 / 7.0);
        assert!(model.detect(&img, 1.0, 0.3).unwrap().is_empty());
    }

    #[test]
    fn planted_maps_emit_exactly_one_detection() {
        let head = HeadConfig { k: 2, classes: 2 };
        let groups = head.classes + 1;
        let target = BBox::new(16.0, 16.0, 32.0, 32.0);
        // Stride-4 level: class 1 strongly positive inside the target, background elsewhere.
        let cls = Tensor::from_fn(Shape::new(1, head.class_channels(), 16, 16), |_, ch, y, x| {
            let g = ch % groups;
            let inside = (4..8).contains(&y) && (4..8).contains(&x);
            match (g, inside) {
                (1, true) => 30.0,
                (0, false) => 30.0,
                _ => 0.0,
            }
        });
        let reg = Tensor::zeros(Shape::new(1, head.box_channels(), 16, 16));
        let proposals = vec![
            Proposal { bbox: target, score: 0.9 },
            Proposal { bbox: BBox::new(40.0, 40.0, 56.0, 56.0), score: 0.8 },
            Proposal { bbox: BBox::new(0.0, 40.0, 12.0, 60.0), score: 0.7 },
        ];
        let dets = classify_proposals(&[(&cls, 4.0)], &[(&reg, 4.0)], &proposals, &head, (64.0, 64.0), 0.5, 0.3).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[0].bbox, target);
        assert!(dets[0].score > 0.999);
    }
}
