//! Joint end-to-end training: one loss over RPN and head terms, shared trunk.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{pad_to_stride, INPUT_ALIGN};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::layers::{gather_anchor_rows, smooth_l1, softmax_xent, spatial_mean};
use crate::model::{AnchorCache, Model};
use crate::rfcn::{assign_roi_targets, psroi_pool_op, RoiAssignConfig};
use crate::rpn::{assign_rpn_targets, decode_proposals, AnchorAssignConfig, ProposalConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_reg: 1.0,
            det_cls: 1.0,
            det_reg: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Iterations between learning-rate decays.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Linear ramp from 0 to `base_lr` over this many iterations.
    pub warmup: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub rpn: AnchorAssignConfig,
    pub roi: RoiAssignConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            base_lr: 1e-3,
            lr_decay_step: 2000,
            lr_decay_factor: 0.5,
            warmup: 0,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_weights: LossWeights::default(),
            rpn: AnchorAssignConfig::default(),
            roi: RoiAssignConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.lr_decay_step > 0
            && self.lr_decay_factor > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.rpn.batch > 0
            && self.roi.batch > 0;
        if !ok {
            return Err(Error::invalid("train_config", format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    /// Step-decayed learning rate with optional linear warm-up.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let decays = (iteration / self.lr_decay_step) as i32;
        let lr = self.base_lr * self.lr_decay_factor.powi(decays);
        if iteration < self.warmup {
            lr * (iteration + 1) as f64 / self.warmup as f64
        } else {
            lr
        }
    }
}

/// One training image with values in [0, 1] and its labelled boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub total: f64,
}

/// Builds the full loss graph for one image. Returns the total loss var
/// and the per-term values.
pub fn build_loss(
    model: &Model,
    tape: &mut Tape,
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    cache: &mut AnchorCache,
) -> Result<(Var, [f64; 4])> {
    let padded = pad_to_stride(&model.normalize(&sample.image)?, INPUT_ALIGN);
    let input = tape.constant(padded.tensor);
    let out = model.forward(tape, input)?;
    let a = model.anchors_per_cell();
    let grid = tape.shape(out.rpn.objectness);
    let anchors = cache.get(grid.h, grid.w, model.config.rpn_stride(), &model.config.anchors)?.to_vec();

    let rpn_t = assign_rpn_targets(&anchors, &sample.boxes, &cfg.rpn, rng)?;
    let logits = gather_anchor_rows(tape, out.rpn.objectness, a, 2, &rpn_t.sampled)?;
    let rpn_cls = softmax_xent(tape, logits, &rpn_t.labels)?;
    let rpn_reg = if rpn_t.positives.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let rows = gather_anchor_rows(tape, out.rpn.box_deltas, a, 4, &rpn_t.positives)?;
        let target = rows_tensor(&rpn_t.deltas);
        smooth_l1(tape, rows, target, 1.0 / rpn_t.positives.len() as f64)?
    };

    let size = (padded.width as f64, padded.height as f64);
    let mut proposals: Vec<BBox> = decode_proposals(
        tape.value(out.rpn.objectness),
        tape.value(out.rpn.box_deltas),
        &anchors,
        a,
        size,
        &ProposalConfig::TRAIN,
    )?
    .into_iter()
    .map(|p| p.bbox)
    .collect();
    proposals.extend_from_slice(&sample.boxes);
    let roi_t = assign_roi_targets(&proposals, &sample.boxes, &sample.classes, &cfg.roi, rng)?;

    let groups = model.config.head.classes + 1;
    let k = model.config.head.k;
    let cls_levels: Vec<(Var, f64)> = out.score_maps.iter().map(|m| (m.0, m.2)).collect();
    let pooled = psroi_pool_op(tape, &cls_levels, &roi_t.rois, k, groups)?;
    let votes = spatial_mean(tape, pooled);
    let det_cls = softmax_xent(tape, votes, &roi_t.labels)?;
    let det_reg = if roi_t.positives.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let reg_levels: Vec<(Var, f64)> = out.score_maps.iter().map(|m| (m.1, m.2)).collect();
        let pos_rois: Vec<BBox> = roi_t.positives.iter().map(|&i| roi_t.rois[i]).collect();
        let pooled = psroi_pool_op(tape, &reg_levels, &pos_rois, k, 4)?;
        let deltas = spatial_mean(tape, pooled);
        smooth_l1(tape, deltas, rows_tensor(&roi_t.deltas), 1.0 / pos_rois.len() as f64)?
    };

    let w = &cfg.loss_weights;
    let total = tape.weighted_sum(&[
        (rpn_cls, w.rpn_cls),
        (rpn_reg, w.rpn_reg),
        (det_cls, w.det_cls),
        (det_reg, w.det_reg),
    ])?;
    let terms = [rpn_cls, rpn_reg, det_cls, det_reg].map(|v| tape.value(v).item());
    Ok((total, terms))
}

fn rows_tensor(rows: &[[f64; 4]]) -> Tensor {
    let data = rows.iter().flatten().copied().collect();
    Tensor::from_vec(Shape::new(rows.len(), 4, 1, 1), data).expect("four values per row")
}

/// Trains `model` in place, one image per iteration, visiting images in a
/// seeded random order each epoch. Returns the per-iteration loss log.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    train_with_progress(model, data, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = AnchorCache::default();
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let sample = &data[order.pop().expect("refilled above")];
        let mut tape = Tape::new();
        let (loss, terms) = build_loss(model, &mut tape, sample, cfg, &mut rng, &mut cache)?;
        let total = tape.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: iteration + 1,
            });
        }
        tape.backward(loss).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iteration: iteration + 1,
            },
            other => other,
        })?;
        model.params.collect_grads(&tape)?;
        drop(tape);
        model.params.zero_fill_missing_grads();
        model.params.apply_weight_decay(cfg.weight_decay, |name| name.ends_with(".weight"));
        let lr = cfg.learning_rate(iteration);
        model.params.sgd_step(lr, cfg.momentum)?;
        let record = LossRecord {
            iteration: iteration + 1,
            lr,
            rpn_cls: terms[0],
            rpn_reg: terms[1],
            det_cls: terms[2],
            det_reg: terms[3],
            total,
        };
        progress(&record);
        log.push(record);
    }
    Ok(log)
}

pub fn write_loss_log<W: Write>(out: &mut W, log: &[LossRecord]) -> Result<()> {
    writeln!(out, "iteration,lr,rpn_cls,rpn_reg,det_cls,det_reg,total")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.lr, r.rpn_cls, r.rpn_reg, r.det_cls, r.det_reg, r.total
        )?;
    }
    Ok(())
}
