//! Fused multi-scale model versus the single-scale C5 baseline on the
//! synthetic benchmark: same data, same seeds, same schedule.

use std::io::Write;

use rayon::prelude::*;

use crate::data::synth::{generate, SizeSummary, SynthConfig, SynthImage, SMALL_HEIGHT};
use crate::error::Result;
use crate::eval::{evaluate_classes, mean_defined, ClassMetrics, DetectionRecord, EvalLevel, GroundTruth};
use crate::model::{AnchorCache, Model, ModelConfig};
use crate::train::{train_with_progress, LossRecord, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Generator settings; `images` is ignored in favour of the split sizes.
    pub synth: SynthConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for AblationConfig {
    /// 800 training and 200 test images, 5000 iterations at base lr 2e-3.
    fn default() -> Self {
        AblationConfig {
            synth: SynthConfig::default(),
            train_images: 800,
            test_images: 200,
            model: ModelConfig::default(),
            train: TrainConfig {
                base_lr: 2e-3,
                ..TrainConfig::default()
            },
            score_thresh: 0.05,
            nms_iou: 0.3,
        }
    }
}

/// Heights below 16 px, everything else ignored.
pub fn small_level() -> EvalLevel {
    EvalLevel::new("small", 1.0, Some(SMALL_HEIGHT as f64)).expect("valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub log: Vec<LossRecord>,
    pub detections: Vec<DetectionRecord>,
    pub overall: Vec<ClassMetrics>,
    pub small: Vec<ClassMetrics>,
}

impl VariantResult {
    pub fn overall_ap(&self) -> f64 {
        mean_defined(self.overall.iter().map(|m| m.ap)).unwrap_or(0.0)
    }

    pub fn small_ap(&self) -> f64 {
        mean_defined(self.small.iter().map(|m| m.ap)).unwrap_or(0.0)
    }

    pub fn overall_ar(&self) -> f64 {
        mean_defined(self.overall.iter().map(|m| m.ar)).unwrap_or(0.0)
    }

    pub fn small_ar(&self) -> f64 {
        mean_defined(self.small.iter().map(|m| m.ar)).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub train_summary: SizeSummary,
    pub test_summary: SizeSummary,
    pub fused: VariantResult,
    pub single: VariantResult,
}

pub fn to_samples(images: &[SynthImage]) -> Vec<Sample> {
    images
        .iter()
        .map(|im| Sample {
            image_id: im.image_id.clone(),
            image: im.raster.to_tensor(),
            boxes: im.objects.iter().map(|o| o.bbox()).collect(),
            classes: im.objects.iter().map(|o| o.class_id).collect(),
        })
        .collect()
}

/// Runs `model` over `samples` (in parallel, order preserved).
pub fn detect_all(model: &Model, samples: &[Sample], score_thresh: f64, nms_iou: f64) -> Result<Vec<DetectionRecord>> {
    let per_image: Vec<Vec<DetectionRecord>> = samples
        .par_iter()
        .map_init(AnchorCache::default, |cache, s| {
            Ok(model
                .detect_cached(&s.image, score_thresh, nms_iou, cache)?
                .into_iter()
                .map(|d| DetectionRecord {
                    image_id: s.image_id.clone(),
                    class_id: d.class_id,
                    score: d.score,
                    bbox: d.bbox,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Trains one variant and evaluates it overall and on small objects.
pub fn run_variant(
    name: &str,
    model_cfg: ModelConfig,
    cfg: &AblationConfig,
    train: &[Sample],
    test: &[Sample],
    progress: &mut impl FnMut(&str, &LossRecord),
) -> Result<VariantResult> {
    let mut model = Model::new(model_cfg)?;
    let log = train_with_progress(&mut model, train, &cfg.train, |r| progress(name, r))?;
    let detections = detect_all(&model, test, cfg.score_thresh, cfg.nms_iou)?;
    let gts: Vec<GroundTruth> = test
        .iter()
        .flat_map(|s| {
            s.boxes.iter().zip(&s.classes).map(|(b, &c)| GroundTruth {
                image_id: s.image_id.clone(),
                class_id: c,
                bbox: *b,
            })
        })
        .collect();
    let classes: Vec<usize> = (1..=model.config.head.classes).collect();
    Ok(VariantResult {
        name: name.to_string(),
        overall: evaluate_classes(&detections, &gts, &classes, &EvalLevel::all(), test.len()),
        small: evaluate_classes(&detections, &gts, &classes, &small_level(), test.len()),
        log,
        detections,
    })
}

/// Generates the split, then trains and evaluates both variants.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&str, &LossRecord)) -> Result<AblationReport> {
    let train_images = generate(
        &SynthConfig {
            images: cfg.train_images,
            ..cfg.synth.clone()
        },
        0,
    )?;
    let test_images = generate(
        &SynthConfig {
            images: cfg.test_images,
            ..cfg.synth.clone()
        },
        cfg.train_images,
    )?;
    let train = to_samples(&train_images);
    let test = to_samples(&test_images);
    let fused_cfg = ModelConfig {
        single_scale: false,
        ..cfg.model.clone()
    };
    let fused = run_variant("fused", fused_cfg.clone(), cfg, &train, &test, &mut progress)?;
    let single = run_variant("single", fused_cfg.single_scale_variant(), cfg, &train, &test, &mut progress)?;
    Ok(AblationReport {
        train_summary: SizeSummary::of(&train_images),
        test_summary: SizeSummary::of(&test_images),
        fused,
        single,
    })
}

/// The AP/AR comparison table, in AP points.
pub fn write_delta_table<W: Write>(out: &mut W, report: &AblationReport) -> Result<()> {
    let (f, s) = (&report.fused, &report.single);
    writeln!(
        out,
        "small-object share: train {:.3}, test {:.3}",
        report.train_summary.small_fraction(),
        report.test_summary.small_fraction()
    )?;
    writeln!(out, "{:<14} {:>8} {:>8} {:>8}", "metric", "fused", "single", "delta")?;
    let rows = [
        ("AP all", f.overall_ap(), s.overall_ap()),
        ("AP h<16", f.small_ap(), s.small_ap()),
        ("AR all", f.overall_ar(), s.overall_ar()),
        ("AR h<16", f.small_ar(), s.small_ar()),
    ];
    for (name, a, b) in rows {
        writeln!(out, "{name:<14} {:>8.2} {:>8.2} {:>+8.2}", 100.0 * a, 100.0 * b, 100.0 * (a - b))?;
    }
    Ok(())
}
