//! Line-based experiment configuration:
//!
//! ```text
//! # comment
//! [model]
//! widths = 16, 32, 64, 96, 128
//! [train]
//! base_lr = 0.001
//! ```
//!
//! Every key has a default; unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Training dataset directory, relative paths resolved against the config file.
    pub train: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thresh: 0.05,
            nms_iou: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub detect: DetectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig { train: None },
            detect: DetectConfig::default(),
        }
    }
}

fn scalar<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| scalar(line, key, x.trim())).collect()
}

fn array5(line: usize, key: &str, v: &str) -> Result<[usize; 5]> {
    let items: Vec<usize> = list(line, key, v)?;
    items.try_into().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}` needs five values"),
    })
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "data" | "detect") {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown section [{section}]"),
                    });
                }
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            cfg.set(line, &section, key.trim(), value.trim())?;
        }
        cfg.model.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        cfg.train.validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        Ok(cfg)
    }

    /// Parses `path`, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        if let (Some(p), Some(base)) = (&cfg.data.train, path.parent()) {
            if p.is_relative() {
                cfg.data.train = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, line: usize, section: &str, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match (section, key) {
            ("model", "in_channels") => m.backbone.in_channels = scalar(line, key, v)?,
            ("model", "widths") => m.backbone.widths = array5(line, key, v)?,
            ("model", "blocks") => m.backbone.blocks = array5(line, key, v)?,
            ("model", "k") => m.head.k = scalar(line, key, v)?,
            ("model", "classes") => m.head.classes = scalar(line, key, v)?,
            ("model", "rpn_channels") => m.rpn_channels = scalar(line, key, v)?,
            ("model", "anchor_base") => m.anchors.base_size = scalar(line, key, v)?,
            ("model", "anchor_scales") => m.anchors.scales = list(line, key, v)?,
            ("model", "anchor_ratios") => m.anchors.ratios = list(line, key, v)?,
            ("model", "single_scale") => m.single_scale = scalar(line, key, v)?,
            ("model", "means") => m.means = list(line, key, v)?,
            ("model", "seed") => m.seed = scalar(line, key, v)?,
            ("train", "iterations") => t.iterations = scalar(line, key, v)?,
            ("train", "base_lr") => t.base_lr = scalar(line, key, v)?,
            ("train", "lr_decay_step") => t.lr_decay_step = scalar(line, key, v)?,
            ("train", "lr_decay_factor") => t.lr_decay_factor = scalar(line, key, v)?,
            ("train", "warmup") => t.warmup = scalar(line, key, v)?,
            ("train", "momentum") => t.momentum = scalar(line, key, v)?,
            ("train", "weight_decay") => t.weight_decay = scalar(line, key, v)?,
            ("train", "weight_rpn_cls") => t.loss_weights.rpn_cls = scalar(line, key, v)?,
            ("train", "weight_rpn_reg") => t.loss_weights.rpn_reg = scalar(line, key, v)?,
            ("train", "weight_det_cls") => t.loss_weights.det_cls = scalar(line, key, v)?,
            ("train", "weight_det_reg") => t.loss_weights.det_reg = scalar(line, key, v)?,
            ("train", "rpn_positive_iou") => t.rpn.positive_iou = scalar(line, key, v)?,
            ("train", "rpn_negative_iou") => t.rpn.negative_iou = scalar(line, key, v)?,
            ("train", "rpn_batch") => t.rpn.batch = scalar(line, key, v)?,
            ("train", "rpn_positive_fraction") => t.rpn.positive_fraction = scalar(line, key, v)?,
            ("train", "roi_foreground_iou") => t.roi.foreground_iou = scalar(line, key, v)?,
            ("train", "roi_background_low") => t.roi.background_low = scalar(line, key, v)?,
            ("train", "roi_batch") => t.roi.batch = scalar(line, key, v)?,
            ("train", "roi_foreground_fraction") => t.roi.foreground_fraction = scalar(line, key, v)?,
            ("train", "seed") => t.seed = scalar(line, key, v)?,
            ("data", "train") => self.data.train = Some(PathBuf::from(v)),
            ("detect", "score_thresh") => self.detect.score_thresh = scalar(line, key, v)?,
            ("detect", "nms_iou") => self.detect.nms_iou = scalar(line, key, v)?,
            ("", _) => {
                return Err(Error::Config {
                    line,
                    msg: format!("`{key}` appears before any [section]"),
                })
            }
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}` in [{section}]"),
                })
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(echo())` reproduces the config exactly.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "in_channels = {}", m.backbone.in_channels);
        let _ = writeln!(s, "widths = {}", join(&m.backbone.widths));
        let _ = writeln!(s, "blocks = {}", join(&m.backbone.blocks));
        let _ = writeln!(s, "k = {}", m.head.k);
        let _ = writeln!(s, "classes = {}", m.head.classes);
        let _ = writeln!(s, "rpn_channels = {}", m.rpn_channels);
        let _ = writeln!(s, "anchor_base = {}", m.anchors.base_size);
        let _ = writeln!(s, "anchor_scales = {}", join(&m.anchors.scales));
        let _ = writeln!(s, "anchor_ratios = {}", join(&m.anchors.ratios));
        let _ = writeln!(s, "single_scale = {}", m.single_scale);
        let _ = writeln!(s, "means = {}", join(&m.means));
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "iterations = {}", t.iterations);
        let _ = writeln!(s, "base_lr = {}", t.base_lr);
        let _ = writeln!(s, "lr_decay_step = {}", t.lr_decay_step);
        let _ = writeln!(s, "lr_decay_factor = {}", t.lr_decay_factor);
        let _ = writeln!(s, "warmup = {}", t.warmup);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "weight_rpn_cls = {}", t.loss_weights.rpn_cls);
        let _ = writeln!(s, "weight_rpn_reg = {}", t.loss_weights.rpn_reg);
        let _ = writeln!(s, "weight_det_cls = {}", t.loss_weights.det_cls);
        let _ = writeln!(s, "weight_det_reg = {}", t.loss_weights.det_reg);
        let _ = writeln!(s, "rpn_positive_iou = {}", t.rpn.positive_iou);
        let _ = writeln!(s, "rpn_negative_iou = {}", t.rpn.negative_iou);
        let _ = writeln!(s, "rpn_batch = {}", t.rpn.batch);
        let _ = writeln!(s, "rpn_positive_fraction = {}", t.rpn.positive_fraction);
        let _ = writeln!(s, "roi_foreground_iou = {}", t.roi.foreground_iou);
        let _ = writeln!(s, "roi_background_low = {}", t.roi.background_low);
        let _ = writeln!(s, "roi_batch = {}", t.roi.batch);
        let _ = writeln!(s, "roi_foreground_fraction = {}", t.roi.foreground_fraction);
        let _ = writeln!(s, "seed = {}", t.seed);
        if let Some(p) = &self.data.train {
            let _ = writeln!(s, "\n[data]");
            let _ = writeln!(s, "train = {}", p.display());
        }
        let _ = writeln!(s, "\n[detect]");
        let _ = writeln!(s, "score_thresh = {}", self.detect.score_thresh);
        let _ = writeln!(s, "nms_iou = {}", self.detect.nms_iou);
        s
    }
}
