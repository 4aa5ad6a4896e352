//! Small convolutional trunk emitting C3/C4/C5 at strides 4, 8 and 16.
//!
//! Five stages of 3x3 conv + ReLU blocks. Stages 1, 2, 4 and 5 open with a
//! stride-2 convolution; stage 3 keeps the stride-4 resolution and, like the
//! later blocks of stage 5, uses dilation 2 instead of downsampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{relu, ConvGeometry, ConvLayer, L2NormScaleLayer};
use crate::params::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Strides of C3, C4 and C5 relative to the input.
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];
/// Input sides must be multiples of this.
pub const INPUT_ALIGN: usize = 16;

const DOWNSAMPLE: [bool; 5] = [true, true, false, true, true];
const DILATION: [usize; 5] = [1, 1, 2, 1, 2];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; 5],
    pub blocks: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            widths: [16, 32, 64, 96, 128],
            blocks: [1, 1, 2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::invalid("backbone", format!("zero width or block count in {self:?}")));
        }
        Ok(())
    }

    /// Channel counts of C3, C4, C5.
    pub fn level_channels(&self) -> [usize; 3] {
        [self.widths[2], self.widths[3], self.widths[4]]
    }
}

/// Backbone outputs: raw levels `c` and their normalised forms `n`, index 0..3 = C3..C5.
/// Only levels the backbone was built to normalise carry an `n` entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub c1: Var,
    pub c2: Var,
    pub c: [Var; 3],
    pub n: [Option<Var>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Vec<ConvLayer>>,
    /// Normalisation layers indexed by level (0 = C3); `None` for unused levels.
    pub norms: [Option<L2NormScaleLayer>; 3],
}

impl Backbone {
    /// A trunk normalising every level.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        Self::with_levels(config, &[0, 1, 2])
    }

    /// A trunk normalising only `levels` (0 = C3).
    pub fn with_levels(config: BackboneConfig, levels: &[usize]) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(5);
        let mut in_c = config.in_channels;
        for s in 0..5 {
            let mut stage = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let geometry = if b == 0 && DOWNSAMPLE[s] {
                    ConvGeometry::square(3, 2, 1, 1)
                } else {
                    let d = DILATION[s];
                    ConvGeometry::square(3, 1, d, d)
                };
                stage.push(ConvLayer::new(format!("backbone.c{}.{}", s + 1, b), in_c, config.widths[s], geometry));
                in_c = config.widths[s];
            }
            stages.push(stage);
        }
        let ch = config.level_channels();
        let norms = [0, 1, 2].map(|l| {
            levels
                .contains(&l)
                .then(|| L2NormScaleLayer::new(format!("backbone.norm{}", l + 3), ch[l]))
        });
        Ok(Backbone { config, stages, norms })
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng, norm_scale: f64) -> Result<()> {
        for layer in self.stages.iter().flatten() {
            layer.init(params, rng, 1.0)?;
        }
        for norm in self.norms.iter().flatten() {
            norm.init(params, norm_scale)?;
        }
        Ok(())
    }

    /// Names of the parameters used by stage `s` (0-based).
    pub fn stage_param_names(&self, s: usize) -> Vec<String> {
        self.stages[s]
            .iter()
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, image: Var) -> Result<FeaturePyramid> {
        let s = tape.shape(image);
        if s.h % INPUT_ALIGN != 0 || s.w % INPUT_ALIGN != 0 {
            return Err(Error::invalid(
                "backbone_forward",
                format!("input {s} not aligned to {INPUT_ALIGN}; pad it first"),
            ));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(5);
        for stage in &self.stages {
            for layer in stage {
                let y = layer.forward(tape, params, x)?;
                x = relu(tape, y);
            }
            outs.push(x);
        }
        let c = [outs[2], outs[3], outs[4]];
        let mut n = [None; 3];
        for (slot, (norm, level)) in n.iter_mut().zip(self.norms.iter().zip(c)) {
            if let Some(norm) = norm {
                *slot = Some(norm.forward(tape, params, level)?);
            }
        }
        Ok(FeaturePyramid {
            c1: outs[0],
            c2: outs[1],
            c,
            n,
        })
    }
}

/// An image zero-padded on the right and bottom, with its original extent.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedImage {
    pub tensor: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Zero-pads right/bottom so both sides are multiples of `stride`.
pub fn pad_to_stride(image: &Tensor, stride: usize) -> PaddedImage {
    let s = image.shape();
    let ph = s.h.div_ceil(stride) * stride;
    let pw = s.w.div_ceil(stride) * stride;
    let tensor = if (ph, pw) == (s.h, s.w) {
        image.clone()
    } else {
        Tensor::from_fn(Shape::new(s.n, s.c, ph, pw), |n, c, y, x| {
            if y < s.h && x < s.w {
                image.at(n, c, y, x)
            } else {
                0.0
            }
        })
    };
    PaddedImage {
        tensor,
        height: s.h,
        width: s.w,
    }
}
