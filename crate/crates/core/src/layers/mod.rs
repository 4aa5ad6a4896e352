//! Neural layers: convolution, upsampling, normalisation, losses and
//! the small reshaping ops the detector needs between them.

pub mod conv;
pub mod loss;
pub mod norm;

pub use conv::{
    bilinear_deconv_init, bilinear_taps, conv2d, conv2d_forward, deconv2d, deconv2d_forward, ConvGeometry,
    ConvLayer, DeconvLayer,
};
pub use loss::{smooth_l1, smooth_l1_value, softmax, softmax_xent, softmax_xent_value};
pub use norm::{l2norm_scale, l2norm_scale_forward, L2NormScaleLayer};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Shape, Tensor};

struct ReluRule;

impl Backward for ReluRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(o, g)| if *o > 0.0 { *g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::from_vec(grad.shape(), data)?)])
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let out = tape.value(x).map(|v| v.max(0.0));
    tape.push("relu", out, vec![x], Box::new(ReluRule))
}

struct SpatialMeanRule;

impl Backward for SpatialMeanRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].shape();
        let plane = s.plane();
        let mut d = Tensor::zeros(s);
        for (chunk, g) in d.data_mut().chunks_mut(plane).zip(grad.data()) {
            chunk.fill(g / plane as f64);
        }
        Ok(vec![Some(d)])
    }
}

/// Averages each (n, c) plane: (n, c, h, w) -> (n, c, 1, 1).
pub fn spatial_mean(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x);
    let plane = s.plane().max(1);
    let data: Vec<f64> = tape
        .value(x)
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("one value per plane");
    tape.push("spatial_mean", out, vec![x], Box::new(SpatialMeanRule))
}

struct GatherRule {
    sources: Vec<usize>,
    width: usize,
}

impl Backward for GatherRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut d = Tensor::zeros(inputs[0].shape());
        let plane = inputs[0].shape().plane();
        for (row, &src) in self.sources.iter().enumerate() {
            for g in 0..self.width {
                d.data_mut()[src + g * plane] += grad.data()[row * self.width + g];
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Gathers per-anchor rows from a dense (1, A * width, H, W) prediction map.
///
/// Anchor index `((y * W) + x) * A + a` reads channels `a * width .. (a + 1) * width`
/// at cell `(y, x)`. Output is (len, width, 1, 1).
pub fn gather_anchor_rows(tape: &mut Tape, map: Var, anchors_per_cell: usize, width: usize, indices: &[usize]) -> Result<Var> {
    let s = tape.shape(map);
    if s.n != 1 || s.c != anchors_per_cell * width {
        return Err(Error::invalid(
            "gather_anchor_rows",
            format!("map {s} does not hold {anchors_per_cell} anchors x {width} channels"),
        ));
    }
    let total = s.plane() * anchors_per_cell;
    let plane = s.plane();
    let mut sources = Vec::with_capacity(indices.len());
    for &idx in indices {
        if idx >= total {
            return Err(Error::invalid("gather_anchor_rows", format!("anchor {idx} out of {total}")));
        }
        let (cell, a) = (idx / anchors_per_cell, idx % anchors_per_cell);
        sources.push(a * width * plane + cell);
    }
    let src = tape.value(map).data();
    let data: Vec<f64> = sources
        .iter()
        .flat_map(|&base| (0..width).map(move |g| src[base + g * plane]))
        .collect();
    let out = Tensor::from_vec(Shape::new(indices.len(), width, 1, 1), data)?;
    Ok(tape.push("gather_anchor_rows", out, vec![map], Box::new(GatherRule { sources, width })))
}

/// A 3x3 convolution with ReLU feeding two sibling 1x1 convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHead {
    pub trunk: ConvLayer,
    pub class_branch: ConvLayer,
    pub box_branch: ConvLayer,
}

impl PredictionHead {
    pub fn new(name: &str, in_channels: usize, mid_channels: usize, class_channels: usize, box_channels: usize) -> Self {
        PredictionHead {
            trunk: ConvLayer::new(format!("{name}.conv"), in_channels, mid_channels, ConvGeometry::square(3, 1, 1, 1)),
            class_branch: ConvLayer::new(format!("{name}.cls"), mid_channels, class_channels, ConvGeometry::square(1, 1, 0, 1)),
            box_branch: ConvLayer::new(format!("{name}.box"), mid_channels, box_channels, ConvGeometry::square(1, 1, 0, 1)),
        }
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl rand::Rng) -> Result<()> {
        self.trunk.init(params, rng, 1.0)?;
        self.class_branch.init(params, rng, 0.1)?;
        self.box_branch.init(params, rng, 0.1)
    }

    /// Returns (class map, box map), both at the input's spatial size.
    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, params, x)?;
        let h = relu(tape, h);
        let cls = self.class_branch.forward(tape, params, h)?;
        let bx = self.box_branch.forward(tape, params, h)?;
        Ok((cls, bx))
    }
}
