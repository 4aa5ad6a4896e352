//! Channel-wise L2 normalisation with a learnable per-channel scale.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const L2_EPSILON: f64 = 1e-12;
pub const DEFAULT_SCALE: f64 = 10.0;

/// `out[n, c, h, w] = gamma[c] * x[n, c, h, w] / max(|x[n, :, h, w]|, eps)`.
pub fn l2norm_scale_forward(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    let xs = x.shape();
    if gamma.shape().len() != xs.c {
        return Err(Error::ShapeMismatch {
            op: "l2norm_scale",
            left: xs,
            right: gamma.shape(),
        });
    }
    let plane = xs.plane();
    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        let base = n * xs.c * plane;
        for p in 0..plane {
            let norm = (0..xs.c)
                .map(|c| x.data()[base + c * plane + p].powi(2))
                .sum::<f64>()
                .sqrt()
                .max(eps);
            for c in 0..xs.c {
                let i = base + c * plane + p;
                out.data_mut()[i] = gamma.data()[c] * x.data()[i] / norm;
            }
        }
    }
    Ok(out)
}

struct L2NormRule {
    eps: f64,
}

impl Backward for L2NormRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let xs = x.shape();
        let plane = xs.plane();
        let mut dx = needs[0].then(|| Tensor::zeros(xs));
        let mut dgamma = needs[1].then(|| Tensor::zeros(gamma.shape()));
        let (xd, gd, gam) = (x.data(), grad.data(), gamma.data());
        for n in 0..xs.n {
            let base = n * xs.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let raw = (0..xs.c).map(|c| xd[at(c)].powi(2)).sum::<f64>().sqrt();
                let norm = raw.max(self.eps);
                if let Some(dg) = dgamma.as_mut() {
                    for c in 0..xs.c {
                        dg.data_mut()[c] += gd[at(c)] * xd[at(c)] / norm;
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxd = dx.data_mut();
                    if raw > self.eps {
                        let dot: f64 = (0..xs.c).map(|c| gd[at(c)] * gam[c] * xd[at(c)]).sum();
                        let cube = norm * norm * norm;
                        for c in 0..xs.c {
                            dxd[at(c)] = gd[at(c)] * gam[c] / norm - xd[at(c)] * dot / cube;
                        }
                    } else {
                        for c in 0..xs.c {
                            dxd[at(c)] = gd[at(c)] * gam[c] / norm;
                        }
                    }
                }
            }
        }
        Ok(vec![dx, dgamma])
    }
}

pub fn l2norm_scale(tape: &mut Tape, x: Var, gamma: Var, eps: f64) -> Result<Var> {
    let out = l2norm_scale_forward(tape.value(x), tape.value(gamma), eps)?;
    Ok(tape.push("l2norm_scale", out, vec![x, gamma], Box::new(L2NormRule { eps })))
}

/// Normalisation layer whose scale lives under `<name>.gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct L2NormScaleLayer {
    pub name: String,
    pub channels: usize,
    pub epsilon: f64,
}

impl L2NormScaleLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        L2NormScaleLayer {
            name: name.into(),
            channels,
            epsilon: L2_EPSILON,
        }
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }

    pub fn init(&self, params: &mut ModelParams, scale: f64) -> Result<()> {
        params.insert(self.gamma_name(), Tensor::full(Shape::new(1, self.channels, 1, 1), scale))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<Var> {
        let gamma = params.bind(tape, &self.gamma_name())?;
        l2norm_scale(tape, x, gamma, self.epsilon)
    }
}
