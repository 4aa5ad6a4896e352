//! Dilated cross-correlation and backwards-stride (transposed) convolution.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Spatial hyper-parameters of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn square(k: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            pad,
            dilation,
        }
    }

    /// `floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1`, or `None` when non-positive.
    pub fn output_len(in_len: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = in_len + 2 * pad;
        (padded >= span).then(|| (padded - span) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Self::output_len(h, self.kh, self.stride, self.pad, self.dilation)?,
            Self::output_len(w, self.kw, self.stride, self.pad, self.dilation)?,
        ))
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(op, format!("degenerate geometry {self:?}")));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one (c, h, w) image into a (c kh kw, oh ow) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(src: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [f64]) {
    let plane = oh * ow;
    for ci in 0..c {
        let chan = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (kj * g.dilation) as isize - g.pad as isize;
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        *o = if ix >= 0 && ix < w as isize { src_row[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto a (c, h, w) image.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, dst: &mut [f64]) {
    let plane = oh * ow;
    for ci in 0..c {
        let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    let x0 = (kj * g.dilation) as isize - g.pad as isize;
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = x0 + (ox * g.stride) as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the strides above.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward on raw tensors; `weight` is (oc, ic, kh, kw), `bias` has `oc` values.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Result<Tensor> {
    g.validate("conv_forward")?;
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c || ws.h != g.kh || ws.w != g.kw {
        return Err(Error::ShapeMismatch {
            op: "conv_forward",
            left: xs,
            right: ws,
        });
    }
    if let Some(b) = bias {
        if b.shape().len() != ws.n {
            return Err(Error::ShapeMismatch {
                op: "conv_forward bias",
                left: ws,
                right: b.shape(),
            });
        }
    }
    let (oh, ow) = g
        .output_hw(xs.h, xs.w)
        .ok_or_else(|| Error::invalid("conv_forward", format!("non-positive output size for input {xs}")))?;
    let out_shape = Shape::new(xs.n, ws.n, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let k = xs.c * g.kh * g.kw;
    let p = oh * ow;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_len = xs.c * xs.plane();
    let out_len = ws.n * p;
    for n in 0..xs.n {
        let src = &x.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (oc, bv) in b.data().iter().enumerate() {
                dst[oc * p..(oc + 1) * p].fill(*bv);
            }
        }
        let patches: &[f64] = if g.is_pointwise() {
            src
        } else {
            im2col(src, xs.c, xs.h, xs.w, g, oh, ow, &mut cols);
            &cols
        };
        gemm(ws.n, k, p, weight.data(), false, patches, false, 1.0, dst);
    }
    Ok(out)
}

struct ConvRule {
    geometry: ConvGeometry,
}

impl Backward for ConvRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let g = &self.geometry;
        let xs = x.shape();
        let ws = weight.shape();
        let os = output.shape();
        let k = xs.c * g.kh * g.kw;
        let p = os.h * os.w;
        let in_len = xs.c * xs.plane();
        let out_len = ws.n * p;
        let mut dx = needs[0].then(|| Tensor::zeros(xs));
        let mut dw = needs[1].then(|| Tensor::zeros(ws));
        let mut db = needs.get(2).copied().unwrap_or(false).then(|| Tensor::zeros(inputs[2].shape()));
        let mut cols = vec![0.0; k * p];
        for n in 0..xs.n {
            let gout = &grad.data()[n * out_len..(n + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                let src = &x.data()[n * in_len..(n + 1) * in_len];
                let patches: &[f64] = if g.is_pointwise() {
                    src
                } else {
                    im2col(src, xs.c, xs.h, xs.w, g, os.h, os.w, &mut cols);
                    &cols
                };
                gemm(ws.n, p, k, gout, false, patches, true, 1.0, dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                if g.is_pointwise() {
                    gemm(k, ws.n, p, weight.data(), true, gout, false, 1.0, dst);
                } else {
                    gemm(k, ws.n, p, weight.data(), true, gout, false, 0.0, &mut cols);
                    col2im(&cols, xs.c, xs.h, xs.w, g, os.h, os.w, dst);
                }
            }
            if let Some(db) = db.as_mut() {
                for (oc, b) in db.data_mut().iter_mut().enumerate() {
                    *b += gout[oc * p..(oc + 1) * p].iter().sum::<f64>();
                }
            }
        }
        Ok(vec![dx, dw, db])
    }
}

/// Records a convolution. Inputs: x (n, ic, h, w), weight (oc, ic, kh, kw), optional bias (1, oc, 1, 1).
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>, geometry: ConvGeometry) -> Result<Var> {
    let out = conv2d_forward(
        tape.value(x),
        tape.value(weight),
        bias.map(|b| tape.value(b)),
        &geometry,
    )?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.push("conv", out, inputs, Box::new(ConvRule { geometry })))
}

/// Kernel geometry of an upsampling-by-`factor` transposed convolution:
/// kernel `2 factor`, stride `factor`, pad `floor(factor / 2)`.
pub fn upsample_geometry(factor: usize) -> ConvGeometry {
    ConvGeometry::square(2 * factor, factor, factor / 2, 1)
}

/// Transposed convolution; `weight` is (ic, oc, kh, kw), output is exactly `factor` times the input.
///
/// `out[y] = sum_i x[i] * w[y + pad - i * factor]` per axis, taps outside the kernel dropped.
pub fn deconv2d_forward(x: &Tensor, weight: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("deconv", "factor must be >= 1"));
    }
    let g = upsample_geometry(factor);
    let xs = x.shape();
    let ws = weight.shape();
    if ws.n != xs.c || ws.h != g.kh || ws.w != g.kw {
        return Err(Error::ShapeMismatch {
            op: "deconv",
            left: xs,
            right: ws,
        });
    }
    let (oh, ow) = (xs.h * factor, xs.w * factor);
    let oc = ws.c;
    let mut out = Tensor::zeros(Shape::new(xs.n, oc, oh, ow));
    let rows = oc * g.kh * g.kw;
    let p = xs.plane();
    let mut cols = vec![0.0; rows * p];
    let in_len = xs.c * p;
    let out_len = oc * oh * ow;
    for n in 0..xs.n {
        let src = &x.data()[n * in_len..(n + 1) * in_len];
        gemm(rows, xs.c, p, weight.data(), true, src, false, 0.0, &mut cols);
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        col2im(&cols, oc, oh, ow, &g, xs.h, xs.w, dst);
    }
    Ok(out)
}

struct DeconvRule {
    factor: usize,
}

impl Backward for DeconvRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, weight) = (inputs[0], inputs[1]);
        let g = upsample_geometry(self.factor);
        let xs = x.shape();
        let ws = weight.shape();
        let os = output.shape();
        let rows = ws.c * g.kh * g.kw;
        let p = xs.plane();
        let in_len = xs.c * p;
        let out_len = os.c * os.plane();
        let mut dx = needs[0].then(|| Tensor::zeros(xs));
        let mut dw = needs[1].then(|| Tensor::zeros(ws));
        let mut cols = vec![0.0; rows * p];
        for n in 0..xs.n {
            let gout = &grad.data()[n * out_len..(n + 1) * out_len];
            im2col(gout, os.c, os.h, os.w, &g, xs.h, xs.w, &mut cols);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                gemm(xs.c, rows, p, weight.data(), false, &cols, false, 1.0, dst);
            }
            if let Some(dw) = dw.as_mut() {
                let src = &x.data()[n * in_len..(n + 1) * in_len];
                gemm(xs.c, p, rows, src, false, &cols, true, 1.0, dw.data_mut());
            }
        }
        Ok(vec![dx, dw])
    }
}

/// Records an upsampling transposed convolution (no bias).
pub fn deconv2d(tape: &mut Tape, x: Var, weight: Var, factor: usize) -> Result<Var> {
    let out = deconv2d_forward(tape.value(x), tape.value(weight), factor)?;
    Ok(tape.push("deconv", out, vec![x, weight], Box::new(DeconvRule { factor })))
}

/// Per-axis bilinear taps for upsampling by `factor`: `w(i) = 1 - |i / f - c|`,
/// `c = (2f - 1 - (f mod 2)) / (2f)`, for `i` in `0..2f`.
pub fn bilinear_taps(factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::invalid("bilinear_deconv_init", "factor must be >= 1"));
    }
    let f = factor as f64;
    let center = (2.0 * f - 1.0 - (factor % 2) as f64) / (2.0 * f);
    Ok((0..2 * factor)
        .map(|i| 1.0 - (i as f64 / f - center).abs())
        .collect())
}

/// Bilinear upsampling kernel of shape (channels, channels, 2f, 2f):
/// outer product of the per-axis taps on matched channels, zero elsewhere.
pub fn bilinear_deconv_init(factor: usize, channels: usize) -> Result<Tensor> {
    let taps = bilinear_taps(factor)?;
    let k = 2 * factor;
    Ok(Tensor::from_fn(Shape::new(channels, channels, k, k), |i, o, y, x| {
        if i == o {
            taps[y] * taps[x]
        } else {
            0.0
        }
    }))
}

/// A learnable convolution whose weights live in [`ModelParams`] under `<name>.weight` / `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, geometry: ConvGeometry) -> Self {
        ConvLayer {
            name: name.into(),
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.geometry.kh, self.geometry.kw)
    }

    /// He (fan-in) normal initialisation with zero bias, scaled by `gain`.
    pub fn init(&self, params: &mut ModelParams, rng: &mut impl rand::Rng, gain: f64) -> Result<()> {
        use rand_distr::{Distribution, Normal};
        let fan_in = (self.in_channels * self.geometry.kh * self.geometry.kw) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let w = Tensor::from_fn(self.weight_shape(), |_, _, _, _| normal.sample(rng));
        params.insert(self.weight_name(), w)?;
        params.insert(self.bias_name(), Tensor::zeros(Shape::new(1, self.out_channels, 1, 1)))
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<Var> {
        let w = params.bind(tape, &self.weight_name())?;
        let b = params.bind(tape, &self.bias_name())?;
        conv2d(tape, x, w, Some(b), self.geometry)
    }
}

/// Learnable upsampling layer initialised to bilinear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    pub name: String,
    pub channels: usize,
    pub factor: usize,
}

impl DeconvLayer {
    pub fn new(name: impl Into<String>, channels: usize, factor: usize) -> Self {
        DeconvLayer {
            name: name.into(),
            channels,
            factor,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init(&self, params: &mut ModelParams) -> Result<()> {
        params.insert(self.weight_name(), bilinear_deconv_init(self.factor, self.channels)?)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, x: Var) -> Result<Var> {
        let w = params.bind(tape, &self.weight_name())?;
        deconv2d(tape, x, w, self.factor)
    }
}
