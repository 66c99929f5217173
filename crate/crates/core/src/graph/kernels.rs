//! Forward and backward kernels for each module kind.
//!
//! Backward kernels accept an output gradient whose leading extent is a
//! multiple (`fan`) of the saved forward batch: rows `r` of the gradient
//! pair with saved row `r % batch`. A single reverse pass then serves
//! several stacked seeds against one recorded forward.

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

use super::ModuleKind;

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(shape: &[usize], cin: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if shape.len() != 4 || shape[1] != cin {
            return Err(Error::Shape(format!("conv2d expects [batch, {cin}, h, w], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d kernel {k} larger than padded input {shape:?}")));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input flat offset (within one sample) for patch entry `p` at output
    /// position `l`, or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, l: usize, p: usize) -> Option<usize> {
        let (oy, ox) = (l / self.wo, l % self.wo);
        let c = p / (self.k * self.k);
        let rem = p % (self.k * self.k);
        let (ky, kx) = (rem / self.k, rem % self.k);
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((c * self.h + iy as usize) * self.w + ix as usize)
        }
    }

    /// Patch matrix `[positions, patch_len]` for one sample.
    pub fn im2col(&self, sample: &[f64]) -> Vec<f64> {
        let (l_n, p_n) = (self.positions(), self.patch_len());
        let mut cols = vec![0.0; l_n * p_n];
        for l in 0..l_n {
            for p in 0..p_n {
                if let Some(s) = self.source(l, p) {
                    cols[l * p_n + p] = sample[s];
                }
            }
        }
        cols
    }

    /// Scatters a patch-shaped gradient back onto one input sample.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let (l_n, p_n) = (self.positions(), self.patch_len());
        for l in 0..l_n {
            for p in 0..p_n {
                if let Some(s) = self.source(l, p) {
                    out[s] += cols[l * p_n + p];
                }
            }
        }
    }
}

fn softmax_axis(shape: &[usize], axis: isize) -> Result<(usize, usize, usize)> {
    let nd = shape.len() as isize;
    let a = if axis < 0 { nd + axis } else { axis };
    if a < 0 || a >= nd {
        return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
    }
    let a = a as usize;
    let outer: usize = shape[..a].iter().product();
    let inner: usize = shape[a + 1..].iter().product();
    Ok((outer, shape[a], inner))
}

fn expect_rank(kind: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::Shape(format!("{kind} expects rank {rank}, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn forward(
    kind: &ModuleKind,
    inputs: &[Tensor],
    weight: Option<&Tensor>,
    bias: Option<&Tensor>,
    dtype: DType,
) -> Result<Tensor> {
    let x = &inputs[0];
    match kind {
        ModuleKind::Linear { in_features, out_features, .. } => {
            let (fi, fo) = (*in_features, *out_features);
            expect_rank("linear", x.shape(), 2)?;
            if x.shape()[1] != fi {
                return Err(Error::Shape(format!("linear expects {fi} input features, got {:?}", x.shape())));
            }
            let n = x.shape()[0];
            let w = weight.expect("linear weight").data();
            let xd = x.data();
            let mut y = vec![0.0; n * fo];
            for r in 0..n {
                let xr = &xd[r * fi..(r + 1) * fi];
                for o in 0..fo {
                    let wr = &w[o * fi..(o + 1) * fi];
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..fi {
                        acc += xr[i] * wr[i];
                    }
                    y[r * fo + o] = acc;
                }
            }
            Ok(Tensor::from_parts(vec![n, fo], y, dtype))
        }
        ModuleKind::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
            let g = ConvGeom::new(x.shape(), *in_channels, *kernel, *stride, *padding)?;
            let n = x.shape()[0];
            let co_n = *out_channels;
            let (l_n, p_n) = (g.positions(), g.patch_len());
            let w = weight.expect("conv weight").data();
            let mut y = vec![0.0; n * co_n * l_n];
            for b in 0..n {
                let cols = g.im2col(x.row(b));
                for co in 0..co_n {
                    let wr = &w[co * p_n..(co + 1) * p_n];
                    let b0 = bias.map_or(0.0, |bb| bb.data()[co]);
                    for l in 0..l_n {
                        let cr = &cols[l * p_n..(l + 1) * p_n];
                        let mut acc = b0;
                        for p in 0..p_n {
                            acc += cr[p] * wr[p];
                        }
                        y[(b * co_n + co) * l_n + l] = acc;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![n, co_n, g.ho, g.wo], y, dtype))
        }
        ModuleKind::Relu => Ok(x.map(|v| if v > 0.0 { v } else { 0.0 }).to_dtype(dtype)),
        ModuleKind::Tanh => Ok(x.map(f64::tanh).to_dtype(dtype)),
        ModuleKind::Sigmoid => Ok(x.map(|v| 1.0 / (1.0 + (-v).exp())).to_dtype(dtype)),
        ModuleKind::Softmax { axis } => {
            let (outer, len, inner) = softmax_axis(x.shape(), *axis)?;
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let m = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for j in 0..len {
                        let e = (xd[idx(j)] - m).exp();
                        y[idx(j)] = e;
                        s += e;
                    }
                    for j in 0..len {
                        y[idx(j)] /= s;
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), y, dtype))
        }
        ModuleKind::Flatten => {
            if x.ndim() == 0 {
                return Err(Error::Shape("flatten needs a batch axis".into()));
            }
            Ok(Tensor::from_parts(vec![x.rows(), x.row_len()], x.data().to_vec(), dtype))
        }
        ModuleKind::AvgPool2d { kernel } => {
            expect_rank("avgpool2d", x.shape(), 4)?;
            let k = *kernel;
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            if h < k || w < k {
                return Err(Error::Shape(format!("avgpool2d kernel {k} larger than {:?}", x.shape())));
            }
            let (ho, wo) = (h / k, w / k);
            let xd = x.data();
            let inv = 1.0 / (k * k) as f64;
            let mut y = vec![0.0; n * c * ho * wo];
            for nc in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += xd[(nc * h + oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        y[(nc * ho + oy) * wo + ox] = s * inv;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![n, c, ho, wo], y, dtype))
        }
        ModuleKind::Add => {
            let other = inputs.get(1).ok_or_else(|| Error::Graph("add needs two sources".into()))?;
            Ok(x.add(other)?.to_dtype(dtype))
        }
    }
}

/// Gradients of one module with respect to its inputs and parameters.
pub(crate) struct ModuleGrads {
    pub inputs: Vec<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

fn fan_of(saved_rows: usize, grad: &Tensor) -> Result<usize> {
    let r = grad.rows();
    if saved_rows == 0 || !r.is_multiple_of(saved_rows) {
        return Err(Error::Seed(format!("gradient rows {r} are not a multiple of the recorded batch {saved_rows}")));
    }
    Ok(r / saved_rows)
}

pub(crate) fn backward(
    kind: &ModuleKind,
    inputs: &[Tensor],
    output: &Tensor,
    weight: Option<&Tensor>,
    grad: &Tensor,
    param_grads: bool,
) -> Result<ModuleGrads> {
    let x = &inputs[0];
    let n = x.rows();
    let fan = fan_of(n, grad)?;
    let rows = fan * n;
    let gd = grad.data();
    let dtype = DType::F64;
    let mut wgrad = None;
    let mut bgrad = None;
    let gin = match kind {
        ModuleKind::Linear { in_features, out_features, bias } => {
            let (fi, fo) = (*in_features, *out_features);
            let w = weight.expect("linear weight").data();
            let mut gx = vec![0.0; rows * fi];
            for r in 0..rows {
                let gr = &gd[r * fo..(r + 1) * fo];
                let out = &mut gx[r * fi..(r + 1) * fi];
                for (o, &g) in gr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let wr = &w[o * fi..(o + 1) * fi];
                    for i in 0..fi {
                        out[i] += g * wr[i];
                    }
                }
            }
            if param_grads {
                let xd = x.data();
                let mut gw = vec![0.0; fo * fi];
                let mut gb = vec![0.0; fo];
                for r in 0..rows {
                    let xr = &xd[(r % n) * fi..(r % n + 1) * fi];
                    for o in 0..fo {
                        let g = gd[r * fo + o];
                        gb[o] += g;
                        for i in 0..fi {
                            gw[o * fi + i] += g * xr[i];
                        }
                    }
                }
                wgrad = Some(Tensor::from_parts(vec![fo, fi], gw, dtype));
                if *bias {
                    bgrad = Some(Tensor::from_parts(vec![fo], gb, dtype));
                }
            }
            Tensor::from_parts(vec![rows, fi], gx, dtype)
        }
        ModuleKind::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => {
            let g = ConvGeom::new(x.shape(), *in_channels, *kernel, *stride, *padding)?;
            let co_n = *out_channels;
            let (l_n, p_n) = (g.positions(), g.patch_len());
            let w = weight.expect("conv weight").data();
            let sample = x.row_len();
            let mut gx = vec![0.0; rows * sample];
            let mut gw = vec![0.0; if param_grads { co_n * p_n } else { 0 }];
            let mut gb = vec![0.0; co_n];
            let mut gcols = vec![0.0; l_n * p_n];
            for r in 0..rows {
                gcols.iter_mut().for_each(|v| *v = 0.0);
                let gr = &gd[r * co_n * l_n..(r + 1) * co_n * l_n];
                for co in 0..co_n {
                    let wr = &w[co * p_n..(co + 1) * p_n];
                    for l in 0..l_n {
                        let gv = gr[co * l_n + l];
                        if gv == 0.0 {
                            continue;
                        }
                        let dst = &mut gcols[l * p_n..(l + 1) * p_n];
                        for p in 0..p_n {
                            dst[p] += gv * wr[p];
                        }
                    }
                }
                g.col2im(&gcols, &mut gx[r * sample..(r + 1) * sample]);
                if param_grads {
                    let cols = g.im2col(x.row(r % n));
                    for co in 0..co_n {
                        for l in 0..l_n {
                            let gv = gr[co * l_n + l];
                            gb[co] += gv;
                            let cr = &cols[l * p_n..(l + 1) * p_n];
                            for p in 0..p_n {
                                gw[co * p_n + p] += gv * cr[p];
                            }
                        }
                    }
                }
            }
            if param_grads {
                wgrad = Some(Tensor::from_parts(vec![co_n, g.cin, g.k, g.k], gw, dtype));
                if *bias {
                    bgrad = Some(Tensor::from_parts(vec![co_n], gb, dtype));
                }
            }
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            Tensor::from_parts(shape, gx, dtype)
        }
        ModuleKind::Relu => {
            let xd = x.data();
            let m = xd.len();
            let v: Vec<f64> = gd.iter().enumerate().map(|(i, &g)| if xd[i % m] > 0.0 { g } else { 0.0 }).collect();
            Tensor::from_parts(grad.shape().to_vec(), v, dtype)
        }
        ModuleKind::Tanh => {
            let yd = output.data();
            let m = yd.len();
            let v = gd.iter().enumerate().map(|(i, &g)| g * (1.0 - yd[i % m] * yd[i % m])).collect();
            Tensor::from_parts(grad.shape().to_vec(), v, dtype)
        }
        ModuleKind::Sigmoid => {
            let yd = output.data();
            let m = yd.len();
            let v = gd.iter().enumerate().map(|(i, &g)| g * yd[i % m] * (1.0 - yd[i % m])).collect();
            Tensor::from_parts(grad.shape().to_vec(), v, dtype)
        }
        ModuleKind::Softmax { axis } => {
            // Fused Jacobian-vector product: dx = y * (g - sum(g * y)).
            let (outer, len, inner) = softmax_axis(output.shape(), *axis)?;
            let yd = output.data();
            let m = yd.len();
            let mut v = vec![0.0; gd.len()];
            for f in 0..fan {
                let base = f * m;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotv: f64 = (0..len).map(|j| gd[base + idx(j)] * yd[idx(j)]).sum();
                        for j in 0..len {
                            v[base + idx(j)] = yd[idx(j)] * (gd[base + idx(j)] - dotv);
                        }
                    }
                }
            }
            Tensor::from_parts(grad.shape().to_vec(), v, dtype)
        }
        ModuleKind::Flatten => {
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            Tensor::from_parts(shape, gd.to_vec(), dtype)
        }
        ModuleKind::AvgPool2d { kernel } => {
            let k = *kernel;
            let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (ho, wo) = (h / k, w / k);
            let inv = 1.0 / (k * k) as f64;
            let mut v = vec![0.0; rows * c * h * w];
            for rc in 0..rows * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gd[(rc * ho + oy) * wo + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                v[(rc * h + oy * k + dy) * w + ox * k + dx] = g;
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![rows, c, h, w], v, dtype)
        }
        ModuleKind::Add => {
            return Ok(ModuleGrads { inputs: vec![grad.clone(), grad.clone()], weight: None, bias: None })
        }
    };
    Ok(ModuleGrads { inputs: vec![gin], weight: wgrad, bias: bgrad })
}
