//! Forward and analytic backward kernels for the fixed layer set: 3D
//! convolution, transposed 3D convolution, batch normalization, pointwise
//! activations and channel-wise linear projection.
//!
//! All kernels are deterministic: parallel work is split over disjoint
//! output channels and every per-element reduction runs in a fixed order,
//! so results are bitwise reproducible regardless of thread count.

use super::{Tensor, TensorError};
use crate::thread_pool;
use std::ops::Range;

/// Which layer a [`LayerParams`] bundle parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3d,
    Conv3dTransposed,
    BatchNorm,
    Linear,
}

impl LayerKind {
    fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3d => "conv3d",
            LayerKind::Conv3dTransposed => "conv3d_transposed",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Linear => "linear",
        }
    }
}

/// Weights and geometry for one layer.
///
/// Weight layouts: conv3d `[C_out, C_in, k, k, k]`; transposed conv3d
/// `[C_in, C_out, k, k, k]` (the same physical layout as the conv whose
/// adjoint it is); batchnorm scale `[C]` with shift in `bias`; linear
/// `[C_out, C_in]`.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub epsilon: f64,
}

/// Default batch-norm stabilizer. Unstated in the literature this follows;
/// configurable per layer.
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

impl LayerParams {
    pub fn conv3d(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerParams {
            kind: LayerKind::Conv3d,
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
            padding,
            epsilon: 0.0,
        }
    }

    pub fn conv3d_transposed(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        LayerParams {
            kind: LayerKind::Conv3dTransposed,
            weight: Tensor::zeros(&[c_in, c_out, kernel, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
            padding: 0,
            epsilon: 0.0,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerParams {
            kind: LayerKind::BatchNorm,
            weight: Tensor::filled(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            kernel: 0,
            stride: 0,
            padding: 0,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    pub fn linear(c_in: usize, c_out: usize) -> Self {
        LayerParams {
            kind: LayerKind::Linear,
            weight: Tensor::zeros(&[c_out, c_in]),
            bias: Tensor::zeros(&[c_out]),
            kernel: 1,
            stride: 1,
            padding: 0,
            epsilon: 0.0,
        }
    }

    fn expect_kind(&self, op: &'static str, kind: LayerKind) -> Result<(), TensorError> {
        if self.kind != kind {
            return Err(TensorError::KindMismatch {
                op,
                got: self.kind.name(),
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

/// Gradients of a convolution-like layer with respect to its input, weight
/// and bias.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    d: usize,
    h: usize,
    w: usize,
    do_: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

fn conv_geometry(input: &Tensor, params: &LayerParams) -> Result<ConvGeom, TensorError> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            expected: vec![0, 0, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (c_in, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ws = params.weight.shape();
    if ws.len() != 5 || ws[1] != c_in || ws[2] != params.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            expected: vec![ws.first().copied().unwrap_or(0), c_in, params.kernel, params.kernel, params.kernel],
            got: ws.to_vec(),
        });
    }
    let c_out = ws[0];
    let (k, s, p) = (params.kernel, params.stride, params.padding);
    if s == 0 {
        return Err(TensorError::BadGeometry {
            op: "conv3d",
            detail: "stride must be at least 1".into(),
        });
    }
    for (ext, name) in [(d, "depth"), (h, "height"), (w, "width")] {
        if ext + 2 * p < k {
            return Err(TensorError::BadGeometry {
                op: "conv3d",
                detail: format!("kernel {k} does not fit {name} {ext} with padding {p}"),
            });
        }
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        d,
        h,
        w,
        do_: (d + 2 * p - k) / s + 1,
        ho: (h + 2 * p - k) / s + 1,
        wo: (w + 2 * p - k) / s + 1,
        k,
        s,
        p,
    })
}

/// Output-index range `z` such that `z*s + off` lands inside `[0, in_extent)`,
/// clipped to `[0, out_extent)`.
fn tap_range(out_extent: usize, in_extent: usize, off: isize, s: usize) -> Range<usize> {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_inclusive = (in_extent as isize - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    let hi = (hi_inclusive + 1).clamp(0, out_extent as isize) as usize;
    lo..lo.max(hi)
}

/// Direct 3D convolution, zero padding.
/// Output extents follow `floor((e + 2p - k)/s) + 1` per axis.
pub fn conv3d_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor, TensorError> {
    params.expect_kind("conv3d_forward", LayerKind::Conv3d)?;
    let g = conv_geometry(input, params)?;
    let mut out = Tensor::zeros(&[g.c_out, g.do_, g.ho, g.wo]);
    let vol_in = g.d * g.h * g.w;
    let vol_out = g.do_ * g.ho * g.wo;
    let ksz = g.k * g.k * g.k;
    let weight = params.weight.data();
    let bias = params.bias.data();
    let in_data = input.data();
    thread_pool().install(|| {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(vol_out)
            .enumerate()
            .for_each(|(co, out_ch)| {
                out_ch.iter_mut().for_each(|v| *v = bias[co]);
                for ci in 0..g.c_in {
                    let in_ch = &in_data[ci * vol_in..(ci + 1) * vol_in];
                    let w_base = (co * g.c_in + ci) * ksz;
                    for kz in 0..g.k {
                        let zr = tap_range(g.do_, g.d, kz as isize - g.p as isize, g.s);
                        for ky in 0..g.k {
                            let yr = tap_range(g.ho, g.h, ky as isize - g.p as isize, g.s);
                            for kx in 0..g.k {
                                let xr = tap_range(g.wo, g.w, kx as isize - g.p as isize, g.s);
                                let wv = weight[w_base + (kz * g.k + ky) * g.k + kx];
                                for z in zr.clone() {
                                    let iz = z * g.s + kz - g.p;
                                    for y in yr.clone() {
                                        let iy = y * g.s + ky - g.p;
                                        let in_row = &in_ch[(iz * g.h + iy) * g.w..];
                                        let out_row = &mut out_ch[(z * g.ho + y) * g.wo..];
                                        for x in xr.clone() {
                                            out_row[x] += wv * in_row[x * g.s + kx - g.p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    });
    Ok(out)
}

/// Input, weight and bias gradients for [`conv3d_forward`].
pub fn conv3d_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<LayerGrads, TensorError> {
    params.expect_kind("conv3d_backward", LayerKind::Conv3d)?;
    let g = conv_geometry(input, params)?;
    let expected = vec![g.c_out, g.do_, g.ho, g.wo];
    if grad_out.shape() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_backward",
            expected,
            got: grad_out.shape().to_vec(),
        });
    }
    let vol_in = g.d * g.h * g.w;
    let vol_out = g.do_ * g.ho * g.wo;
    let ksz = g.k * g.k * g.k;
    let weight = params.weight.data();
    let in_data = input.data();
    let go = grad_out.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(params.weight.shape());
    let mut grad_bias = Tensor::zeros(params.bias.shape());

    thread_pool().install(|| {
        use rayon::prelude::*;
        // dL/dinput: scatter grad_out through the kernel, one task per input channel.
        grad_input
            .data_mut()
            .par_chunks_mut(vol_in)
            .enumerate()
            .for_each(|(ci, gin_ch)| {
                for co in 0..g.c_out {
                    let go_ch = &go[co * vol_out..(co + 1) * vol_out];
                    let w_base = (co * g.c_in + ci) * ksz;
                    for kz in 0..g.k {
                        let zr = tap_range(g.do_, g.d, kz as isize - g.p as isize, g.s);
                        for ky in 0..g.k {
                            let yr = tap_range(g.ho, g.h, ky as isize - g.p as isize, g.s);
                            for kx in 0..g.k {
                                let xr = tap_range(g.wo, g.w, kx as isize - g.p as isize, g.s);
                                let wv = weight[w_base + (kz * g.k + ky) * g.k + kx];
                                for z in zr.clone() {
                                    let iz = z * g.s + kz - g.p;
                                    for y in yr.clone() {
                                        let iy = y * g.s + ky - g.p;
                                        let gin_row = &mut gin_ch[(iz * g.h + iy) * g.w..];
                                        let go_row = &go_ch[(z * g.ho + y) * g.wo..];
                                        for x in xr.clone() {
                                            gin_row[x * g.s + kx - g.p] += wv * go_row[x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        // dL/dweight and dL/dbias, one task per output channel.
        grad_weight
            .data_mut()
            .par_chunks_mut(g.c_in * ksz)
            .zip(grad_bias.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(co, (gw_ch, gb))| {
                let go_ch = &go[co * vol_out..(co + 1) * vol_out];
                *gb = go_ch.iter().sum();
                for ci in 0..g.c_in {
                    let in_ch = &in_data[ci * vol_in..(ci + 1) * vol_in];
                    for kz in 0..g.k {
                        let zr = tap_range(g.do_, g.d, kz as isize - g.p as isize, g.s);
                        for ky in 0..g.k {
                            let yr = tap_range(g.ho, g.h, ky as isize - g.p as isize, g.s);
                            for kx in 0..g.k {
                                let xr = tap_range(g.wo, g.w, kx as isize - g.p as isize, g.s);
                                let mut acc = 0.0;
                                for z in zr.clone() {
                                    let iz = z * g.s + kz - g.p;
                                    for y in yr.clone() {
                                        let iy = y * g.s + ky - g.p;
                                        let in_row = &in_ch[(iz * g.h + iy) * g.w..];
                                        let go_row = &go_ch[(z * g.ho + y) * g.wo..];
                                        for x in xr.clone() {
                                            acc += go_row[x] * in_row[x * g.s + kx - g.p];
                                        }
                                    }
                                }
                                gw_ch[(ci * ksz) + (kz * g.k + ky) * g.k + kx] = acc;
                            }
                        }
                    }
                }
            });
    });
    Ok(LayerGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[derive(Debug, Clone, Copy)]
struct TConvGeom {
    c_in: usize,
    c_out: usize,
    d: usize,
    h: usize,
    w: usize,
    do_: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

fn tconv_geometry(input: &Tensor, params: &LayerParams) -> Result<TConvGeom, TensorError> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transposed",
            expected: vec![0, 0, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (c_in, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ws = params.weight.shape();
    if ws.len() != 5 || ws[0] != c_in || ws[2] != params.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transposed",
            expected: vec![c_in, ws.get(1).copied().unwrap_or(0), params.kernel, params.kernel, params.kernel],
            got: ws.to_vec(),
        });
    }
    let (k, s, p) = (params.kernel, params.stride, params.padding);
    if s == 0 {
        return Err(TensorError::BadGeometry {
            op: "conv3d_transposed",
            detail: "stride must be at least 1".into(),
        });
    }
    let out_extent = |e: usize| -> Result<usize, TensorError> {
        let raw = (e - 1) * s + k;
        if raw < 2 * p {
            return Err(TensorError::BadGeometry {
                op: "conv3d_transposed",
                detail: format!("padding {p} too large for extent {e}"),
            });
        }
        Ok(raw - 2 * p)
    };
    Ok(TConvGeom {
        c_in,
        c_out: ws[1],
        d,
        h,
        w,
        do_: out_extent(d)?,
        ho: out_extent(h)?,
        wo: out_extent(w)?,
        k,
        s,
        p,
    })
}

/// Transposed 3D convolution (scatter-add of the kernel at each input site).
/// For `k = s` and zero padding the output extents are `input × stride`.
pub fn conv3d_transposed_forward(
    input: &Tensor,
    params: &LayerParams,
) -> Result<Tensor, TensorError> {
    params.expect_kind("conv3d_transposed_forward", LayerKind::Conv3dTransposed)?;
    let g = tconv_geometry(input, params)?;
    let mut out = Tensor::zeros(&[g.c_out, g.do_, g.ho, g.wo]);
    let vol_in = g.d * g.h * g.w;
    let vol_out = g.do_ * g.ho * g.wo;
    let ksz = g.k * g.k * g.k;
    let weight = params.weight.data();
    let bias = params.bias.data();
    let in_data = input.data();
    thread_pool().install(|| {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(vol_out)
            .enumerate()
            .for_each(|(cb, out_ch)| {
                out_ch.iter_mut().for_each(|v| *v = bias[cb]);
                for ca in 0..g.c_in {
                    let in_ch = &in_data[ca * vol_in..(ca + 1) * vol_in];
                    let w_base = (ca * g.c_out + cb) * ksz;
                    for kz in 0..g.k {
                        let zr = tap_range(g.d, g.do_, kz as isize - g.p as isize, g.s);
                        for ky in 0..g.k {
                            let yr = tap_range(g.h, g.ho, ky as isize - g.p as isize, g.s);
                            for kx in 0..g.k {
                                let xr = tap_range(g.w, g.wo, kx as isize - g.p as isize, g.s);
                                let wv = weight[w_base + (kz * g.k + ky) * g.k + kx];
                                for z in zr.clone() {
                                    let oz = z * g.s + kz - g.p;
                                    for y in yr.clone() {
                                        let oy = y * g.s + ky - g.p;
                                        let in_row = &in_ch[(z * g.h + y) * g.w..];
                                        let out_row = &mut out_ch[(oz * g.ho + oy) * g.wo..];
                                        for x in xr.clone() {
                                            out_row[x * g.s + kx - g.p] += wv * in_row[x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    });
    Ok(out)
}

/// Input, weight and bias gradients for [`conv3d_transposed_forward`].
pub fn conv3d_transposed_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<LayerGrads, TensorError> {
    params.expect_kind("conv3d_transposed_backward", LayerKind::Conv3dTransposed)?;
    let g = tconv_geometry(input, params)?;
    let expected = vec![g.c_out, g.do_, g.ho, g.wo];
    if grad_out.shape() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transposed_backward",
            expected,
            got: grad_out.shape().to_vec(),
        });
    }
    let vol_in = g.d * g.h * g.w;
    let vol_out = g.do_ * g.ho * g.wo;
    let ksz = g.k * g.k * g.k;
    let weight = params.weight.data();
    let in_data = input.data();
    let go = grad_out.data();

    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(params.weight.shape());
    let mut grad_bias = Tensor::zeros(params.bias.shape());

    thread_pool().install(|| {
        use rayon::prelude::*;
        // dL/dinput gathers from grad_out; dL/dweight reduces over the same
        // taps. Both are chunked per input channel `ca`.
        grad_input
            .data_mut()
            .par_chunks_mut(vol_in)
            .zip(grad_weight.data_mut().par_chunks_mut(g.c_out * ksz))
            .enumerate()
            .for_each(|(ca, (gin_ch, gw_ch))| {
                let in_ch = &in_data[ca * vol_in..(ca + 1) * vol_in];
                for cb in 0..g.c_out {
                    let go_ch = &go[cb * vol_out..(cb + 1) * vol_out];
                    for kz in 0..g.k {
                        let zr = tap_range(g.d, g.do_, kz as isize - g.p as isize, g.s);
                        for ky in 0..g.k {
                            let yr = tap_range(g.h, g.ho, ky as isize - g.p as isize, g.s);
                            for kx in 0..g.k {
                                let xr = tap_range(g.w, g.wo, kx as isize - g.p as isize, g.s);
                                let wv = weight[(ca * g.c_out + cb) * ksz + (kz * g.k + ky) * g.k + kx];
                                let mut acc = 0.0;
                                for z in zr.clone() {
                                    let oz = z * g.s + kz - g.p;
                                    for y in yr.clone() {
                                        let oy = y * g.s + ky - g.p;
                                        let gin_row = &mut gin_ch[(z * g.h + y) * g.w..];
                                        let in_row = &in_ch[(z * g.h + y) * g.w..];
                                        let go_row = &go_ch[(oz * g.ho + oy) * g.wo..];
                                        for x in xr.clone() {
                                            let gov = go_row[x * g.s + kx - g.p];
                                            gin_row[x] += wv * gov;
                                            acc += gov * in_row[x];
                                        }
                                    }
                                }
                                gw_ch[cb * ksz + (kz * g.k + ky) * g.k + kx] = acc;
                            }
                        }
                    }
                }
            });
    });
    for (cb, gb) in grad_bias.data_mut().iter_mut().enumerate() {
        *gb = go[cb * vol_out..(cb + 1) * vol_out].iter().sum();
    }
    Ok(LayerGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

fn bn_geometry(input: &Tensor, params: &LayerParams) -> Result<(usize, usize), TensorError> {
    let shape = input.shape();
    if shape.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            expected: vec![0],
            got: shape.to_vec(),
        });
    }
    let channels = shape[0];
    if params.weight.shape() != [channels] || params.bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            expected: vec![channels],
            got: params.weight.shape().to_vec(),
        });
    }
    let n = input.len() / channels;
    if n < 2 {
        return Err(TensorError::DegenerateStatistics { channel: 0, count: n });
    }
    Ok((channels, n))
}

/// Batch normalization over axis 0 using current-batch statistics:
/// per-channel mean 0 / variance 1 before the affine scale and shift.
pub fn batchnorm_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor, TensorError> {
    params.expect_kind("batchnorm_forward", LayerKind::BatchNorm)?;
    let (_, n) = bn_geometry(input, params)?;
    let scale = params.weight.data();
    let shift = params.bias.data();
    let eps = params.epsilon;
    let mut out = Tensor::zeros(input.shape());
    let in_data = input.data();
    thread_pool().install(|| {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(c, out_ch)| {
                let in_ch = &in_data[c * n..(c + 1) * n];
                let mean = in_ch.iter().sum::<f64>() / n as f64;
                let var = in_ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for (o, &x) in out_ch.iter_mut().zip(in_ch) {
                    *o = scale[c] * ((x - mean) * inv_std) + shift[c];
                }
            });
    });
    Ok(out)
}

/// Input, scale and shift gradients for [`batchnorm_forward`].
/// Statistics are recomputed from the input, matching the forward pass bit
/// for bit.
pub fn batchnorm_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<LayerGrads, TensorError> {
    params.expect_kind("batchnorm_backward", LayerKind::BatchNorm)?;
    let (channels, n) = bn_geometry(input, params)?;
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm_backward",
            expected: input.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let scale = params.weight.data();
    let eps = params.epsilon;
    let in_data = input.data();
    let go = grad_out.data();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_scale = Tensor::zeros(&[channels]);
    let mut grad_shift = Tensor::zeros(&[channels]);
    thread_pool().install(|| {
        use rayon::prelude::*;
        grad_input
            .data_mut()
            .par_chunks_mut(n)
            .zip(grad_scale.data_mut().par_iter_mut())
            .zip(grad_shift.data_mut().par_iter_mut())
            .enumerate()
            .for_each(|(c, ((gin_ch, gs), gb))| {
                let in_ch = &in_data[c * n..(c + 1) * n];
                let go_ch = &go[c * n..(c + 1) * n];
                let nf = n as f64;
                let mean = in_ch.iter().sum::<f64>() / nf;
                let var = in_ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                let inv_std = 1.0 / (var + eps).sqrt();

                let mut sum_go = 0.0;
                let mut sum_go_xhat = 0.0;
                for (&g, &x) in go_ch.iter().zip(in_ch) {
                    let xhat = (x - mean) * inv_std;
                    sum_go += g;
                    sum_go_xhat += g * xhat;
                }
                *gb = sum_go;
                *gs = sum_go_xhat;
                // dL/dx = (gamma*inv_std/n) * (n*g - sum(g) - xhat*sum(g*xhat))
                let coeff = scale[c] * inv_std / nf;
                for ((gi, &g), &x) in gin_ch.iter_mut().zip(go_ch).zip(in_ch) {
                    let xhat = (x - mean) * inv_std;
                    *gi = coeff * (nf * g - sum_go - xhat * sum_go_xhat);
                }
            });
    });
    Ok(LayerGrads {
        input: grad_input,
        weight: grad_scale,
        bias: grad_shift,
    })
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `max(0, x)` or `1/(1+e^-x)`; sigmoid output is strictly
/// inside `(0, 1)`.
pub fn activation_forward(input: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => input.data().iter().map(|&x| x.max(0.0)).collect(),
        Activation::Sigmoid => input.data().iter().map(|&x| sigmoid(x)).collect(),
    };
    Tensor {
        shape: input.shape().to_vec(),
        data,
        grad: None,
    }
}

/// Input gradient of [`activation_forward`]. ReLU uses the zero subgradient
/// at the kink.
pub fn activation_backward(
    input: &Tensor,
    kind: Activation,
    grad_out: &Tensor,
) -> Result<Tensor, TensorError> {
    if grad_out.shape() != input.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "activation_backward",
            expected: input.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| match kind {
            Activation::Relu => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                g * s * (1.0 - s)
            }
        })
        .collect();
    Ok(Tensor {
        shape: input.shape().to_vec(),
        data,
        grad: None,
    })
}

fn linear_geometry(input: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize), TensorError> {
    let shape = input.shape();
    if shape.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            expected: vec![0],
            got: shape.to_vec(),
        });
    }
    let c_in = shape[0];
    let ws = params.weight.shape();
    if ws.len() != 2 || ws[1] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            expected: vec![ws.first().copied().unwrap_or(0), c_in],
            got: ws.to_vec(),
        });
    }
    Ok((c_in, ws[0], input.len() / c_in))
}

/// Channel-wise linear projection (a 1x1x1 convolution): axis 0 is mapped
/// through `weight [C_out, C_in]`, all remaining axes pass through.
pub fn linear_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor, TensorError> {
    params.expect_kind("linear_forward", LayerKind::Linear)?;
    let (c_in, c_out, n) = linear_geometry(input, params)?;
    let mut shape = input.shape().to_vec();
    shape[0] = c_out;
    let mut out = Tensor::zeros(&shape);
    let weight = params.weight.data();
    let bias = params.bias.data();
    let in_data = input.data();
    for co in 0..c_out {
        let out_ch = &mut out.data[co * n..(co + 1) * n];
        out_ch.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let wv = weight[co * c_in + ci];
            let in_ch = &in_data[ci * n..(ci + 1) * n];
            for (o, &x) in out_ch.iter_mut().zip(in_ch) {
                *o += wv * x;
            }
        }
    }
    Ok(out)
}

/// Input, weight and bias gradients for [`linear_forward`].
pub fn linear_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<LayerGrads, TensorError> {
    params.expect_kind("linear_backward", LayerKind::Linear)?;
    let (c_in, c_out, n) = linear_geometry(input, params)?;
    let mut expected = input.shape().to_vec();
    expected[0] = c_out;
    if grad_out.shape() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "linear_backward",
            expected,
            got: grad_out.shape().to_vec(),
        });
    }
    let weight = params.weight.data();
    let in_data = input.data();
    let go = grad_out.data();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(params.weight.shape());
    let mut grad_bias = Tensor::zeros(params.bias.shape());
    for co in 0..c_out {
        let go_ch = &go[co * n..(co + 1) * n];
        grad_bias.data[co] = go_ch.iter().sum();
        for ci in 0..c_in {
            let wv = weight[co * c_in + ci];
            let in_ch = &in_data[ci * n..(ci + 1) * n];
            let gin_ch = &mut grad_input.data[ci * n..(ci + 1) * n];
            let mut acc = 0.0;
            for ((gi, &g), &x) in gin_ch.iter_mut().zip(go_ch).zip(in_ch) {
                *gi += wv * g;
                acc += g * x;
            }
            grad_weight.data[co * c_in + ci] = acc;
        }
    }
    Ok(LayerGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Naive seven-loop convolution oracle; intentionally independent of the
    /// kernel implementation above.
    fn conv3d_oracle(input: &Tensor, p: &LayerParams) -> Tensor {
        let (ci_n, d, h, w) = {
            let s = input.shape();
            (s[0], s[1], s[2], s[3])
        };
        let co_n = p.weight.shape()[0];
        let (k, s, pad) = (p.kernel as isize, p.stride as isize, p.padding as isize);
        let do_ = ((d as isize + 2 * pad - k) / s + 1) as usize;
        let ho = ((h as isize + 2 * pad - k) / s + 1) as usize;
        let wo = ((w as isize + 2 * pad - k) / s + 1) as usize;
        let mut out = Tensor::zeros(&[co_n, do_, ho, wo]);
        for co in 0..co_n {
            for z in 0..do_ {
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = p.bias.at(&[co]);
                        for ci in 0..ci_n {
                            for kz in 0..k as usize {
                                for ky in 0..k as usize {
                                    for kx in 0..k as usize {
                                        let iz = z as isize * s + kz as isize - pad;
                                        let iy = y as isize * s + ky as isize - pad;
                                        let ix = x as isize * s + kx as isize - pad;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        acc += p.weight.at(&[co, ci, kz, ky, kx])
                                            * input.at(&[ci, iz, iy, ix]);
                                    }
                                }
                            }
                        }
                        *out.at_mut(&[co, z, y, x]) = acc;
                    }
                }
            }
        }
        out
    }

    /// Naive scatter-add oracle for the transposed convolution.
    fn tconv_oracle(input: &Tensor, p: &LayerParams) -> Tensor {
        let (ca_n, d, h, w) = {
            let s = input.shape();
            (s[0], s[1], s[2], s[3])
        };
        let cb_n = p.weight.shape()[1];
        let (k, s, pad) = (p.kernel, p.stride, p.padding as isize);
        let do_ = (d - 1) * s + k - 2 * pad as usize;
        let ho = (h - 1) * s + k - 2 * pad as usize;
        let wo = (w - 1) * s + k - 2 * pad as usize;
        let mut out = Tensor::zeros(&[cb_n, do_, ho, wo]);
        for cb in 0..cb_n {
            for v in out.data_mut()[cb * do_ * ho * wo..(cb + 1) * do_ * ho * wo].iter_mut() {
                *v = p.bias.at(&[cb]);
            }
        }
        for ca in 0..ca_n {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let xv = input.at(&[ca, z, y, x]);
                        for cb in 0..cb_n {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let oz = (z * s + kz) as isize - pad;
                                        let oy = (y * s + ky) as isize - pad;
                                        let ox = (x * s + kx) as isize - pad;
                                        if oz < 0 || oy < 0 || ox < 0 {
                                            continue;
                                        }
                                        let (oz, oy, ox) = (oz as usize, oy as usize, ox as usize);
                                        if oz >= do_ || oy >= ho || ox >= wo {
                                            continue;
                                        }
                                        *out.at_mut(&[cb, oz, oy, ox]) +=
                                            xv * p.weight.at(&[ca, cb, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut p = LayerParams::conv3d(1, 1, 1, 1, 0);
        p.weight.data_mut()[0] = 1.0;
        let input = random_tensor(&[1, 3, 4, 5], &mut rng(1));
        let out = conv3d_forward(&input, &p).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_kernel_sums_neighborhood() {
        // Constant input c, all-ones 3^3 kernel, pad 1: interior voxels see
        // the full 27-tap neighborhood.
        let c = 0.75;
        let mut p = LayerParams::conv3d(1, 1, 3, 1, 1);
        p.weight.data_mut().iter_mut().for_each(|w| *w = 1.0);
        let input = Tensor::filled(&[1, 4, 4, 4], c);
        let out = conv3d_forward(&input, &p).unwrap();
        for z in 1..3 {
            for y in 1..3 {
                for x in 1..3 {
                    assert!((out.at(&[0, z, y, x]) - 27.0 * c).abs() < 1e-12);
                }
            }
        }
        // A corner voxel only sees the 2x2x2 in-bounds taps.
        assert!((out.at(&[0, 0, 0, 0]) - 8.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(7);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let mut p = LayerParams::conv3d(2, 3, 3, stride, padding);
            p.weight = random_tensor(&[3, 2, 3, 3, 3], &mut r);
            p.bias = random_tensor(&[3], &mut r);
            let input = random_tensor(&[2, 4, 4, 4], &mut r);
            let got = conv3d_forward(&input, &p).unwrap();
            let want = conv3d_oracle(&input, &p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn conv_output_extent_formula() {
        let p = LayerParams::conv3d(1, 1, 3, 2, 1);
        let input = Tensor::zeros(&[1, 7, 8, 9]);
        let out = conv3d_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let p = LayerParams::conv3d(2, 1, 3, 1, 1);
        let input = Tensor::zeros(&[3, 4, 4, 4]);
        assert!(matches!(
            conv3d_forward(&input, &p),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tconv_single_element_scatter() {
        let mut p = LayerParams::conv3d_transposed(1, 1, 2, 2);
        let mut r = rng(3);
        p.weight = random_tensor(&[1, 1, 2, 2, 2], &mut r);
        let v = 1.7;
        let input = Tensor::filled(&[1, 1, 1, 1], v);
        let out = conv3d_transposed_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        for (o, w) in out.data().iter().zip(p.weight.data()) {
            assert!((o - v * w).abs() < 1e-15);
        }
    }

    #[test]
    fn tconv_stride_two_tiles_disjointly() {
        // k = s = 2 tiles the output: every output voxel is covered by
        // exactly one input voxel.
        let mut p = LayerParams::conv3d_transposed(1, 1, 2, 2);
        p.weight.data_mut().iter_mut().for_each(|w| *w = 1.0);
        let input = Tensor::filled(&[1, 2, 2, 2], 0.4);
        let out = conv3d_transposed_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 4]);
        for &v in out.data() {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn tconv_matches_naive_oracle() {
        let mut r = rng(11);
        let mut p = LayerParams::conv3d_transposed(3, 2, 2, 2);
        p.weight = random_tensor(&[3, 2, 2, 2, 2], &mut r);
        p.bias = random_tensor(&[2], &mut r);
        let input = random_tensor(&[3, 3, 4, 2], &mut r);
        let got = conv3d_transposed_forward(&input, &p).unwrap();
        let want = tconv_oracle(&input, &p);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_and_tconv_are_adjoint() {
        // <conv(x), y> == <x, tconv(y)> for the same weight tensor.
        let mut r = rng(23);
        let weight = random_tensor(&[3, 2, 3, 3, 3], &mut r);
        let mut conv = LayerParams::conv3d(2, 3, 3, 2, 1);
        conv.weight = weight.clone();
        let mut tconv = LayerParams::conv3d_transposed(3, 2, 3, 2);
        tconv.weight = weight;
        tconv.padding = 1;

        let x = random_tensor(&[2, 5, 5, 5], &mut r);
        let cx = conv3d_forward(&x, &conv).unwrap();
        let y = random_tensor(cx.shape(), &mut r);
        let ty = conv3d_transposed_forward(&y, &tconv).unwrap();
        assert_eq!(ty.shape(), x.shape());

        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn batchnorm_fixed_point_when_already_normalized() {
        // Zero-mean unit-variance input with scale 1 / shift 0 passes
        // through; epsilon 0 keeps the fixed point exact.
        let mut r = rng(5);
        let raw = random_tensor(&[2, 3, 2, 2], &mut r);
        let n = 12;
        let mut data = raw.data().to_vec();
        for c in 0..2 {
            let ch = &mut data[c * n..(c + 1) * n];
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            for v in ch.iter_mut() {
                *v = (*v - mean) / var.sqrt();
            }
        }
        let input = Tensor::from_vec(&[2, 3, 2, 2], data).unwrap();
        let mut p = LayerParams::batchnorm(2);
        p.epsilon = 0.0;
        let out = batchnorm_forward(&input, &p).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_shift() {
        let mut p = LayerParams::batchnorm(1);
        p.bias.data_mut()[0] = 0.3;
        let input = Tensor::filled(&[1, 2, 2, 2], 5.0);
        let out = batchnorm_forward(&input, &p).unwrap();
        for &v in out.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_normalizes_random_input() {
        let mut r = rng(9);
        let input = Tensor::from_fn(&[3, 4, 4, 4], |_| r.gen_range(-3.0..5.0));
        let mut p = LayerParams::batchnorm(3);
        p.epsilon = 0.0;
        let out = batchnorm_forward(&input, &p).unwrap();
        let n = 64;
        for c in 0..3 {
            let ch = &out.data()[c * n..(c + 1) * n];
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_single_element_channel() {
        let p = LayerParams::batchnorm(2);
        let input = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(matches!(
            batchnorm_forward(&input, &p),
            Err(TensorError::DegenerateStatistics { .. })
        ));
    }

    #[test]
    fn activations_scalar_cases() {
        let input = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let relu = activation_forward(&input, Activation::Relu);
        assert_eq!(relu.data(), &[0.0, 0.0, 2.0]);

        let zero = Tensor::zeros(&[1]);
        let sig = activation_forward(&zero, Activation::Sigmoid);
        assert_eq!(sig.data(), &[0.5]);

        let ln3 = Tensor::from_vec(&[1], vec![3.0f64.ln()]).unwrap();
        let sig = activation_forward(&ln3, Activation::Sigmoid);
        assert!((sig.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_backward_quarter_at_zero() {
        let input = Tensor::zeros(&[1]);
        let gout = Tensor::filled(&[1], 1.0);
        let gin = activation_backward(&input, Activation::Sigmoid, &gout).unwrap();
        assert!((gin.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn identity_conv_backward_passes_grads_through() {
        // loss = sum(output) with an identity kernel: input grad is all ones.
        let mut p = LayerParams::conv3d(1, 1, 1, 1, 0);
        p.weight.data_mut()[0] = 1.0;
        let input = random_tensor(&[1, 3, 3, 3], &mut rng(2));
        let gout = Tensor::filled(&[1, 3, 3, 3], 1.0);
        let grads = conv3d_backward(&input, &p, &gout).unwrap();
        for &g in grads.input.data() {
            assert_eq!(g, 1.0);
        }
        // dL/dw for the identity kernel is the sum of the input.
        let want: f64 = input.data().iter().sum();
        assert!((grads.weight.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn linear_projects_channels() {
        let mut p = LayerParams::linear(2, 1);
        p.weight.data_mut().copy_from_slice(&[2.0, -1.0]);
        p.bias.data_mut()[0] = 0.5;
        let input = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = linear_forward(&input, &p).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert!((out.data()[0] - (2.0 * 1.0 - 3.0 + 0.5)).abs() < 1e-15);
        assert!((out.data()[1] - (2.0 * 2.0 - 4.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut r = rng(31);
        let mut p = LayerParams::conv3d(2, 4, 3, 1, 1);
        p.weight = random_tensor(&[4, 2, 3, 3, 3], &mut r);
        p.bias = random_tensor(&[4], &mut r);
        let input = random_tensor(&[2, 6, 6, 6], &mut r);
        let a = conv3d_forward(&input, &p).unwrap();
        let b = conv3d_forward(&input, &p).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let p = LayerParams::batchnorm(1);
        let input = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            conv3d_forward(&input, &p),
            Err(TensorError::KindMismatch { .. })
        ));
    }
}
