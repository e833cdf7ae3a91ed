use std::ops::Range;

use rayon::prelude::*;

use super::{matmul, shape_err, ConvGeometry, Real, Result, Tensor, TensorError};

/// Output positions `o` for which `o * stride + tap - pad` lands inside `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, stride: usize, tap: usize, pad: usize) -> Range<usize> {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if input + pad <= tap {
        return 0..0;
    }
    let hi = ((input - 1 + pad - tap) / stride + 1).min(out);
    lo.min(hi)..hi
}

fn check_depthwise<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    const OP: &str = "depthwise_conv2d";
    let (n, c, h, w) = input.dims4(OP)?;
    let (kc, one, kh, kw) = kernel.dims4(OP)?;
    if kc != c || one != 1 {
        return Err(shape_err(OP, format!("kernel {:?} for {c} input channels", kernel.shape())));
    }
    if kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(shape_err(OP, format!("kernel {kh}x{kw} but geometry {}x{}", geom.kernel_h, geom.kernel_w)));
    }
    if geom.groups != c {
        return Err(TensorError::InvalidGeometry { op: OP, detail: format!("groups {} != channels {c}", geom.groups) });
    }
    let (oh, ow) = geom.output_extent(h, w)?;
    Ok((n, c, h, w, oh, ow))
}

/// Per-channel 2-D cross-correlation with zero padding.
///
/// `input` is N×C×H×W and `kernel` is C×1×Kh×Kw.
pub fn depthwise_conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (n, c, h, w, oh, ow) = check_depthwise(input, kernel, geom)?;
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let x = input.data();
    let k = kernel.data();
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, out_plane)| {
        let ch = plane % c;
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let taps = &k[ch * kh * kw..(ch + 1) * kh * kw];
        for ki in 0..kh {
            let rows = valid_range(oh, h, geom.stride_h, ki, geom.pad_h);
            for kj in 0..kw {
                let kv = taps[ki * kw + kj];
                if kv == T::zero() {
                    continue;
                }
                let cols = valid_range(ow, w, geom.stride_w, kj, geom.pad_w);
                if cols.is_empty() {
                    continue;
                }
                for o_r in rows.clone() {
                    let ir = o_r * geom.stride_h + ki - geom.pad_h;
                    let in_row = &src[ir * w..(ir + 1) * w];
                    let out_row = &mut out_plane[o_r * ow..(o_r + 1) * ow];
                    if geom.stride_w == 1 {
                        let start = cols.start + kj - geom.pad_w;
                        let len = cols.len();
                        for (o, &i) in out_row[cols.clone()].iter_mut().zip(&in_row[start..start + len]) {
                            *o += kv * i;
                        }
                    } else {
                        for o_c in cols.clone() {
                            out_row[o_c] += kv * in_row[o_c * geom.stride_w + kj - geom.pad_w];
                        }
                    }
                }
            }
        }
    });
    Tensor::new([n, c, oh, ow], out)?.finite("depthwise_conv2d")
}

/// Returns `(grad_input, grad_kernel)`.
pub fn depthwise_conv2d_vjp<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w, oh, ow) = check_depthwise(input, kernel, geom)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(shape_err("depthwise_conv2d_vjp", format!("grad {:?} vs output {:?}", grad_out.shape(), [n, c, oh, ow])));
    }
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); n * c * h * w];
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(h * w)
        .enumerate()
        .map(|(plane, gin_plane)| {
            let ch = plane % c;
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let gplane = &g[plane * oh * ow..(plane + 1) * oh * ow];
            let taps = &k[ch * kh * kw..(ch + 1) * kh * kw];
            let mut gk = vec![T::zero(); kh * kw];
            for ki in 0..kh {
                let rows = valid_range(oh, h, geom.stride_h, ki, geom.pad_h);
                for kj in 0..kw {
                    let kv = taps[ki * kw + kj];
                    let cols = valid_range(ow, w, geom.stride_w, kj, geom.pad_w);
                    if cols.is_empty() {
                        continue;
                    }
                    let mut acc = T::zero();
                    for o_r in rows.clone() {
                        let ir = o_r * geom.stride_h + ki - geom.pad_h;
                        let g_row = &gplane[o_r * ow..(o_r + 1) * ow];
                        let in_row = &src[ir * w..(ir + 1) * w];
                        let gin_row = &mut gin_plane[ir * w..(ir + 1) * w];
                        for o_c in cols.clone() {
                            let ic = o_c * geom.stride_w + kj - geom.pad_w;
                            acc += g_row[o_c] * in_row[ic];
                            gin_row[ic] += kv * g_row[o_c];
                        }
                    }
                    gk[ki * kw + kj] = acc;
                }
            }
            gk
        })
        .collect();
    let mut grad_k = vec![T::zero(); c * kh * kw];
    for (plane, gk) in partials.iter().enumerate() {
        let ch = plane % c;
        for (dst, &v) in grad_k[ch * kh * kw..(ch + 1) * kh * kw].iter_mut().zip(gk) {
            *dst += v;
        }
    }
    Ok((
        Tensor::new([n, c, h, w], grad_in)?.finite("depthwise_conv2d_vjp")?,
        Tensor::new([c, 1, kh, kw], grad_k)?.finite("depthwise_conv2d_vjp")?,
    ))
}

struct DenseDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn check_dense<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, geom: &ConvGeometry) -> Result<DenseDims> {
    const OP: &str = "dense_conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, kcin, kh, kw) = kernel.dims4(OP)?;
    if geom.groups != 1 {
        return Err(TensorError::InvalidGeometry { op: OP, detail: "dense convolution requires groups = 1".into() });
    }
    if kcin != cin {
        return Err(shape_err(OP, format!("kernel expects {kcin} input channels, input has {cin}")));
    }
    if kh != geom.kernel_h || kw != geom.kernel_w {
        return Err(shape_err(OP, format!("kernel {kh}x{kw} but geometry {}x{}", geom.kernel_h, geom.kernel_w)));
    }
    let (oh, ow) = geom.output_extent(h, w)?;
    Ok(DenseDims { n, cin, h, w, cout, oh, ow })
}

/// Unfold one sample into a (Cin·Kh·Kw)×(OH·OW) column matrix.
fn im2col<T: Real>(sample: &[T], d: &DenseDims, geom: &ConvGeometry, col: &mut [T]) {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let p = d.oh * d.ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..d.cin {
        let plane = &sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..kh {
            let rows = valid_range(d.oh, d.h, geom.stride_h, ki, geom.pad_h);
            for kj in 0..kw {
                let cols = valid_range(d.ow, d.w, geom.stride_w, kj, geom.pad_w);
                let row = &mut col[((ci * kh + ki) * kw + kj) * p..][..p];
                for o_r in rows.clone() {
                    let ir = o_r * geom.stride_h + ki - geom.pad_h;
                    for o_c in cols.clone() {
                        row[o_r * d.ow + o_c] = plane[ir * d.w + o_c * geom.stride_w + kj - geom.pad_w];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], d: &DenseDims, geom: &ConvGeometry, sample: &mut [T]) {
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let p = d.oh * d.ow;
    for ci in 0..d.cin {
        let plane = &mut sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..kh {
            let rows = valid_range(d.oh, d.h, geom.stride_h, ki, geom.pad_h);
            for kj in 0..kw {
                let cols = valid_range(d.ow, d.w, geom.stride_w, kj, geom.pad_w);
                let row = &col[((ci * kh + ki) * kw + kj) * p..][..p];
                for o_r in rows.clone() {
                    let ir = o_r * geom.stride_h + ki - geom.pad_h;
                    for o_c in cols.clone() {
                        plane[ir * d.w + o_c * geom.stride_w + kj - geom.pad_w] += row[o_r * d.ow + o_c];
                    }
                }
            }
        }
    }
}

/// Full cross-correlation, N×Cin×H×W with a Cout×Cin×Kh×Kw kernel.
pub fn dense_conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let d = check_dense(input, kernel, geom)?;
    let kk = d.cin * geom.kernel_h * geom.kernel_w;
    let p = d.oh * d.ow;
    let x = input.data();
    let wts = kernel.data();
    let mut out = vec![T::zero(); d.n * d.cout * p];
    out.par_chunks_mut(d.cout * p).enumerate().for_each(|(s, out_s)| {
        let mut col = vec![T::zero(); kk * p];
        im2col(&x[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w], &d, geom, &mut col);
        matmul(out_s, wts, &col, d.cout, kk, p, false, false, false);
    });
    Tensor::new([d.n, d.cout, d.oh, d.ow], out)?.finite("dense_conv2d")
}

/// Returns `(grad_input, grad_kernel)`.
pub fn dense_conv2d_vjp<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = check_dense(input, kernel, geom)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(shape_err("dense_conv2d_vjp", format!("grad {:?}", grad_out.shape())));
    }
    let kk = d.cin * geom.kernel_h * geom.kernel_w;
    let p = d.oh * d.ow;
    let x = input.data();
    let wts = kernel.data();
    let g = grad_out.data();
    let in_len = d.cin * d.h * d.w;
    let mut grad_in = vec![T::zero(); d.n * in_len];
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(s, gin_s)| {
            let mut col = vec![T::zero(); kk * p];
            im2col(&x[s * in_len..(s + 1) * in_len], &d, geom, &mut col);
            let g_s = &g[s * d.cout * p..(s + 1) * d.cout * p];
            let mut gw = vec![T::zero(); d.cout * kk];
            matmul(&mut gw, g_s, &col, d.cout, p, kk, false, true, false);
            matmul(&mut col, wts, g_s, kk, d.cout, p, true, false, false);
            col2im(&col, &d, geom, gin_s);
            gw
        })
        .collect();
    let mut grad_w = vec![T::zero(); d.cout * kk];
    for gw in &partials {
        grad_w.iter_mut().zip(gw).for_each(|(a, &b)| *a += b);
    }
    Ok((
        Tensor::new([d.n, d.cin, d.h, d.w], grad_in)?.finite("dense_conv2d_vjp")?,
        Tensor::new(kernel.shape().to_vec(), grad_w)?.finite("dense_conv2d_vjp")?,
    ))
}
