use rayon::prelude::*;

use super::{matmul, shape_err, Real, Result, Tensor};

/// Rows per GEMM work unit. Fixed so chunking (and therefore rounding)
/// does not depend on the thread count.
const ROW_CHUNK: usize = 256;

fn trailing(op: &'static str, t: &Tensor<impl Real>, expected: usize) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c == expected && c > 0 => Ok(t.len() / c),
        _ => Err(shape_err(op, format!("trailing axis of {:?} must be {expected}", t.shape()))),
    }
}

fn vector(op: &'static str, t: &Tensor<impl Real>, expected: usize) -> Result<()> {
    if t.shape() != [expected] {
        return Err(shape_err(op, format!("expected [{expected}], got {:?}", t.shape())));
    }
    Ok(())
}

/// Position-wise affine map over the trailing axis: `y = x Wᵀ + b`.
pub fn pointwise_linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "pointwise_linear";
    let [cout, cin] = weight.shape()[..] else {
        return Err(shape_err(OP, format!("weight must be 2-d, got {:?}", weight.shape())));
    };
    let rows = trailing(OP, input, cin)?;
    vector(OP, bias, cout)?;
    let mut out = vec![T::zero(); rows * cout];
    let x = input.data();
    out.par_chunks_mut(ROW_CHUNK * cout).enumerate().for_each(|(i, chunk)| {
        let r = chunk.len() / cout;
        let xs = &x[i * ROW_CHUNK * cin..][..r * cin];
        for row in chunk.chunks_mut(cout) {
            row.copy_from_slice(bias.data());
        }
        matmul(chunk, xs, weight.data(), r, cin, cout, false, true, true);
    });
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)?.finite(OP)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn pointwise_linear_vjp<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    const OP: &str = "pointwise_linear_vjp";
    let [cout, cin] = weight.shape()[..] else {
        return Err(shape_err(OP, "weight must be 2-d"));
    };
    let rows = trailing(OP, input, cin)?;
    if trailing(OP, grad_out, cout)? != rows {
        return Err(shape_err(OP, "grad rows differ from input rows"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); rows * cin];
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_in
        .par_chunks_mut(ROW_CHUNK * cin)
        .enumerate()
        .map(|(i, gin)| {
            let r = gin.len() / cin;
            let xs = &x[i * ROW_CHUNK * cin..][..r * cin];
            let gs = &g[i * ROW_CHUNK * cout..][..r * cout];
            matmul(gin, gs, weight.data(), r, cout, cin, false, false, false);
            let mut gw = vec![T::zero(); cout * cin];
            matmul(&mut gw, gs, xs, cout, r, cin, true, false, false);
            let mut gb = vec![T::zero(); cout];
            for row in gs.chunks(cout) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            (gw, gb)
        })
        .collect();
    let mut gw = vec![T::zero(); cout * cin];
    let mut gb = vec![T::zero(); cout];
    for (pw, pb) in &partials {
        gw.iter_mut().zip(pw).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, &b)| *a += b);
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?.finite(OP)?,
        weight: Tensor::new([cout, cin], gw)?.finite(OP)?,
        bias: Tensor::new([cout], gb)?.finite(OP)?,
    })
}

/// Normalizes each position over the trailing (channel) axis, then applies
/// the per-channel affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    const OP: &str = "layer_norm";
    let c = *input.shape().last().unwrap_or(&0);
    trailing(OP, input, c)?;
    vector(OP, gamma, c)?;
    vector(OP, beta, c)?;
    let eps = T::lit(eps);
    let inv_c = T::lit(1.0 / c as f64);
    let mut out = input.data().to_vec();
    out.par_chunks_mut(c * ROW_CHUNK).for_each(|chunk| {
        for row in chunk.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = (var + eps).sqrt().recip();
            for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
                *v = (*v - mean) * rstd * g + b;
            }
        }
    });
    Tensor::new(input.shape().to_vec(), out)?.finite(OP)
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn layer_norm_vjp<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormGrads<T>> {
    const OP: &str = "layer_norm_vjp";
    let c = *input.shape().last().unwrap_or(&0);
    trailing(OP, input, c)?;
    vector(OP, gamma, c)?;
    if grad_out.shape() != input.shape() {
        return Err(shape_err(OP, "grad shape differs from input"));
    }
    let eps = T::lit(eps);
    let inv_c = T::lit(1.0 / c as f64);
    let mut grad_in = vec![T::zero(); input.len()];
    let x = input.data();
    let g = grad_out.data();
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_in
        .par_chunks_mut(c * ROW_CHUNK)
        .enumerate()
        .map(|(i, gin)| {
            let base = i * c * ROW_CHUNK;
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let mut xhat = vec![T::zero(); c];
            let mut gxhat = vec![T::zero(); c];
            for (r, gin_row) in gin.chunks_mut(c).enumerate() {
                let xr = &x[base + r * c..][..c];
                let gr = &g[base + r * c..][..c];
                let mean = xr.iter().copied().sum::<T>() * inv_c;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let rstd = (var + eps).sqrt().recip();
                let mut mean_gx = T::zero();
                let mut mean_gxx = T::zero();
                for j in 0..c {
                    xhat[j] = (xr[j] - mean) * rstd;
                    gxhat[j] = gr[j] * gamma.data()[j];
                    gg[j] += gr[j] * xhat[j];
                    gb[j] += gr[j];
                    mean_gx += gxhat[j];
                    mean_gxx += gxhat[j] * xhat[j];
                }
                mean_gx *= inv_c;
                mean_gxx *= inv_c;
                for j in 0..c {
                    gin_row[j] = rstd * (gxhat[j] - mean_gx - xhat[j] * mean_gxx);
                }
            }
            (gg, gb)
        })
        .collect();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (pg, pb) in &partials {
        gg.iter_mut().zip(pg).for_each(|(a, &b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, &b)| *a += b);
    }
    Ok(LayerNormGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?.finite(OP)?,
        gamma: Tensor::new([c], gg)?,
        beta: Tensor::new([c], gb)?,
    })
}

#[inline]
fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.map(|x| x * std_normal_cdf(x)).finite("gelu")
}

pub fn gelu_vjp<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != input.shape() {
        return Err(shape_err("gelu_vjp", "grad shape differs from input"));
    }
    let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| {
            let pdf = (-(x * x) * T::lit(0.5)).exp() * inv_sqrt_2pi;
            g * (std_normal_cdf(x) + x * pdf)
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)?.finite("gelu_vjp")
}

/// Mean over the spatial axes, N×C×H×W → N×C.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(shape_err("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = input.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([n, c], data)?.finite("global_avg_pool")
}

pub fn global_avg_pool_vjp<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(shape_err("global_avg_pool_vjp", "input shape must be 4-d"));
    };
    if grad_out.shape() != [n, c] {
        return Err(shape_err("global_avg_pool_vjp", format!("grad {:?}", grad_out.shape())));
    }
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat_n(g * inv, h * w));
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// N×C×H×W → N×H×W×C.
pub fn nchw_to_nhwc<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("nchw_to_nhwc")?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * w..][..h * w];
            for (p, &v) in plane.iter().enumerate() {
                out[(b * h * w + p) * c + ch] = v;
            }
        }
    }
    Tensor::new([n, h, w, c], out)
}

/// N×H×W×C → N×C×H×W.
pub fn nhwc_to_nchw<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.dims4("nhwc_to_nchw")?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for p in 0..h * w {
            let px = &x[(b * h * w + p) * c..][..c];
            for (ch, &v) in px.iter().enumerate() {
                out[(b * c + ch) * h * w + p] = v;
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Adds a per-channel bias to an N×C×H×W tensor.
pub fn add_channel_bias<T: Real>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = input.dims4("add_channel_bias")?;
    vector("add_channel_bias", bias, c)?;
    let mut out = input.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = bias.data()[i % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
    out.finite("add_channel_bias")
}

/// Gradient of the bias term in [`add_channel_bias`].
pub fn add_channel_bias_vjp<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = grad_out.dims4("add_channel_bias_vjp")?;
    let mut gb = vec![T::zero(); c];
    for (i, plane) in grad_out.data().chunks(h * w).enumerate() {
        gb[i % c] += plane.iter().copied().sum::<T>();
    }
    Tensor::new([c], gb)
}

/// Multiplies the trailing axis by a per-channel scale.
pub fn scale_channels<T: Real>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *input.shape().last().unwrap_or(&0);
    trailing("scale_channels", input, c)?;
    vector("scale_channels", scale, c)?;
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(c) {
        row.iter_mut().zip(scale.data()).for_each(|(v, &s)| *v *= s);
    }
    out.finite("scale_channels")
}

/// Returns `(grad_input, grad_scale)`.
pub fn scale_channels_vjp<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    scale: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = scale.len();
    if grad_out.shape() != input.shape() {
        return Err(shape_err("scale_channels_vjp", "grad shape differs from input"));
    }
    let mut gin = grad_out.clone();
    let mut gs = vec![T::zero(); c];
    for (grow, xrow) in gin.data_mut().chunks_mut(c).zip(input.data().chunks(c)) {
        for j in 0..c {
            gs[j] += grow[j] * xrow[j];
            grow[j] *= scale.data()[j];
        }
    }
    Ok((gin, Tensor::new([c], gs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_worked_example() {
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros([2]);
        assert_eq!(pointwise_linear(&x, &eye, &zero).unwrap(), x);
        let w = Tensor::new([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(pointwise_linear(&x, &w, &zero).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_spans_several_row_chunks() {
        let rows = ROW_CHUNK * 2 + 7;
        let x = Tensor::<f64>::from_fn([rows, 3], |i| (i % 11) as f64 - 5.0);
        let w = Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.0, 0.0, -0.25]).unwrap();
        let b = Tensor::new([2], vec![0.1, -0.2]).unwrap();
        let y = pointwise_linear(&x, &w, &b).unwrap();
        for r in 0..rows {
            let xr = &x.data()[r * 3..r * 3 + 3];
            for o in 0..2 {
                let e: f64 = (0..3).map(|i| w.data()[o * 3 + i] * xr[i]).sum::<f64>() + b.data()[o];
                assert!((y.data()[r * 2 + o] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_and_pair() {
        let x = Tensor::<f64>::full([2, 4], 3.5);
        let y = layer_norm(&x, &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), 1e-14).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::<f64>::new([3], vec![0.0, 10.0, 1.0]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        // Φ(1) = 0.5·(1 + erf(1/√2)) = 0.8413447460685429
        assert!((y.data()[2] - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([2, 3, 4, 5], 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        let g = Tensor::<f32>::new([1, 1], vec![2.0]).unwrap();
        assert_eq!(global_avg_pool_vjp(&g, &[1, 1, 2, 2]).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn permutes_invert() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |i| i as f32);
        let y = nchw_to_nhwc(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 3]);
        assert_eq!(y.data()[1], x.data()[20]);
        assert_eq!(nhwc_to_nchw(&y).unwrap(), x);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::<f32>::new([1, 1], vec![f32::INFINITY]).unwrap();
        let w = Tensor::new([1, 1], vec![1.0]).unwrap();
        assert!(pointwise_linear(&x, &w, &Tensor::zeros([1])).is_err());
    }
}
