use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::tensor::{shape_err, Real, Result, Tensor, TensorError};

/// Mean binary cross-entropy over all N·C logits, in the stable form
/// `max(z,0) − z·t + ln(1 + e^−|z|)`. Returns the loss and ∂loss/∂logits.
pub fn bce_multilabel<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(shape_err("bce", format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape())));
    }
    if !logits.is_finite() {
        return Err(TensorError::NonFinite { op: "bce" });
    }
    let count = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        let (z, t) = (z.as_f64(), t.as_f64());
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push(T::lit((sigmoid(z) - t) / count));
    }
    Ok((loss / count, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Symmetric smoothing for binary targets: `t·(1−ε) + ε/2`.
pub fn label_smooth<T: Real>(targets: &Tensor<T>, eps: f64) -> Tensor<T> {
    if eps == 0.0 {
        return targets.clone();
    }
    targets.map(|t| T::lit(t.as_f64() * (1.0 - eps) + eps / 2.0))
}

/// Mixes item i with item `partners[i]`: `λ·a + (1−λ)·b` on the leading axis.
pub fn mixup_with<T: Real>(x: &Tensor<T>, y: &Tensor<T>, lambda: f64, partners: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = *x.shape().first().unwrap_or(&0);
    if y.shape().first() != Some(&n) || partners.len() != n || partners.iter().any(|&p| p >= n) {
        return Err(shape_err("mixup", format!("x {:?}, y {:?}, {} partners", x.shape(), y.shape(), partners.len())));
    }
    let mix = |t: &Tensor<T>| {
        let per = t.len() / n.max(1);
        let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
        let src = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &p) in partners.iter().enumerate() {
            let a = &src[i * per..(i + 1) * per];
            let b = &src[p * per..(p + 1) * per];
            out.extend(a.iter().zip(b).map(|(&a, &b)| l * a + r * b));
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok((mix(x)?, mix(y)?))
}

/// Draws λ ~ Beta(α, α) and a uniform partner for every item. `α = 0`
/// disables mixing. Returns the mixed batch and λ.
pub fn mixup<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, y: &Tensor<T>, alpha: f64, rng: &mut R) -> Result<(Tensor<T>, Tensor<T>, f64)> {
    if alpha <= 0.0 {
        return Ok((x.clone(), y.clone(), 1.0));
    }
    let n = *x.shape().first().unwrap_or(&0);
    let lambda = Beta::new(alpha, alpha).expect("positive alpha").sample(rng);
    let partners: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let (mx, my) = mixup_with(x, y, lambda, &partners)?;
    Ok((mx, my, lambda))
}
