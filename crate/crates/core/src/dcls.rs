//! Dilated convolution with learnable spacings.
//!
//! Each channel owns `kernel_count` elements with a weight, a continuous
//! 2-D position inside an S×S grid and (for the Gaussian version) a per-axis
//! standard deviation. The dense S×S depthwise kernel is materialized by
//! spreading every element's weight over the grid:
//!
//! * `Gauss`: a separable Gaussian normalized over the grid, so each
//!   element contributes exactly its weight in total.
//! * `Bilinear`: the usual bilinear split over the (at most four) integer
//!   neighbours of the position.
//!
//! Positions are in centered grid units: index `i` of the grid sits at
//! coordinate `i − (S−1)/2`, so the valid domain is `[−(S−1)/2, (S−1)/2]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::tensor::{ConvGeometry, Real, Tensor, TensorError};

/// σ floor added to `|SIG|`.
pub const DEFAULT_SIGMA_MIN: f64 = 0.1;
/// Weight initialization std.
pub const WEIGHT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DclsError {
    #[error("dilated kernel size must be odd (got {0})")]
    EvenKernelSize(usize),
    #[error("kernel count must be positive")]
    ZeroKernelCount,
    #[error("channel count must be positive")]
    ZeroChannels,
    #[error("sigma_min must be positive (got {0})")]
    SigmaMin(f64),
    #[error("gaussian construction requires sigmas")]
    MissingSigmas,
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DclsVersion {
    Gauss,
    Bilinear,
}

impl fmt::Display for DclsVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DclsVersion::Gauss => "gauss",
            DclsVersion::Bilinear => "bilinear",
        })
    }
}

impl FromStr for DclsVersion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gauss" | "gaussian" => Ok(DclsVersion::Gauss),
            "bilinear" => Ok(DclsVersion::Bilinear),
            other => Err(format!("unknown DCLS version '{other}' (expected gauss or bilinear)")),
        }
    }
}

/// Static shape of one DCLS layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DclsConfig {
    pub channels: usize,
    pub kernel_count: usize,
    pub dilated_size: usize,
    pub version: DclsVersion,
    pub sigma_min: f64,
}

impl DclsConfig {
    pub fn new(channels: usize, kernel_count: usize, dilated_size: usize, version: DclsVersion) -> Result<Self, DclsError> {
        let cfg = Self { channels, kernel_count, dilated_size, version, sigma_min: DEFAULT_SIGMA_MIN };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DclsError> {
        if self.dilated_size % 2 == 0 {
            return Err(DclsError::EvenKernelSize(self.dilated_size));
        }
        if self.kernel_count == 0 {
            return Err(DclsError::ZeroKernelCount);
        }
        if self.channels == 0 {
            return Err(DclsError::ZeroChannels);
        }
        if !(self.sigma_min > 0.0) {
            return Err(DclsError::SigmaMin(self.sigma_min));
        }
        Ok(())
    }

    /// Half-width `(S−1)/2` of the centered grid.
    pub fn extent(&self) -> f64 {
        (self.dilated_size as f64 - 1.0) / 2.0
    }

    /// Depthwise geometry with padding `S // 2`, which preserves spatial size.
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::same(self.dilated_size).with_groups(self.channels)
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.channels, self.kernel_count]
    }

    pub fn position_shape(&self) -> [usize; 3] {
        [2, self.channels, self.kernel_count]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.channels, 1, self.dilated_size, self.dilated_size]
    }

    /// Raw SIG value that yields `σ_eff = S/4`.
    pub fn initial_raw_sigma(&self) -> f64 {
        (self.dilated_size as f64 / 4.0 - self.sigma_min).max(0.0)
    }

    fn check<T: Real>(&self, weights: &Tensor<T>, positions: &Tensor<T>, sigmas: Option<&Tensor<T>>) -> Result<(), DclsError> {
        self.validate()?;
        if weights.shape() != self.weight_shape() {
            return Err(DclsError::Shape(format!("weights {:?}, expected {:?}", weights.shape(), self.weight_shape())));
        }
        if positions.shape() != self.position_shape() {
            return Err(DclsError::Shape(format!("positions {:?}, expected {:?}", positions.shape(), self.position_shape())));
        }
        match (self.version, sigmas) {
            (DclsVersion::Gauss, None) => return Err(DclsError::MissingSigmas),
            (DclsVersion::Gauss, Some(s)) if s.shape() != self.position_shape() => {
                return Err(DclsError::Shape(format!("sigmas {:?}, expected {:?}", s.shape(), self.position_shape())))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One layer's learnable DCLS parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DclsParams<T: Real = f32> {
    pub config: DclsConfig,
    /// C×m
    pub weights: Tensor<T>,
    /// 2×C×m, axis order (height, width)
    pub positions: Tensor<T>,
    /// 2×C×m raw values, `σ_eff = sigma_min + |SIG|`; `None` for bilinear.
    pub sigmas: Option<Tensor<T>>,
    pub share_tag: Option<String>,
}

impl<T: Real> DclsParams<T> {
    pub fn kernel(&self) -> Result<Tensor<T>, DclsError> {
        construct_kernel(&self.config, &self.weights, &self.positions, self.sigmas.as_ref())
    }

    pub fn kernel_vjp(&self, grad_kernel: &Tensor<T>) -> Result<DclsGrads<T>, DclsError> {
        construct_kernel_vjp(grad_kernel, &self.config, &self.weights, &self.positions, self.sigmas.as_ref())
    }

    pub fn clamp_positions(mut self) -> Self {
        clamp_positions(&self.config, &mut self.positions);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DclsGrads<T: Real> {
    pub weights: Tensor<T>,
    pub positions: Tensor<T>,
    pub sigmas: Option<Tensor<T>>,
}

/// Normalized Gaussian profile along one axis plus the logarithmic
/// derivatives needed by the vjp.
struct GaussAxis<T> {
    u: Vec<T>,
    dlog_dp: Vec<T>,
    dlog_dsigma: Vec<T>,
}

fn gauss_axis<T: Real>(p: T, sigma: T, size: usize, out: &mut GaussAxis<T>) {
    let half = T::lit((size as f64 - 1.0) / 2.0);
    let inv_var = (sigma * sigma).recip();
    let mut z = T::zero();
    for i in 0..size {
        let d = T::lit(i as f64) - half - p;
        let g = (-(d * d) * inv_var * T::lit(0.5)).exp();
        out.u[i] = g;
        out.dlog_dp[i] = d * inv_var;
        out.dlog_dsigma[i] = d * d * inv_var / sigma;
        z += g;
    }
    let inv_z = z.recip();
    out.u.iter_mut().for_each(|v| *v *= inv_z);
}

impl<T: Real> GaussAxis<T> {
    fn with_size(size: usize) -> Self {
        Self { u: vec![T::zero(); size], dlog_dp: vec![T::zero(); size], dlog_dsigma: vec![T::zero(); size] }
    }

    /// Given the gradient with respect to the normalized profile, returns
    /// the gradients with respect to the position and σ_eff.
    fn backprop(&self, grad_u: &[T]) -> (T, T) {
        let mean: T = self.u.iter().zip(grad_u).map(|(&u, &g)| u * g).sum();
        let mut gp = T::zero();
        let mut gs = T::zero();
        for i in 0..self.u.len() {
            let centered = self.u[i] * (grad_u[i] - mean);
            gp += centered * self.dlog_dp[i];
            gs += centered * self.dlog_dsigma[i];
        }
        (gp, gs)
    }
}

/// Bilinear fractions along one axis: up to two (grid index, weight,
/// d weight / d position) taps. Taps outside the grid are dropped.
fn bilinear_axis<T: Real>(p: T, size: usize) -> [(Option<usize>, T, T); 2] {
    let half = (size as f64 - 1.0) / 2.0;
    let floor = p.floor();
    let frac = p - floor;
    let on_lattice = frac == T::zero();
    let (d_lo, d_hi) = if on_lattice { (T::zero(), T::zero()) } else { (-T::one(), T::one()) };
    let base = floor.as_f64() + half;
    let index = |offset: f64| {
        let i = base + offset;
        (i >= 0.0 && i < size as f64).then_some(i as usize)
    };
    [(index(0.0), T::one() - frac, d_lo), (index(1.0), frac, d_hi)]
}

#[inline]
fn effective_sigma<T: Real>(raw: T, sigma_min: f64) -> T {
    T::lit(sigma_min) + raw.abs()
}

/// Materializes the dense C×1×S×S depthwise kernel.
pub fn construct_kernel<T: Real>(
    config: &DclsConfig,
    weights: &Tensor<T>,
    positions: &Tensor<T>,
    sigmas: Option<&Tensor<T>>,
) -> Result<Tensor<T>, DclsError> {
    config.check(weights, positions, sigmas)?;
    let (c, m, s) = (config.channels, config.kernel_count, config.dilated_size);
    let mut kernel = Tensor::zeros(config.kernel_shape());
    let pos = positions.data();
    let w = weights.data();
    let cm = c * m;
    match config.version {
        DclsVersion::Gauss => {
            let sig = sigmas.ok_or(DclsError::MissingSigmas)?.data();
            let mut ah = GaussAxis::with_size(s);
            let mut aw = GaussAxis::with_size(s);
            for ch in 0..c {
                let plane = &mut kernel.data_mut()[ch * s * s..(ch + 1) * s * s];
                for k in 0..m {
                    let e = ch * m + k;
                    gauss_axis(pos[e], effective_sigma(sig[e], config.sigma_min), s, &mut ah);
                    gauss_axis(pos[cm + e], effective_sigma(sig[cm + e], config.sigma_min), s, &mut aw);
                    let wk = w[e];
                    for i in 0..s {
                        let row_w = wk * ah.u[i];
                        for (dst, &uw) in plane[i * s..(i + 1) * s].iter_mut().zip(&aw.u) {
                            *dst += row_w * uw;
                        }
                    }
                }
            }
        }
        DclsVersion::Bilinear => {
            for ch in 0..c {
                let plane = &mut kernel.data_mut()[ch * s * s..(ch + 1) * s * s];
                for k in 0..m {
                    let e = ch * m + k;
                    let taps_h = bilinear_axis(pos[e], s);
                    let taps_w = bilinear_axis(pos[cm + e], s);
                    for &(ih, fh, _) in &taps_h {
                        for &(iw, fw, _) in &taps_w {
                            if let (Some(i), Some(j)) = (ih, iw) {
                                plane[i * s + j] += w[e] * fh * fw;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(kernel.finite("construct_kernel")?)
}

/// Gradients of `Σ grad_kernel ⊙ K` with respect to weights, positions and
/// raw sigmas.
pub fn construct_kernel_vjp<T: Real>(
    grad_kernel: &Tensor<T>,
    config: &DclsConfig,
    weights: &Tensor<T>,
    positions: &Tensor<T>,
    sigmas: Option<&Tensor<T>>,
) -> Result<DclsGrads<T>, DclsError> {
    config.check(weights, positions, sigmas)?;
    if grad_kernel.shape() != config.kernel_shape() {
        return Err(DclsError::Shape(format!(
            "grad kernel {:?}, expected {:?}",
            grad_kernel.shape(),
            config.kernel_shape()
        )));
    }
    let (c, m, s) = (config.channels, config.kernel_count, config.dilated_size);
    let cm = c * m;
    let pos = positions.data();
    let w = weights.data();
    let g = grad_kernel.data();
    let mut gw = vec![T::zero(); cm];
    let mut gp = vec![T::zero(); 2 * cm];
    match config.version {
        DclsVersion::Gauss => {
            let sig = sigmas.ok_or(DclsError::MissingSigmas)?.data();
            let mut gs = vec![T::zero(); 2 * cm];
            let mut ah = GaussAxis::with_size(s);
            let mut aw = GaussAxis::with_size(s);
            let mut row_dot = vec![T::zero(); s];
            let mut col_dot = vec![T::zero(); s];
            for ch in 0..c {
                let plane = &g[ch * s * s..(ch + 1) * s * s];
                for k in 0..m {
                    let e = ch * m + k;
                    let (raw_h, raw_w) = (sig[e], sig[cm + e]);
                    gauss_axis(pos[e], effective_sigma(raw_h, config.sigma_min), s, &mut ah);
                    gauss_axis(pos[cm + e], effective_sigma(raw_w, config.sigma_min), s, &mut aw);
                    col_dot.iter_mut().for_each(|v| *v = T::zero());
                    for i in 0..s {
                        let row = &plane[i * s..(i + 1) * s];
                        row_dot[i] = row.iter().zip(&aw.u).map(|(&a, &b)| a * b).sum();
                        for (cd, &gv) in col_dot.iter_mut().zip(row) {
                            *cd += ah.u[i] * gv;
                        }
                    }
                    gw[e] = ah.u.iter().zip(&row_dot).map(|(&a, &b)| a * b).sum();
                    let wk = w[e];
                    row_dot.iter_mut().for_each(|v| *v *= wk);
                    col_dot.iter_mut().for_each(|v| *v *= wk);
                    let (gph, gsh) = ah.backprop(&row_dot);
                    let (gpw, gsw) = aw.backprop(&col_dot);
                    gp[e] = gph;
                    gp[cm + e] = gpw;
                    gs[e] = gsh * raw_h.signum();
                    gs[cm + e] = gsw * raw_w.signum();
                }
            }
            Ok(DclsGrads {
                weights: Tensor::new(config.weight_shape(), gw)?,
                positions: Tensor::new(config.position_shape(), gp)?,
                sigmas: Some(Tensor::new(config.position_shape(), gs)?),
            })
        }
        DclsVersion::Bilinear => {
            for ch in 0..c {
                let plane = &g[ch * s * s..(ch + 1) * s * s];
                for k in 0..m {
                    let e = ch * m + k;
                    let taps_h = bilinear_axis(pos[e], s);
                    let taps_w = bilinear_axis(pos[cm + e], s);
                    let (mut acc_w, mut acc_h, mut acc_x) = (T::zero(), T::zero(), T::zero());
                    for &(ih, fh, dh) in &taps_h {
                        for &(iw, fw, dw) in &taps_w {
                            if let (Some(i), Some(j)) = (ih, iw) {
                                let gv = plane[i * s + j];
                                acc_w += gv * fh * fw;
                                acc_h += gv * dh * fw;
                                acc_x += gv * fh * dw;
                            }
                        }
                    }
                    gw[e] = acc_w;
                    gp[e] = acc_h * w[e];
                    gp[cm + e] = acc_x * w[e];
                }
            }
            Ok(DclsGrads {
                weights: Tensor::new(config.weight_shape(), gw)?,
                positions: Tensor::new(config.position_shape(), gp)?,
                sigmas: None,
            })
        }
    }
}

/// Projects every position back into `[−(S−1)/2, (S−1)/2]`.
pub fn clamp_positions<T: Real>(config: &DclsConfig, positions: &mut Tensor<T>) {
    let lim = T::lit(config.extent());
    positions.data_mut().iter_mut().for_each(|p| *p = p.max(-lim).min(lim));
}

/// Fresh parameters: weights ~ N(0, 0.02²), positions uniform over the
/// grid, σ_eff = S/4.
pub fn init_dcls<T: Real, R: Rng + ?Sized>(config: &DclsConfig, rng: &mut R) -> Result<DclsParams<T>, DclsError> {
    config.validate()?;
    let normal = Normal::new(0.0, WEIGHT_INIT_STD).expect("valid std");
    let weights = Tensor::from_fn(config.weight_shape(), |_| T::lit(normal.sample(rng)));
    let half = config.extent();
    let positions = if half > 0.0 {
        let uniform = Uniform::new_inclusive(-half, half);
        Tensor::from_fn(config.position_shape(), |_| T::lit(uniform.sample(rng)))
    } else {
        Tensor::zeros(config.position_shape())
    };
    let sigmas = match config.version {
        DclsVersion::Gauss => Some(Tensor::full(config.position_shape(), T::lit(config.initial_raw_sigma()))),
        DclsVersion::Bilinear => None,
    };
    Ok(DclsParams { config: *config, weights, positions, sigmas, share_tag: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(version: DclsVersion, s: usize, p: (f64, f64), raw_sigma: f64) -> DclsParams<f64> {
        let config = DclsConfig::new(1, 1, s, version).unwrap();
        DclsParams {
            config,
            weights: Tensor::new([1, 1], vec![1.0]).unwrap(),
            positions: Tensor::new([2, 1, 1], vec![p.0, p.1]).unwrap(),
            sigmas: (version == DclsVersion::Gauss).then(|| Tensor::full([2, 1, 1], raw_sigma)),
            share_tag: None,
        }
    }

    fn at(k: &Tensor<f64>, s: usize, i: i64, j: i64) -> f64 {
        let h = (s as i64 - 1) / 2;
        k.data()[((i + h) * s as i64 + (j + h)) as usize]
    }

    #[test]
    fn bilinear_half_split() {
        let k = single(DclsVersion::Bilinear, 5, (0.5, 0.0), 0.0).kernel().unwrap();
        assert_eq!(at(&k, 5, 0, 0), 0.5);
        assert_eq!(at(&k, 5, 1, 0), 0.5);
        assert_eq!(k.data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn narrow_gaussian_is_one_hot() {
        let k = single(DclsVersion::Gauss, 23, (0.0, 0.0), 0.0).kernel().unwrap();
        assert!((at(&k, 23, 0, 0) - 1.0).abs() < 1e-10);
        for (idx, &v) in k.data().iter().enumerate() {
            if idx != 11 * 23 + 11 {
                assert!(v.abs() < 1e-10);
            }
        }
        assert!((k.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_w_is_interpolation_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DclsConfig::new(2, 3, 7, DclsVersion::Gauss).unwrap();
        let params = init_dcls::<f64, _>(&cfg, &mut rng).unwrap();
        let g = Tensor::from_fn(cfg.kernel_shape(), |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let grads = params.kernel_vjp(&g).unwrap();
        for e in 0..6 {
            let mut solo = params.clone();
            solo.weights = Tensor::from_fn(cfg.weight_shape(), |i| if i == e { 1.0 } else { 0.0 });
            let a = solo.kernel().unwrap();
            let expect: f64 = a.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
            assert!((grads.weights.data()[e] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_position_gradient_by_hand() {
        let p = single(DclsVersion::Bilinear, 5, (0.25, 0.0), 0.0);
        for (i, j, expect) in [(1i64, 0i64, 1.0), (0, 0, -1.0)] {
            let mut g = Tensor::zeros([1, 1, 5, 5]);
            g.data_mut()[((i + 2) * 5 + (j + 2)) as usize] = 1.0;
            let grads = p.kernel_vjp(&g).unwrap();
            assert_eq!(grads.positions.data()[0], expect);
        }
    }

    #[test]
    fn bilinear_gradient_vanishes_on_lattice() {
        let p = single(DclsVersion::Bilinear, 5, (1.0, -1.0), 0.0);
        let g = Tensor::full([1, 1, 5, 5], 1.0);
        assert_eq!(p.kernel_vjp(&g).unwrap().positions.data(), &[0.0, 0.0]);
    }

    #[test]
    fn clamp_examples() {
        let cfg = DclsConfig::new(1, 3, 23, DclsVersion::Gauss).unwrap();
        let mut pos = Tensor::<f64>::new([2, 1, 3], vec![20.0, -30.0, 3.5, -11.0, 11.0, 0.0]).unwrap();
        clamp_positions(&cfg, &mut pos);
        assert_eq!(pos.data(), &[11.0, -11.0, 3.5, -11.0, 11.0, 0.0]);
    }

    #[test]
    fn init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = DclsConfig::new(100, 1000, 23, DclsVersion::Gauss).unwrap();
        let p = init_dcls::<f64, _>(&cfg, &mut rng).unwrap();
        let n = p.weights.len() as f64;
        let mean = p.weights.sum() / n;
        let std = (p.weights.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.019..=0.021).contains(&std), "{std}");
        assert!(p.positions.data().iter().all(|v| (-11.0..=11.0).contains(v)));
        let raw = p.sigmas.as_ref().unwrap().data()[0];
        assert!((effective_sigma(raw, cfg.sigma_min) - 5.75).abs() < 1e-12);
    }

    #[test]
    fn even_size_rejected() {
        assert_eq!(DclsConfig::new(4, 26, 22, DclsVersion::Gauss), Err(DclsError::EvenKernelSize(22)));
        assert_eq!(DclsConfig::new(4, 0, 23, DclsVersion::Gauss), Err(DclsError::ZeroKernelCount));
    }

    #[test]
    fn sigma_concentration_is_monotone() {
        let mut last = f64::INFINITY;
        for step in 0..60 {
            let raw = step as f64 * 0.1;
            let k = single(DclsVersion::Gauss, 23, (0.0, 0.0), raw).kernel().unwrap();
            let center = at(&k, 23, 0, 0);
            assert!(center <= last + 1e-15);
            last = center;
        }
    }
}
