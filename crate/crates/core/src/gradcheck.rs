//! Finite-difference suites for every primitive with a hand-written vjp.
//!
//! Each suite draws random 64-bit operands and a random upstream gradient
//! `G` per seed, then compares the vjp of `Σ G ⊙ op(θ)` with central
//! differences for every operand.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dcls::{self, DclsConfig, DclsError, DclsVersion};
use crate::model::{build_model, ConvMethod, ModelError, ModelSpec, ParamKind};
use crate::tensor::gradcheck::{finite_diff_check, GradCheckError, DEFAULT_STEP};
use crate::tensor::{self as t, ConvGeometry, Tensor, TensorError};

/// Largest relative error a suite may report.
pub const TOLERANCE: f64 = 1e-4;
/// Seeds per suite unless overridden.
pub const DEFAULT_SEEDS: u64 = 10;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dcls(#[from] DclsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    DepthwiseConv,
    DenseConv,
    PointwiseConv,
    LayerNorm,
    Gelu,
    DclsGauss,
    DclsBilinear,
    ToyBlock,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::DepthwiseConv,
        Suite::DenseConv,
        Suite::PointwiseConv,
        Suite::LayerNorm,
        Suite::Gelu,
        Suite::DclsGauss,
        Suite::DclsBilinear,
        Suite::ToyBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::DepthwiseConv => "depthwise",
            Suite::DenseConv => "dense",
            Suite::PointwiseConv => "pointwise",
            Suite::LayerNorm => "layer-norm",
            Suite::Gelu => "gelu",
            Suite::DclsGauss => "dcls-gauss",
            Suite::DclsBilinear => "dcls-bilinear",
            Suite::ToyBlock => "block",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            format!("unknown suite '{s}' (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    /// Name of the operand holding the worst entry.
    pub worst_operand: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Worst relative error of one seed and the operand it came from.
struct SeedResult {
    err: f64,
    operand: String,
}

#[derive(Default)]
struct Tracker {
    worst: Option<SeedResult>,
}

impl Tracker {
    fn check(&mut self, operand: &str, f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Result<(), SuiteError> {
        let r = finite_diff_check(f, x, analytic, DEFAULT_STEP)?;
        if self.worst.as_ref().is_none_or(|w| r.max_rel_err > w.err) {
            self.worst = Some(SeedResult { err: r.max_rel_err, operand: operand.to_string() });
        }
        Ok(())
    }

    fn finish(self) -> SeedResult {
        self.worst.unwrap_or(SeedResult { err: 0.0, operand: String::new() })
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).expect("probe keeps the operand shape")
}

pub fn run_suite(suite: Suite, seeds: u64) -> Result<SuiteReport, SuiteError> {
    let start = Instant::now();
    let mut report =
        SuiteReport { suite, seeds, max_rel_err: 0.0, worst_seed: 0, worst_operand: String::new(), elapsed: Duration::ZERO };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = match suite {
            Suite::DepthwiseConv => depthwise(&mut rng)?,
            Suite::DenseConv => dense(&mut rng)?,
            Suite::PointwiseConv => pointwise(&mut rng)?,
            Suite::LayerNorm => layer_norm(&mut rng)?,
            Suite::Gelu => gelu(&mut rng)?,
            Suite::DclsGauss => dcls_kernel(DclsVersion::Gauss, &mut rng)?,
            Suite::DclsBilinear => dcls_kernel(DclsVersion::Bilinear, &mut rng)?,
            Suite::ToyBlock => toy_block(seed, &mut rng)?,
        };
        if r.err >= report.max_rel_err {
            report.max_rel_err = r.err;
            report.worst_seed = seed;
            report.worst_operand = r.operand;
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

pub fn run_all(seeds: u64) -> Result<Vec<SuiteReport>, SuiteError> {
    Suite::ALL.iter().map(|&s| run_suite(s, seeds)).collect()
}

fn depthwise(rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let (n, c, h, w) = (2, 3, 7, 8);
    let k = [3, 7][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..=2);
    let geom = ConvGeometry::new((k, k), (stride, stride), (k / 2, k / 2)).with_groups(c);
    let x = random(&[n, c, h, w], -1.0, 1.0, rng);
    let kernel = random(&[c, 1, k, k], -1.0, 1.0, rng);
    let (oh, ow) = geom.output_extent(h, w)?;
    let g = random(&[n, c, oh, ow], -1.0, 1.0, rng);
    let (gx, gk) = t::depthwise_conv2d_vjp(&g, &x, &kernel, &geom)?;
    let mut tr = Tracker::default();
    let f = |x: &Tensor<f64>, k: &Tensor<f64>| dot(&t::depthwise_conv2d(x, k, &geom).expect("valid"), &g);
    tr.check("input", |v| f(&with(x.shape(), v), &kernel), x.data(), gx.data())?;
    tr.check("kernel", |v| f(&x, &with(kernel.shape(), v)), kernel.data(), gk.data())?;
    Ok(tr.finish())
}

fn dense(rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let (n, cin, cout, h, w) = (2, 2, 3, 6, 9);
    let geom = if rng.gen_bool(0.5) {
        ConvGeometry::new((2, 3), (2, 3), (0, 0))
    } else {
        ConvGeometry::new((3, 3), (1, 2), (1, 1))
    };
    let x = random(&[n, cin, h, w], -1.0, 1.0, rng);
    let kernel = random(&[cout, cin, geom.kernel_h, geom.kernel_w], -1.0, 1.0, rng);
    let (oh, ow) = geom.output_extent(h, w)?;
    let g = random(&[n, cout, oh, ow], -1.0, 1.0, rng);
    let (gx, gk) = t::dense_conv2d_vjp(&g, &x, &kernel, &geom)?;
    let mut tr = Tracker::default();
    let f = |x: &Tensor<f64>, k: &Tensor<f64>| dot(&t::dense_conv2d(x, k, &geom).expect("valid"), &g);
    tr.check("input", |v| f(&with(x.shape(), v), &kernel), x.data(), gx.data())?;
    tr.check("kernel", |v| f(&x, &with(kernel.shape(), v)), kernel.data(), gk.data())?;
    Ok(tr.finish())
}

fn pointwise(rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let (rows, cin, cout) = (6, 5, 4);
    let x = random(&[2, rows / 2, cin], -1.0, 1.0, rng);
    let wt = random(&[cout, cin], -1.0, 1.0, rng);
    let b = random(&[cout], -1.0, 1.0, rng);
    let g = random(&[2, rows / 2, cout], -1.0, 1.0, rng);
    let grads = t::pointwise_linear_vjp(&g, &x, &wt)?;
    let mut tr = Tracker::default();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&t::pointwise_linear(x, w, b).expect("valid"), &g);
    tr.check("input", |v| f(&with(x.shape(), v), &wt, &b), x.data(), grads.input.data())?;
    tr.check("weight", |v| f(&x, &with(wt.shape(), v), &b), wt.data(), grads.weight.data())?;
    tr.check("bias", |v| f(&x, &wt, &with(b.shape(), v)), b.data(), grads.bias.data())?;
    Ok(tr.finish())
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let c = 6;
    let eps = 1e-6;
    let x = random(&[4, c], -2.0, 2.0, rng);
    let gamma = random(&[c], 0.5, 1.5, rng);
    let beta = random(&[c], -0.5, 0.5, rng);
    let g = random(&[4, c], -1.0, 1.0, rng);
    let grads = t::layer_norm_vjp(&g, &x, &gamma, eps)?;
    let mut tr = Tracker::default();
    let f = |x: &Tensor<f64>, ga: &Tensor<f64>, b: &Tensor<f64>| dot(&t::layer_norm(x, ga, b, eps).expect("valid"), &g);
    tr.check("input", |v| f(&with(x.shape(), v), &gamma, &beta), x.data(), grads.input.data())?;
    tr.check("gamma", |v| f(&x, &with(gamma.shape(), v), &beta), gamma.data(), grads.gamma.data())?;
    tr.check("beta", |v| f(&x, &gamma, &with(beta.shape(), v)), beta.data(), grads.beta.data())?;
    Ok(tr.finish())
}

fn gelu(rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let x = random(&[32], -4.0, 4.0, rng);
    let g = random(&[32], -1.0, 1.0, rng);
    let gx = t::gelu_vjp(&g, &x)?;
    let mut tr = Tracker::default();
    tr.check("input", |v| dot(&t::gelu(&with(x.shape(), v)).expect("valid"), &g), x.data(), gx.data())?;
    Ok(tr.finish())
}

/// Positions are drawn away from the integer lattice (fractional part in
/// [0.1, 0.9]) so no probe of the stencil crosses a bilinear kink.
fn off_lattice(config: &DclsConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let half = config.extent();
    Tensor::from_fn(config.position_shape().to_vec(), |_| {
        let base = rng.gen_range(-half..half - 1.0).floor();
        base + rng.gen_range(0.1..0.9)
    })
}

fn dcls_kernel(version: DclsVersion, rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let config = DclsConfig::new(3, 4, 7, version)?;
    let w = random(&config.weight_shape(), -1.0, 1.0, rng);
    let p = off_lattice(&config, rng);
    // |SIG| kink at 0 stays out of reach of the probes.
    let s = (version == DclsVersion::Gauss).then(|| {
        Tensor::from_fn(config.position_shape().to_vec(), |_| rng.gen_range(0.3..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
    });
    let g = random(&config.kernel_shape(), -1.0, 1.0, rng);
    let grads = dcls::construct_kernel_vjp(&g, &config, &w, &p, s.as_ref())?;
    let f = |w: &Tensor<f64>, p: &Tensor<f64>, s: Option<&Tensor<f64>>| {
        dot(&dcls::construct_kernel(&config, w, p, s).expect("valid"), &g)
    };
    let mut tr = Tracker::default();
    tr.check("weights", |v| f(&with(w.shape(), v), &p, s.as_ref()), w.data(), grads.weights.data())?;
    tr.check("positions", |v| f(&w, &with(p.shape(), v), s.as_ref()), p.data(), grads.positions.data())?;
    if let (Some(s), Some(gs)) = (&s, &grads.sigmas) {
        tr.check("sigmas", |v| f(&w, &p, Some(&with(s.shape(), v))), s.data(), gs.data())?;
    }
    Ok(tr.finish())
}

/// One ConvNeXt block (alternating dsc7 and DCLS-Gauss by seed) with every
/// parameter randomized, including a non-trivial layer scale.
fn toy_block(seed: u64, rng: &mut ChaCha8Rng) -> Result<SeedResult, SuiteError> {
    let method = if seed % 2 == 0 { ConvMethod::DSC7 } else { ConvMethod::dcls_gauss() };
    let c = 4;
    let spec = ModelSpec::convnext(&[1], &[c], 2).with_conv_method(method);
    let mut model = build_model::<f64, _>(&spec, rng)?;
    for p in &mut model.params {
        let (lo, hi) = match p.kind {
            ParamKind::Norm => (0.5, 1.5),
            ParamKind::LayerScale => (0.5, 1.0),
            ParamKind::DclsPosition => continue,
            ParamKind::DclsSigma => (0.3, 2.0),
            _ => (-0.5, 0.5),
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
    for p in model.params.iter_mut().filter(|p| p.kind == ParamKind::DclsPosition) {
        let half = p.bound.unwrap_or(1.0);
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-half..half));
    }
    let block = model.blocks().next().expect("one block").name.clone();
    let x = random(&[2, c, 12, 13], -1.0, 1.0, rng);
    let g = random(&[2, c, 12, 13], -1.0, 1.0, rng);
    let (gx, grads) = model.block_vjp(0, &x, &g)?;
    let mut tr = Tracker::default();
    tr.check("input", |v| dot(&model.block_output(0, &with(x.shape(), v)).expect("valid"), &g), x.data(), gx.data())?;
    let ids: Vec<usize> =
        (0..model.params.len()).filter(|&i| model.params[i].name.starts_with(&block) || model.params[i].name.starts_with("shared.")).collect();
    for i in ids {
        let shape = model.params[i].value.shape().to_vec();
        let x0 = model.params[i].value.data().to_vec();
        let mut probe = model.clone();
        let name = model.params[i].name.clone();
        tr.check(
            &name,
            |v| {
                probe.params[i].value = with(&shape, v);
                dot(&probe.block_output(0, &x).expect("valid"), &g)
            },
            &x0,
            grads[i].data(),
        )?;
    }
    Ok(tr.finish())
}
