//! ConvNeXt-style audio tagger: (2,16)/(2,16) stem, residual stages of
//! depthwise (or DCLS) blocks, average-pool + linear head.
//!
//! Parameters live in a flat store; layers refer to them by [`ParamId`].
//! DCLS layers that share positions and sigmas point at the same ids, so
//! the optimizer, the checkpoint and the parameter count all see a shared
//! tensor exactly once.

pub mod checkpoint;
mod spec;
pub mod surgery;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
pub use spec::{ConvMethod, ModelSpec, StageSpec};
pub use surgery::{surgery_replace_dsc_with_dcls, SurgeryOptions, SurgeryReport};

use crate::config::ConfigError;
use crate::dcls::{self, DclsConfig, DclsError, DclsParams, DclsVersion};
use crate::tensor::{self as t, ConvGeometry, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dcls(#[from] DclsError),
    #[error("input shape {got:?} incompatible with model: {detail}")]
    Input { got: Vec<usize>, detail: String },
    #[error("missing parameter '{0}'")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, got: Vec<usize>, expected: Vec<usize> },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    LayerScale,
    DclsWeight,
    DclsPosition,
    DclsSigma,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::DclsWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Symmetric box constraint, set for DCLS positions.
    pub bound: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Normal(f64),
    Const(f64),
    Uniform(f64),
}

/// Supplies parameter values while a model is assembled.
pub(crate) trait ParamSource<T: Real> {
    fn provide(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>>;
}

pub(crate) struct RandomInit<'a, R: ?Sized>(pub &'a mut R);

impl<T: Real, R: Rng + ?Sized> ParamSource<T> for RandomInit<'_, R> {
    fn provide(&mut self, _name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        Ok(sample_init(shape, init, self.0))
    }
}

pub(crate) fn sample_init<T: Real, R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Const(v) => Tensor::full(shape.to_vec(), T::lit(v)),
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape.to_vec(), |_| T::lit(d.sample(rng)))
        }
        Init::Uniform(half) if half > 0.0 => {
            let d = Uniform::new_inclusive(-half, half);
            Tensor::from_fn(shape.to_vec(), |_| T::lit(d.sample(rng)))
        }
        Init::Uniform(_) => Tensor::zeros(shape.to_vec()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthwiseConv {
    Dense { kernel: usize, weight: ParamId, bias: Option<ParamId> },
    Dcls { config: DclsConfig, weight: ParamId, bias: Option<ParamId>, group: usize },
}

impl DepthwiseConv {
    pub fn bias(&self) -> Option<ParamId> {
        match *self {
            DepthwiseConv::Dense { bias, .. } | DepthwiseConv::Dcls { bias, .. } => bias,
        }
    }
}

/// Positions and sigmas aliased by every DCLS layer of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ShareGroup {
    pub tag: String,
    pub channels: usize,
    pub positions: ParamId,
    pub sigmas: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub channels: usize,
    pub dw: DepthwiseConv,
    pub norm: Norm,
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub layer_scale: ParamId,
    pub drop_path: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub norm: Norm,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: Vec<Param<T>>,
    pub stem_conv: (ParamId, ParamId),
    pub stem_norm: Norm,
    pub stages: Vec<Stage>,
    pub head_norm: Norm,
    pub head_fc: (ParamId, ParamId),
    pub groups: Vec<ShareGroup>,
}

/// Transcription of the stage synchronization rule: walking DCLS sites in
/// order, the first site at a strictly larger channel count opens a new
/// group; later sites alias the current group.
#[derive(Debug, Default)]
pub(crate) struct ShareTracker {
    max_channels: usize,
    current: Option<usize>,
}

impl ShareTracker {
    /// Returns `(group index, whether it is new)`.
    pub(crate) fn assign(&mut self, channels: usize, group_count: usize) -> (usize, bool) {
        match self.current {
            Some(g) if channels <= self.max_channels => (g, false),
            _ => {
                self.max_channels = channels;
                self.current = Some(group_count);
                (group_count, true)
            }
        }
    }
}

struct Builder<'s, T: Real, S> {
    params: Vec<Param<T>>,
    source: &'s mut S,
}

impl<T: Real, S: ParamSource<T>> Builder<'_, T, S> {
    fn add(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = self.source.provide(&name, shape, init)?;
        if value.shape() != shape {
            return Err(ModelError::ParamShape { name, got: value.shape().to_vec(), expected: shape.to_vec() });
        }
        let bound = None;
        self.params.push(Param { name, kind, value, bound });
        Ok(self.params.len() - 1)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            weight: self.add(format!("{prefix}.weight"), ParamKind::Norm, &[c], Init::Const(1.0))?,
            bias: self.add(format!("{prefix}.bias"), ParamKind::Norm, &[c], Init::Const(0.0))?,
        })
    }
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Builds the layer graph for `spec`, drawing every parameter from `source`
/// in a fixed traversal order.
pub(crate) fn assemble<T: Real, S: ParamSource<T>>(spec: &ModelSpec, source: &mut S) -> Result<Model<T>> {
    spec.validate()?;
    let mut b = Builder { params: Vec::new(), source };
    let c0 = spec.stem_channels;
    let stem_w = b.add(
        "stem.conv.weight".into(),
        ParamKind::Weight,
        &[c0, spec.in_channels, spec.stem.kernel_h, spec.stem.kernel_w],
        Init::Normal(INIT_STD),
    )?;
    let stem_b = b.add("stem.conv.bias".into(), ParamKind::Bias, &[c0], Init::Const(0.0))?;
    let stem_norm = b.norm("stem.norm", c0)?;

    let total = spec.total_blocks();
    let mut block_index = 0usize;
    let mut tracker = ShareTracker::default();
    let mut groups: Vec<ShareGroup> = Vec::new();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut prev = c0;
    for (si, st) in spec.stages.iter().enumerate() {
        let c = st.channels;
        let downsample = if si > 0 {
            let p = format!("stages.{si}.downsample");
            let norm = b.norm(&format!("{p}.norm"), prev)?;
            let weight = b.add(format!("{p}.conv.weight"), ParamKind::Weight, &[c, prev, 2, 2], Init::Normal(INIT_STD))?;
            let bias = b.add(format!("{p}.conv.bias"), ParamKind::Bias, &[c], Init::Const(0.0))?;
            Some(Downsample { norm, weight, bias })
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(st.depth);
        for bi in 0..st.depth {
            let name = format!("stages.{si}.blocks.{bi}");
            let dw = match st.conv_method {
                ConvMethod::Depthwise { kernel } => DepthwiseConv::Dense {
                    kernel,
                    weight: b.add(format!("{name}.dwconv.weight"), ParamKind::Weight, &[c, 1, kernel, kernel], Init::Normal(INIT_STD))?,
                    bias: Some(b.add(format!("{name}.dwconv.bias"), ParamKind::Bias, &[c], Init::Const(0.0))?),
                },
                method @ ConvMethod::Dcls { .. } => {
                    let config = spec.dcls_config(method, c).expect("dcls method");
                    let group = add_dcls_group(&mut b, &mut tracker, &mut groups, &config)?;
                    DepthwiseConv::Dcls {
                        config,
                        weight: b.add(format!("{name}.dwconv.weight"), ParamKind::DclsWeight, &config.weight_shape(), Init::Normal(dcls::WEIGHT_INIT_STD))?,
                        bias: Some(b.add(format!("{name}.dwconv.bias"), ParamKind::Bias, &[c], Init::Const(0.0))?),
                        group,
                    }
                }
            };
            let norm = b.norm(&format!("{name}.norm"), c)?;
            let hidden = spec.mlp_ratio * c;
            let fc1 = (
                b.add(format!("{name}.pwconv1.weight"), ParamKind::Weight, &[hidden, c], Init::Normal(INIT_STD))?,
                b.add(format!("{name}.pwconv1.bias"), ParamKind::Bias, &[hidden], Init::Const(0.0))?,
            );
            let fc2 = (
                b.add(format!("{name}.pwconv2.weight"), ParamKind::Weight, &[c, hidden], Init::Normal(INIT_STD))?,
                b.add(format!("{name}.pwconv2.bias"), ParamKind::Bias, &[c], Init::Const(0.0))?,
            );
            let layer_scale = b.add(format!("{name}.gamma"), ParamKind::LayerScale, &[c], Init::Const(spec.layer_scale_init))?;
            let drop_path = drop_path_at(spec.drop_path_rate, block_index, total);
            block_index += 1;
            blocks.push(Block { name, channels: c, dw, norm, fc1, fc2, layer_scale, drop_path });
        }
        stages.push(Stage { downsample, blocks });
        prev = c;
    }
    let head_norm = b.norm("head.norm", prev)?;
    let head_fc = (
        b.add("head.fc.weight".into(), ParamKind::Weight, &[spec.num_classes, prev], Init::Normal(INIT_STD))?,
        b.add("head.fc.bias".into(), ParamKind::Bias, &[spec.num_classes], Init::Const(0.0))?,
    );
    Ok(Model { spec: spec.clone(), params: b.params, stem_conv: (stem_w, stem_b), stem_norm, stages, head_norm, head_fc, groups })
}

fn add_dcls_group<T: Real, S: ParamSource<T>>(
    b: &mut Builder<'_, T, S>,
    tracker: &mut ShareTracker,
    groups: &mut Vec<ShareGroup>,
    config: &DclsConfig,
) -> Result<usize> {
    let (g, fresh) = tracker.assign(config.channels, groups.len());
    if fresh {
        let tag = format!("shared.{g}");
        let positions = b.add(format!("{tag}.positions"), ParamKind::DclsPosition, &config.position_shape(), Init::Uniform(config.extent()))?;
        b.params[positions].bound = Some(config.extent());
        let sigmas = match config.version {
            DclsVersion::Gauss => Some(b.add(
                format!("{tag}.sigmas"),
                ParamKind::DclsSigma,
                &config.position_shape(),
                Init::Const(config.initial_raw_sigma()),
            )?),
            DclsVersion::Bilinear => None,
        };
        groups.push(ShareGroup { tag, channels: config.channels, positions, sigmas });
    }
    let group = &groups[g];
    if group.channels != config.channels {
        return Err(ModelError::InvalidSpec(format!(
            "DCLS layer with {} channels cannot share positions of a {}-channel group",
            config.channels, group.channels
        )));
    }
    Ok(g)
}

/// Linear ramp from 0 at the first block to `rate` at the last.
fn drop_path_at(rate: f64, block: usize, total: usize) -> f64 {
    if total > 1 {
        rate * block as f64 / (total - 1) as f64
    } else {
        0.0
    }
}

/// Initializes a model. Weights ~ N(0, 0.02²), biases 0, norms (1, 0),
/// layer scale at `spec.layer_scale_init`.
pub fn build_model<T: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    assemble(spec, &mut RandomInit(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub total: usize,
    /// (layer name, parameter count), in traversal order.
    pub layers: Vec<(String, usize)>,
}

/// Sums parameter tensors; shared positions/sigmas are counted once.
pub fn count_params<T: Real>(model: &Model<T>) -> ParamCount {
    let mut layers: Vec<(String, usize)> = Vec::new();
    for p in &model.params {
        let layer = p.name.rsplit_once('.').map(|(l, _)| l).unwrap_or(&p.name).to_string();
        match layers.last_mut() {
            Some((name, n)) if *name == layer => *n += p.value.len(),
            _ => layers.push((layer, p.value.len())),
        }
    }
    ParamCount { total: model.params.iter().map(|p| p.value.len()).sum(), layers }
}

/// Depthwise spatial weights: dense kernels, or DCLS weights plus each
/// shared group's positions and sigmas counted once. Biases are excluded.
pub fn depthwise_weight_count<T: Real>(model: &Model<T>) -> usize {
    let kernels: usize = model
        .blocks()
        .map(|b| match b.dw {
            DepthwiseConv::Dense { weight, .. } | DepthwiseConv::Dcls { weight, .. } => model.params[weight].value.len(),
        })
        .sum();
    let shared: usize = model
        .groups
        .iter()
        .map(|g| model.params[g.positions].value.len() + g.sigmas.map_or(0, |s| model.params[s].value.len()))
        .sum();
    kernels + shared
}

struct BlockCache<T: Real> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    nhwc: Tensor<T>,
    normed: Tensor<T>,
    hidden: Tensor<T>,
    act: Tensor<T>,
    proj: Tensor<T>,
    keep: Option<Vec<T>>,
}

struct NormCache<T: Real> {
    nhwc: Tensor<T>,
}

struct DownCache<T: Real> {
    norm: NormCache<T>,
    normed: Tensor<T>,
}

struct StageCache<T: Real> {
    down: Option<DownCache<T>>,
    blocks: Vec<BlockCache<T>>,
}

/// Activations recorded by [`Model::forward`] for [`Model::backward`].
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    stem_pre: NormCache<T>,
    stages: Vec<StageCache<T>>,
    final_shape: Vec<usize>,
    pooled: Tensor<T>,
    head_normed: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// Resets the stochastic-depth ramp to end at `rate`.
    pub fn set_drop_path_rate(&mut self, rate: f64) {
        self.spec.drop_path_rate = rate;
        let total = self.spec.total_blocks();
        for (i, b) in self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()).enumerate() {
            b.drop_path = drop_path_at(rate, i, total);
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast(), bound: p.bound })
                .collect(),
            stem_conv: self.stem_conv,
            stem_norm: self.stem_norm,
            stages: self.stages.clone(),
            head_norm: self.head_norm,
            head_fc: self.head_fc,
            groups: self.groups.clone(),
        }
    }

    /// DCLS parameters of one block as a value object (copies the aliased
    /// positions/sigmas).
    pub fn dcls_params(&self, block: &Block) -> Option<DclsParams<T>> {
        match block.dw {
            DepthwiseConv::Dcls { config, weight, group, .. } => {
                let g = &self.groups[group];
                Some(DclsParams {
                    config,
                    weights: self.params[weight].value.clone(),
                    positions: self.params[g.positions].value.clone(),
                    sigmas: g.sigmas.map(|s| self.params[s].value.clone()),
                    share_tag: Some(g.tag.clone()),
                })
            }
            DepthwiseConv::Dense { .. } => None,
        }
    }

    /// Spatial size after the stem, `None` when the input is too small.
    pub fn stem_output(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok(self.spec.stem.output_extent(height, width)?)
    }

    fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    fn depthwise_kernel(&self, dw: &DepthwiseConv) -> Result<(Tensor<T>, ConvGeometry)> {
        match *dw {
            DepthwiseConv::Dense { kernel, weight, .. } => {
                let c = self.value(weight).shape()[0];
                Ok((self.value(weight).clone(), ConvGeometry::same(kernel).with_groups(c)))
            }
            DepthwiseConv::Dcls { config, weight, group, .. } => {
                let g = &self.groups[group];
                let k = dcls::construct_kernel(
                    &config,
                    self.value(weight),
                    self.value(g.positions),
                    g.sigmas.map(|s| self.value(s)),
                )?;
                Ok((k, config.geometry()))
            }
        }
    }

    fn channels_first_norm(&self, x: &Tensor<T>, norm: &Norm) -> Result<(Tensor<T>, NormCache<T>)> {
        let nhwc = t::nchw_to_nhwc(x)?;
        let y = t::layer_norm(&nhwc, self.value(norm.weight), self.value(norm.bias), self.spec.norm_eps)?;
        Ok((t::nhwc_to_nchw(&y)?, NormCache { nhwc }))
    }

    fn channels_first_norm_back(
        &self,
        g: &Tensor<T>,
        cache: &NormCache<T>,
        norm: &Norm,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        let g = t::nchw_to_nhwc(g)?;
        let r = t::layer_norm_vjp(&g, &cache.nhwc, self.value(norm.weight), self.spec.norm_eps)?;
        grads[norm.weight].add_assign(&r.gamma)?;
        grads[norm.bias].add_assign(&r.beta)?;
        Ok(t::nhwc_to_nchw(&r.input)?)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let shape = input.shape().to_vec();
        let (_, c, h, w) = input
            .dims4("model input")
            .map_err(|_| ModelError::Input { got: shape.clone(), detail: "expected N×C×H×W".into() })?;
        if c != self.spec.in_channels {
            return Err(ModelError::Input { got: shape, detail: format!("expected {} channels", self.spec.in_channels) });
        }
        self.spec
            .stem
            .output_extent(h, w)
            .map_err(|e| ModelError::Input { got: shape.clone(), detail: e.to_string() })?;
        Ok(())
    }

    fn block_forward<'r>(&self, block: &Block, x: Tensor<T>, drop_rng: Option<&mut (dyn RngCore + 'r)>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let n = x.shape()[0];
        let (kernel, geom) = self.depthwise_kernel(&block.dw)?;
        let mut y = t::depthwise_conv2d(&x, &kernel, &geom)?;
        if let Some(bias) = block.dw.bias() {
            y = t::add_channel_bias(&y, self.value(bias))?;
        }
        let nhwc = t::nchw_to_nhwc(&y)?;
        let normed = t::layer_norm(&nhwc, self.value(block.norm.weight), self.value(block.norm.bias), self.spec.norm_eps)?;
        let hidden = t::pointwise_linear(&normed, self.value(block.fc1.0), self.value(block.fc1.1))?;
        let act = t::gelu(&hidden)?;
        let proj = t::pointwise_linear(&act, self.value(block.fc2.0), self.value(block.fc2.1))?;
        let scaled = t::scale_channels(&proj, self.value(block.layer_scale))?;
        let mut branch = t::nhwc_to_nchw(&scaled)?;
        let keep = match drop_rng {
            Some(rng) if block.drop_path > 0.0 => {
                let keep = drop_path_mask::<T>(n, block.drop_path, rng);
                let per = branch.len() / n;
                for (chunk, &k) in branch.data_mut().chunks_mut(per).zip(&keep) {
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                Some(keep)
            }
            _ => None,
        };
        let out = x.add(&branch)?;
        Ok((out, BlockCache { input: x, kernel, nhwc, normed, hidden, act, proj, keep }))
    }

    /// Eval-mode output of block `index` (counted across stages) applied
    /// to `x`, which must already have the block's channel count.
    pub fn block_output(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let block = self.block_at(index)?;
        Ok(self.block_forward(block, x.clone(), None)?.0)
    }

    /// Input gradient and per-parameter gradients (indexed like
    /// `self.params`) of `Σ grad_out ⊙ block_output(index, x)`.
    pub fn block_vjp(&self, index: usize, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let block = self.block_at(index)?;
        let (out, cache) = self.block_forward(block, x.clone(), None)?;
        if grad_out.shape() != out.shape() {
            return Err(t::shape_err("block_vjp", format!("grad {:?} vs output {:?}", grad_out.shape(), out.shape())).into());
        }
        let mut grads = self.zero_grads();
        let g_in = self.block_backward(block, &cache, grad_out.clone(), &mut grads)?;
        Ok((g_in, grads))
    }

    fn block_at(&self, index: usize) -> Result<&Block> {
        self.blocks().nth(index).ok_or_else(|| ModelError::InvalidSpec(format!("no block {index}")))
    }

    fn run(&self, input: &Tensor<T>, mut drop_rng: Option<&mut dyn RngCore>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let stem = t::dense_conv2d(input, self.value(self.stem_conv.0), &self.spec.stem)?;
        let stem = t::add_channel_bias(&stem, self.value(self.stem_conv.1))?;
        let (mut x, stem_pre) = self.channels_first_norm(&stem, &self.stem_norm)?;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let down = match &stage.downsample {
                Some(ds) => {
                    let (normed, norm) = self.channels_first_norm(&x, &ds.norm)?;
                    let geom = ConvGeometry::new((2, 2), (2, 2), (0, 0));
                    let y = t::dense_conv2d(&normed, self.value(ds.weight), &geom).map_err(|e| ModelError::Input {
                        got: input.shape().to_vec(),
                        detail: format!("downsampling failed: {e}"),
                    })?;
                    x = t::add_channel_bias(&y, self.value(ds.bias))?;
                    Some(DownCache { norm, normed })
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (out, cache) = self.block_forward(block, x, drop_rng.as_deref_mut())?;
                blocks.push(cache);
                x = out;
            }
            stage_caches.push(StageCache { down, blocks });
        }
        let final_shape = x.shape().to_vec();
        let pooled = t::global_avg_pool(&x)?;
        let head_normed = t::layer_norm(&pooled, self.value(self.head_norm.weight), self.value(self.head_norm.bias), self.spec.norm_eps)?;
        let logits = t::pointwise_linear(&head_normed, self.value(self.head_fc.0), self.value(self.head_fc.1))?;
        Ok((
            logits,
            ForwardCache { input: input.clone(), stem_pre, stages: stage_caches, final_shape, pooled, head_normed },
        ))
    }

    /// Logits N×num_classes plus the activations needed by [`Model::backward`].
    /// Drop path is active only in [`Mode::Train`].
    pub fn forward<R: RngCore>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<(Tensor<T>, ForwardCache<T>)> {
        match mode {
            Mode::Train => self.run(input, Some(rng)),
            Mode::Eval => self.run(input, None),
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, None)?.0)
    }

    /// Gradients of `Σ grad_logits ⊙ logits` for every parameter, indexed
    /// like `self.params`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.zero_grads();
        let fc = t::pointwise_linear_vjp(grad_logits, &cache.head_normed, self.value(self.head_fc.0))?;
        grads[self.head_fc.0].add_assign(&fc.weight)?;
        grads[self.head_fc.1].add_assign(&fc.bias)?;
        let hn = t::layer_norm_vjp(&fc.input, &cache.pooled, self.value(self.head_norm.weight), self.spec.norm_eps)?;
        grads[self.head_norm.weight].add_assign(&hn.gamma)?;
        grads[self.head_norm.bias].add_assign(&hn.beta)?;
        let mut g = t::global_avg_pool_vjp(&hn.input, &cache.final_shape)?;

        for (stage, sc) in self.stages.iter().zip(&cache.stages).rev() {
            for (block, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                g = self.block_backward(block, bc, g, &mut grads)?;
            }
            if let (Some(ds), Some(dc)) = (&stage.downsample, &sc.down) {
                grads[ds.bias].add_assign(&t::add_channel_bias_vjp(&g)?)?;
                let geom = ConvGeometry::new((2, 2), (2, 2), (0, 0));
                let (gin, gw) = t::dense_conv2d_vjp(&g, &dc.normed, self.value(ds.weight), &geom)?;
                grads[ds.weight].add_assign(&gw)?;
                g = self.channels_first_norm_back(&gin, &dc.norm, &ds.norm, &mut grads)?;
            }
        }
        let g = self.channels_first_norm_back(&g, &cache.stem_pre, &self.stem_norm, &mut grads)?;
        grads[self.stem_conv.1].add_assign(&t::add_channel_bias_vjp(&g)?)?;
        let (_, gw) = t::dense_conv2d_vjp(&g, &cache.input, self.value(self.stem_conv.0), &self.spec.stem)?;
        grads[self.stem_conv.0].add_assign(&gw)?;
        Ok(grads)
    }

    fn block_backward(&self, block: &Block, bc: &BlockCache<T>, grad_out: Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let mut g_branch = grad_out.clone();
        if let Some(keep) = &bc.keep {
            let per = g_branch.len() / keep.len();
            for (chunk, &k) in g_branch.data_mut().chunks_mut(per).zip(keep) {
                chunk.iter_mut().for_each(|v| *v *= k);
            }
        }
        let g_scaled = t::nchw_to_nhwc(&g_branch)?;
        let (g_proj, g_gamma) = t::scale_channels_vjp(&g_scaled, &bc.proj, self.value(block.layer_scale))?;
        grads[block.layer_scale].add_assign(&g_gamma)?;
        let fc2 = t::pointwise_linear_vjp(&g_proj, &bc.act, self.value(block.fc2.0))?;
        grads[block.fc2.0].add_assign(&fc2.weight)?;
        grads[block.fc2.1].add_assign(&fc2.bias)?;
        let g_hidden = t::gelu_vjp(&fc2.input, &bc.hidden)?;
        let fc1 = t::pointwise_linear_vjp(&g_hidden, &bc.normed, self.value(block.fc1.0))?;
        grads[block.fc1.0].add_assign(&fc1.weight)?;
        grads[block.fc1.1].add_assign(&fc1.bias)?;
        let ln = t::layer_norm_vjp(&fc1.input, &bc.nhwc, self.value(block.norm.weight), self.spec.norm_eps)?;
        grads[block.norm.weight].add_assign(&ln.gamma)?;
        grads[block.norm.bias].add_assign(&ln.beta)?;
        let g_dw = t::nhwc_to_nchw(&ln.input)?;
        if let Some(bias) = block.dw.bias() {
            grads[bias].add_assign(&t::add_channel_bias_vjp(&g_dw)?)?;
        }
        let geom = match block.dw {
            DepthwiseConv::Dense { kernel, .. } => ConvGeometry::same(kernel).with_groups(block.channels),
            DepthwiseConv::Dcls { config, .. } => config.geometry(),
        };
        let (g_in, g_kernel) = t::depthwise_conv2d_vjp(&g_dw, &bc.input, &bc.kernel, &geom)?;
        match block.dw {
            DepthwiseConv::Dense { weight, .. } => grads[weight].add_assign(&g_kernel)?,
            DepthwiseConv::Dcls { config, weight, group, .. } => {
                let sh = &self.groups[group];
                let dg = dcls::construct_kernel_vjp(
                    &g_kernel,
                    &config,
                    self.value(weight),
                    self.value(sh.positions),
                    sh.sigmas.map(|s| self.value(s)),
                )?;
                grads[weight].add_assign(&dg.weights)?;
                grads[sh.positions].add_assign(&dg.positions)?;
                if let (Some(s), Some(gs)) = (sh.sigmas, &dg.sigmas) {
                    grads[s].add_assign(gs)?;
                }
            }
        }
        let mut g = grad_out;
        g.add_assign(&g_in)?;
        Ok(g)
    }
}

/// Per-sample keep factors for stochastic depth: 0 with probability `rate`,
/// otherwise `1/(1−rate)`.
pub fn drop_path_mask<T: Real>(n: usize, rate: f64, rng: &mut (impl RngCore + ?Sized)) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - rate));
    (0..n).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { scale }).collect()
}
