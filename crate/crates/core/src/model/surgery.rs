//! Drop-in replacement of 7×7 depthwise convolutions by DCLS layers.

use std::collections::{HashMap, HashSet};

use rand::Rng;

use super::{assemble, count_params, sample_init, ConvMethod, DepthwiseConv, Init, Model, ModelError, ParamSource, Result};
use crate::dcls::{DclsConfig, DclsVersion};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurgeryOptions {
    pub dilated_size: usize,
    pub kernel_count: usize,
    pub version: DclsVersion,
}

impl Default for SurgeryOptions {
    fn default() -> Self {
        Self { dilated_size: 23, kernel_count: 26, version: DclsVersion::Gauss }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplacedLayer {
    pub name: String,
    pub channels: usize,
    pub share_tag: String,
    /// This layer created the group (the others alias it).
    pub owns_group: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryReport {
    pub replaced: Vec<ReplacedLayer>,
    pub groups_created: usize,
    pub params_before: usize,
    pub params_after: usize,
}

/// Old parameters are reused by name; everything listed in `fresh` (and
/// anything the old model lacks) is drawn from `rng`.
struct Transfer<'a, T: Real, R: ?Sized> {
    old: &'a Model<T>,
    renames: HashMap<String, String>,
    fresh: HashSet<String>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> ParamSource<T> for Transfer<'_, T, R> {
    fn provide(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let source_name = self.renames.get(name).map(String::as_str).unwrap_or(name);
        if !self.fresh.contains(name) {
            if let Some(p) = self.old.param(source_name) {
                return Ok(p.value.clone());
            }
        }
        Ok(sample_init(shape, init, self.rng))
    }
}

struct Zeros;

impl<T: Real> ParamSource<T> for Zeros {
    fn provide(&mut self, _: &str, shape: &[usize], _: Init) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(shape.to_vec()))
    }
}

/// First block (traversal order) referencing each share group.
fn group_leaders<T: Real>(model: &Model<T>) -> Vec<String> {
    let mut leaders: Vec<Option<String>> = vec![None; model.groups.len()];
    for b in model.blocks() {
        if let DepthwiseConv::Dcls { group, .. } = b.dw {
            leaders[group].get_or_insert_with(|| b.name.clone());
        }
    }
    leaders.into_iter().map(Option::unwrap_or_default).collect()
}

/// Replaces every depthwise convolution with a 7×7 kernel by a DCLS layer
/// (padding S//2, bias kept and reset to 0, weights re-initialized).
/// Positions and sigmas are synchronized per stage: the first replaced
/// layer at a strictly larger channel count creates them, later layers
/// with that channel count alias them. All other parameters are copied
/// bitwise.
pub fn surgery_replace_dsc_with_dcls<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    opts: &SurgeryOptions,
    rng: &mut R,
) -> Result<(Model<T>, SurgeryReport)> {
    DclsConfig {
        channels: 1,
        kernel_count: opts.kernel_count,
        dilated_size: opts.dilated_size,
        version: opts.version,
        sigma_min: model.spec.sigma_min,
    }
    .validate()?;
    let method = ConvMethod::Dcls { size: opts.dilated_size, count: opts.kernel_count, version: opts.version };
    let mut spec = model.spec.clone();
    let mut fresh = HashSet::new();
    for (st, stage) in spec.stages.iter_mut().zip(&model.stages) {
        if st.conv_method == ConvMethod::DSC7 {
            st.conv_method = method;
            for b in &stage.blocks {
                fresh.insert(format!("{}.dwconv.weight", b.name));
                fresh.insert(format!("{}.dwconv.bias", b.name));
            }
        }
    }
    let params_before = count_params(model).total;
    if fresh.is_empty() {
        let report = SurgeryReport { replaced: vec![], groups_created: 0, params_before, params_after: params_before };
        return Ok((model.clone(), report));
    }

    // Groups are addressed by index, which shifts when new groups appear
    // in front of existing ones; map them through their leading block.
    let skeleton: Model<T> = assemble(&spec, &mut Zeros)?;
    let old_leaders: HashMap<String, usize> =
        group_leaders(model).into_iter().enumerate().map(|(g, name)| (name, g)).collect();
    let mut renames = HashMap::new();
    let new_leaders = group_leaders(&skeleton);
    for (g, leader) in new_leaders.iter().enumerate() {
        let tag = &skeleton.groups[g].tag;
        match old_leaders.get(leader) {
            Some(&og) => {
                let old_tag = &model.groups[og].tag;
                renames.insert(format!("{tag}.positions"), format!("{old_tag}.positions"));
                renames.insert(format!("{tag}.sigmas"), format!("{old_tag}.sigmas"));
            }
            None => {
                fresh.insert(format!("{tag}.positions"));
                fresh.insert(format!("{tag}.sigmas"));
            }
        }
    }
    let mut source = Transfer { old: model, renames, fresh, rng };
    let new_model = assemble(&spec, &mut source)?;
    let fresh = source.fresh;

    let mut replaced = Vec::new();
    for b in new_model.blocks() {
        if let DepthwiseConv::Dcls { group, .. } = b.dw {
            if fresh.contains(&format!("{}.dwconv.weight", b.name)) {
                replaced.push(ReplacedLayer {
                    name: b.name.clone(),
                    channels: b.channels,
                    share_tag: new_model.groups[group].tag.clone(),
                    owns_group: new_leaders[group] == b.name,
                });
            }
        }
    }
    let groups_created = replaced.iter().filter(|r| r.owns_group).count();
    let params_after = count_params(&new_model).total;
    if new_model.params.iter().any(|p| !p.value.is_finite()) {
        return Err(ModelError::InvalidSpec("surgery produced non-finite parameters".into()));
    }
    Ok((new_model, SurgeryReport { replaced, groups_created, params_before, params_after }))
}
