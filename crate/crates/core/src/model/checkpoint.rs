//! Model checkpoints on top of the array container.
//!
//! Metadata keys: `kind: checkpoint`, `crate_version`, `seed`,
//! `spec_hash` (SHA-256 of the rendered spec), every spec key prefixed
//! with `spec.`, and one `group.<tag>: <channels>` line per share group.
//! Arrays are the model parameters under their own names; a shared
//! position tensor is stored once.

use std::path::Path;

use thiserror::Error;

use super::{assemble, Init, Model, ModelError, ModelSpec, ParamSource};
use crate::config::KeyValues;
use crate::container::{Container, ContainerError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("not a model checkpoint (kind '{0}')")]
    WrongKind(String),
    #[error("spec hash mismatch: stored {stored}, recomputed {computed}")]
    SpecHash { stored: String, computed: String },
    #[error("unexpected array '{0}'")]
    UnexpectedArray(String),
    #[error("share table disagrees with spec: {0}")]
    ShareTable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
}

const KIND: &str = "checkpoint";

pub fn checkpoint_container(model: &Model<f32>, meta: &CheckpointMeta) -> Container {
    let mut kv = KeyValues::default();
    kv.push("kind", KIND);
    kv.push("crate_version", env!("CARGO_PKG_VERSION"));
    kv.push("seed", meta.seed);
    kv.push("spec_hash", model.spec.hash());
    for (k, v) in model.spec.to_key_values().iter() {
        kv.push(format!("spec.{k}"), v);
    }
    for g in &model.groups {
        kv.push(format!("group.{}", g.tag), g.channels);
    }
    let arrays = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    Container { meta: kv, arrays }
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    Ok(checkpoint_container(model, meta).write(path)?)
}

struct ArraySource<'a> {
    container: &'a Container,
    missing: Option<String>,
}

impl ParamSource<f32> for ArraySource<'_> {
    fn provide(&mut self, name: &str, shape: &[usize], _: Init) -> Result<Tensor<f32>, ModelError> {
        match self.container.array(name) {
            Ok(t) => Ok(t.clone()),
            Err(_) => {
                self.missing.get_or_insert_with(|| name.to_string());
                Ok(Tensor::zeros(shape.to_vec()))
            }
        }
    }
}

pub fn model_from_container(c: &Container) -> Result<(Model<f32>, CheckpointMeta), CheckpointError> {
    let kind = c.meta.raw("kind").unwrap_or("");
    if kind != KIND {
        return Err(CheckpointError::WrongKind(kind.to_string()));
    }
    let mut spec_kv = KeyValues::default();
    for (k, v) in c.meta.iter() {
        if let Some(key) = k.strip_prefix("spec.") {
            spec_kv.push(key, v);
        }
    }
    let spec = ModelSpec::from_key_values(&spec_kv)?;
    let stored: String = c.meta.require("spec_hash").map_err(ModelError::from)?;
    let computed = spec.hash();
    if stored != computed {
        return Err(CheckpointError::SpecHash { stored, computed });
    }
    let seed: u64 = c.meta.require("seed").map_err(ModelError::from)?;
    let mut source = ArraySource { container: c, missing: None };
    let model = assemble(&spec, &mut source)?;
    if let Some(name) = source.missing {
        return Err(ContainerError::MissingArray(name).into());
    }
    if c.arrays.len() != model.params.len() {
        let extra = c.arrays.iter().find(|(n, _)| model.param(n).is_none()).map(|(n, _)| n.clone());
        return Err(CheckpointError::UnexpectedArray(extra.unwrap_or_else(|| "duplicate array".into())));
    }
    let stored_groups: Vec<(&str, &str)> = c.meta.iter().filter(|(k, _)| k.starts_with("group.")).collect();
    if stored_groups.len() != model.groups.len() {
        return Err(CheckpointError::ShareTable(format!(
            "{} groups stored, {} implied",
            stored_groups.len(),
            model.groups.len()
        )));
    }
    for ((k, v), g) in stored_groups.iter().zip(&model.groups) {
        if k.strip_prefix("group.") != Some(g.tag.as_str()) || v.parse::<usize>().ok() != Some(g.channels) {
            return Err(CheckpointError::ShareTable(format!("'{k}: {v}' vs {} with {} channels", g.tag, g.channels)));
        }
    }
    Ok((model, CheckpointMeta { seed }))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta), CheckpointError> {
    model_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ConvMethod};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = ModelSpec::convnext(&[1, 2], &[8, 16], 3);
        spec.stages[1].conv_method = ConvMethod::dcls_gauss();
        build_model(&spec, &mut rng).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let c = checkpoint_container(&m, &CheckpointMeta { seed: 9 });
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let (m2, meta) = model_from_container(&back).unwrap();
        assert_eq!(meta.seed, 9);
        assert_eq!(m2, m);
    }

    #[test]
    fn missing_array_reported() {
        let m = model();
        let mut c = checkpoint_container(&m, &CheckpointMeta::default());
        c.arrays.retain(|(n, _)| n != "shared.0.sigmas");
        let err = model_from_container(&c).unwrap_err();
        assert!(matches!(err, CheckpointError::Container(ContainerError::MissingArray(ref n)) if n == "shared.0.sigmas"));
    }

    #[test]
    fn tampered_spec_detected() {
        let m = model();
        let mut c = checkpoint_container(&m, &CheckpointMeta::default());
        let text = c.meta.render(": ").replace("spec.num_classes: 3", "spec.num_classes: 4");
        c.meta = KeyValues::parse(&text, ':').unwrap();
        assert!(matches!(model_from_container(&c), Err(CheckpointError::SpecHash { .. })));
    }
}
