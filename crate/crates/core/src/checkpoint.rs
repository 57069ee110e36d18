//! Checkpoint files and directories.
//!
//! Parameters are stored as little-endian f64 safetensors. The header's
//! metadata holds one key, `groundchat`, whose value is a JSON object with
//! sorted keys (at least `schema_version`), so identical parameters always
//! serialize to identical bytes.
//!
//! A checkpoint directory looks like
//!
//! ```text
//! latest.safetensors   parameters after the last finished epoch
//! best.safetensors     parameters with the best validation perplexity
//! tokenizer.json
//! config.toml          snapshot of the configuration used for training
//! train_log.jsonl      one record per epoch
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};
use crate::generator::Tokenizer;
use crate::model::{GroundingModel, ModelConfig};
use crate::params::{NamedTensor, Params};

pub const SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "groundchat";

pub const LATEST: &str = "latest.safetensors";
pub const BEST: &str = "best.safetensors";
pub const TOKENIZER: &str = "tokenizer.json";
pub const CONFIG: &str = "config.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";

struct F64View {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &F64View {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

pub fn params_to_bytes(params: &dyn ParamsDyn, extra_meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let tensors = params.named();
    let views: Vec<(String, F64View)> = tensors
        .into_iter()
        .map(|t| {
            let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (t.name, F64View { shape: t.shape, bytes })
        })
        .collect();
    let mut meta: BTreeMap<String, String> = extra_meta.clone();
    meta.insert("schema_version".into(), SCHEMA_VERSION.to_string());
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    safetensors::serialize(views.iter().map(|(n, v)| (n.as_str(), v)), Some(info))
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses a parameter file into named tensors and its metadata.
pub fn bytes_to_tensors(bytes: &[u8]) -> Result<(BTreeMap<String, NamedTensor>, BTreeMap<String, String>)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta: BTreeMap<String, String> = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(s) => serde_json::from_str(s)?,
        None => return Err(Error::Checkpoint("missing groundchat metadata".into())),
    };
    match meta.get("schema_version").map(String::as_str) {
        Some(v) if v == SCHEMA_VERSION.to_string() => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported schema_version {other:?}, expected {SCHEMA_VERSION}"
            )))
        }
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("{name}: expected F64, found {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(
            name.clone(),
            NamedTensor {
                name,
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok((out, meta))
}

/// Object-safe view of [`Params`] for serialization.
pub trait ParamsDyn {
    fn named(&self) -> Vec<NamedTensor>;
}

impl<P: Params> ParamsDyn for P {
    fn named(&self) -> Vec<NamedTensor> {
        self.named_tensors()
    }
}

pub fn save_params<P: Params>(path: &Path, params: &P, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = params_to_bytes(params, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_params<P: Params>(path: &Path, params: &mut P) -> Result<BTreeMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let (tensors, meta) = bytes_to_tensors(&bytes)?;
    params.load_named(&tensors)?;
    let expected = params.num_params();
    let stored: usize = tensors.values().map(|t| t.data.len()).sum();
    if stored != expected {
        return Err(Error::Checkpoint(format!(
            "{} holds {stored} values but the model has {expected}",
            path.display()
        )));
    }
    Ok(meta)
}

/// Writes tokenizer and config snapshot into `dir`.
pub fn write_model_files(dir: &Path, model: &GroundingModel, config_snapshot: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.tokenizer.save(&dir.join(TOKENIZER))?;
    std::fs::write(dir.join(CONFIG), config_snapshot)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. `which` is a file name
/// inside the directory, normally [`BEST`] or [`LATEST`].
pub fn load_model(dir: &Path, which: &str, config: &ModelConfig) -> Result<GroundingModel> {
    let tokenizer = Tokenizer::load(&dir.join(TOKENIZER))?;
    let mut model = GroundingModel::new(config.clone(), tokenizer)?;
    load_params(&dir.join(which), &mut model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{LogLinearParams, Role};

    #[test]
    fn round_trip_is_exact() {
        let p = LogLinearParams::init(Role::Inference, 4, true, 0.3, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let meta = BTreeMap::from([("epoch".to_string(), "2".to_string())]);
        save_params(&path, &p, &meta).unwrap();
        let mut q = LogLinearParams::zeros(Role::Inference, 4, true);
        let got = load_params(&path, &mut q).unwrap();
        assert_eq!(p, q);
        assert_eq!(got["epoch"], "2");
        assert_eq!(got["schema_version"], SCHEMA_VERSION.to_string());
    }

    #[test]
    fn serialization_is_byte_stable() {
        let p = LogLinearParams::init(Role::Prior, 3, false, 0.3, 1);
        let meta = BTreeMap::from([("a".to_string(), "1".to_string()), ("b".to_string(), "2".to_string())]);
        let a = params_to_bytes(&p, &meta).unwrap();
        let b = params_to_bytes(&p.clone(), &meta.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = LogLinearParams::init(Role::Prior, 3, false, 0.3, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        save_params(&path, &p, &BTreeMap::new()).unwrap();
        let mut wrong = LogLinearParams::zeros(Role::Prior, 4, false);
        assert!(matches!(load_params(&path, &mut wrong), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_metadata_is_rejected() {
        let bytes = safetensors::serialize(Vec::<(&str, &F64View)>::new(), None).unwrap();
        assert!(bytes_to_tensors(&bytes).is_err());
    }
}
