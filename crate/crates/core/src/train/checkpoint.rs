use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::optim::{AdamHyper, AdamState};
use super::EpochRecord;
use crate::error::{Error, Result};
use crate::model::{params_hash, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "deepguard-checkpoint-v1";
const META_KEY: &str = "deepguard";
const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Epoch shuffles and augmentation draws are derived from `(seed, epoch)`,
/// so these two values are the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub config_hash: String,
    pub run_config_hash: Option<String>,
    pub stage: String,
    pub stage_index: usize,
    /// 0 for the initial parameters of a stage.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    /// Validation metrics at `epoch`, when a validation split exists.
    pub metrics: Option<EpochRecord>,
    pub param_hash: String,
    pub optimizer: Option<(AdamHyper, u64)>,
    /// Parameter hash when the stage started, carried across resumes.
    #[serde(default)]
    pub stage_initial_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Stored as safetensors; the metadata travels as JSON under one header key.
    /// The file appears atomically via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in &self.params {
            tensors.push((format!("{PARAM_PREFIX}{n}"), t));
        }
        if let Some(opt) = &self.optimizer {
            for (n, t) in &opt.m {
                tensors.push((format!("{M_PREFIX}{n}"), t));
            }
            for (n, t) in &opt.v {
                tensors.push((format!("{V_PREFIX}{n}"), t));
            }
        }
        let mut info = HashMap::new();
        info.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let bytes = safetensors::serialize(tensors, Some(info))
            .map_err(|e| Error::Integrity(format!("cannot serialize checkpoint: {e}")))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint and verifies its stored parameter hash.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: String| Error::Integrity(format!("{}: {why}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("no checkpoint metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", meta.format)));
        }
        let all = candle_core::safetensors::load_buffer(&bytes, device)?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (key, t) in all {
            if let Some(n) = key.strip_prefix(PARAM_PREFIX) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix(M_PREFIX) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix(V_PREFIX) {
                v.insert(n.to_string(), t);
            }
        }
        let actual = params_hash(&params)?;
        if actual != meta.param_hash {
            return Err(bad(format!("parameter hash {actual} does not match recorded {}", meta.param_hash)));
        }
        let optimizer = meta.optimizer.map(|(hyper, step)| AdamState { hyper, step, m, v });
        Ok(Checkpoint { params, optimizer, meta })
    }
}
