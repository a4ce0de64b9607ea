//! Inference export: plain parameters in safetensors plus a JSON graph
//! description that a runtime in any language can follow.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{params_hash, ModelBundle, ModelConfig, Normalization, ATTENTION_LAYER};
use crate::error::{Error, Result};

pub const EXPORT_FORMAT: &str = "deepguard-export-v1";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const GRAPH_FILE: &str = "graph.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// `None` marks the batch dimension.
    pub shape: Vec<Option<usize>>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub name: String,
    pub op: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Prefix shared by the parameters this node reads.
    pub params: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportGraph {
    pub format: String,
    pub model: ModelConfig,
    pub config_hash: String,
    pub param_hash: String,
    /// RGB8 pixels are divided by 255, then normalized as described here.
    pub preprocessing: Normalization,
    pub inputs: Vec<TensorSpec>,
    pub outputs: Vec<TensorSpec>,
    pub nodes: Vec<GraphNode>,
    pub parameters: Vec<TensorSpec>,
}

fn node(name: &str, op: &str, inputs: &[&str], outputs: &[&str], params: Option<&str>) -> GraphNode {
    GraphNode {
        name: name.into(),
        op: op.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        params: params.map(str::to_string),
    }
}

fn dtype_name(dtype: DType) -> String {
    format!("{dtype:?}").to_lowercase()
}

impl ExportGraph {
    pub fn describe(model: &ModelBundle) -> Result<Self> {
        let cfg = &model.config;
        let dt = dtype_name(model.dtype());
        let s = cfg.image_size;
        let [lc, lh, lw] = cfg.latent_shape;
        let spec = |name: &str, dims: &[usize]| TensorSpec {
            name: name.into(),
            shape: std::iter::once(None).chain(dims.iter().map(|d| Some(*d))).collect(),
            dtype: dt.clone(),
        };
        let backbone_op = if cfg.use_attention_companion {
            format!("{}_trunk+{ATTENTION_LAYER}", cfg.backbone_id)
        } else {
            format!("{}_trunk", cfg.backbone_id)
        };
        let nodes = vec![
            node("encode", "conv_stack_2x2_stride2", &["images"], &["latent"], Some("encoder")),
            node("decode", "deconv_stack_2x2_stride2_sigmoid", &["latent"], &["reconstruction_unit"], Some("decoder")),
            node("normalize_reconstruction", "normalize", &["reconstruction_unit"], &["reconstruction"], None),
            node("features_input", &backbone_op, &["images"], &["features_input"], Some("backbone")),
            node("features_recon", &backbone_op, &["reconstruction"], &["features_recon"], Some("backbone")),
            node("concat", "concat_dim1", &["features_input", "features_recon"], &["head_input"], None),
            node("head", "mlp_gelu", &["head_input"], &["logits"], Some("head")),
            node("probability", "sigmoid", &["logits"], &["p_fake"], None),
        ];
        let params = model.snapshot()?;
        let parameters = params
            .iter()
            .map(|(n, t)| TensorSpec {
                name: n.clone(),
                shape: t.dims().iter().map(|d| Some(*d)).collect(),
                dtype: dtype_name(t.dtype()),
            })
            .collect();
        Ok(ExportGraph {
            format: EXPORT_FORMAT.into(),
            model: cfg.clone(),
            config_hash: cfg.config_hash(),
            param_hash: params_hash(&params)?,
            preprocessing: cfg.normalization.clone(),
            inputs: vec![spec("images", &[3, s, s])],
            outputs: vec![
                spec("logits", &[]),
                spec("p_fake", &[]),
                spec("latent", &[lc, lh, lw]),
                spec("reconstruction", &[3, s, s]),
            ],
            nodes,
            parameters,
        })
    }
}

/// Writes `model.safetensors` and `graph.json` into `dir`; returns both paths.
pub fn export_model(model: &ModelBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let graph = ExportGraph::describe(model)?;
    let params = model.snapshot()?;
    let mut info = HashMap::new();
    info.insert("format".to_string(), EXPORT_FORMAT.to_string());
    info.insert("param_hash".to_string(), graph.param_hash.clone());
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = safetensors::serialize(params.iter().map(|(n, t)| (n.clone(), t)), Some(info))
        .map_err(|e| Error::Integrity(format!("cannot serialize weights: {e}")))?;
    std::fs::write(&weights, bytes).map_err(|e| Error::io(&weights, e))?;
    let graph_path = dir.join(GRAPH_FILE);
    std::fs::write(&graph_path, serde_json::to_string_pretty(&graph)?).map_err(|e| Error::io(&graph_path, e))?;
    Ok(vec![weights, graph_path])
}

/// Rebuilds a model from an export directory, checking the recorded hash.
pub fn load_export(dir: &Path, dtype: DType, device: &Device) -> Result<ModelBundle> {
    let graph_path = dir.join(GRAPH_FILE);
    let text = std::fs::read_to_string(&graph_path).map_err(|e| Error::io(&graph_path, e))?;
    let graph: ExportGraph = serde_json::from_str(&text)?;
    if graph.format != EXPORT_FORMAT {
        return Err(Error::Integrity(format!("unsupported export format `{}`", graph.format)));
    }
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
    let params: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
    let actual = params_hash(&params)?;
    if actual != graph.param_hash {
        return Err(Error::Integrity(format!(
            "{}: parameter hash {actual} does not match graph ({})",
            weights.display(),
            graph.param_hash
        )));
    }
    let model = ModelBundle::new(graph.model, dtype, device)?;
    model.load_params(&params)?;
    Ok(model)
}
