//! The detector network.
//!
//! An autoencoder maps each 3×224×224 input to a 256×7×7 latent and back.
//! A hybrid backbone (convolutional trunk plus an optional windowed-attention
//! companion) embeds both the input and its reconstruction into 100-d
//! features; their 200-d concatenation feeds a single-logit head whose
//! sigmoid is the probability that the face is fake.

mod autoencoder;
mod backbone;
pub mod export;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Linear, VarBuilder, VarMap};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use autoencoder::{Decoder, Encoder};
pub use backbone::{Backbone, ATTENTION_LAYER, TRUNK_LAYERS};

use crate::dataset::CROP_SIZE;
use crate::error::{Error, Result};

pub const LATENT_SHAPE: [usize; 3] = [256, 7, 7];

/// Trunks that can be named by `backbone_id`.
pub const BACKBONES: &[&str] = &["toy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    /// Pixels scaled to `[0, 1]`.
    UnitRange,
    /// Per-channel `(x / 255 - mean) / std`.
    MeanStd { mean: [f64; 3], std: [f64; 3] },
}

/// How conv and attention features are combined before the 100-d projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_shape: [usize; 3],
    pub feature_dim: usize,
    /// `false` is the RST ablation: the attention companion is removed.
    pub use_attention_companion: bool,
    pub backbone_id: String,
    pub head_hidden: Vec<usize>,
    pub fusion: Fusion,
    pub normalization: Normalization,
    /// Widths of the first four encoder stages; the fifth is the latent depth.
    pub autoencoder_widths: [usize; 4],
    /// Channel widths of the three trunk stages.
    pub trunk_widths: [usize; 3],
    pub attention_heads: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: CROP_SIZE as usize,
            latent_shape: LATENT_SHAPE,
            feature_dim: 100,
            use_attention_companion: true,
            backbone_id: "toy".to_string(),
            head_hidden: vec![128],
            fusion: Fusion::Concat,
            normalization: Normalization::UnitRange,
            autoencoder_widths: [8, 16, 32, 64],
            trunk_widths: [16, 32, 48],
            attention_heads: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size != CROP_SIZE as usize {
            return Err(Error::Config(format!("image_size must be {CROP_SIZE}, got {}", self.image_size)));
        }
        if self.latent_shape != LATENT_SHAPE {
            return Err(Error::Config(format!(
                "latent_shape is fixed to {LATENT_SHAPE:?}, got {:?}",
                self.latent_shape
            )));
        }
        if !BACKBONES.contains(&self.backbone_id.as_str()) {
            return Err(Error::Config(format!(
                "unknown backbone_id `{}`; available: {}",
                self.backbone_id,
                BACKBONES.join(", ")
            )));
        }
        if self.feature_dim == 0 || self.head_hidden.contains(&0) || self.autoencoder_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.trunk_widths.contains(&0) || self.attention_heads == 0 || self.trunk_widths[2] % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "trunk width {} must be a positive multiple of attention_heads {}",
                self.trunk_widths[2], self.attention_heads
            )));
        }
        if let Normalization::MeanStd { std, .. } = &self.normalization {
            if std.iter().any(|s| *s <= 0.0) {
                return Err(Error::Config("normalization std must be positive".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON form.
    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Hash of a value's JSON form with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps objects in a BTreeMap, so keys come out sorted
    let v = serde_json::to_value(value).expect("config serializes to JSON");
    let text = serde_json::to_string(&v).expect("JSON value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(N,)` pre-sigmoid scores; positive means fake.
    pub logits: Tensor,
    pub reconstruction: Tensor,
    pub latent: Tensor,
    pub features_input: Tensor,
    pub features_recon: Tensor,
    /// `(N, 2 * feature_dim)` tensor actually consumed by the head.
    pub head_input: Tensor,
}

struct Head {
    hidden: Vec<Linear>,
    out: Linear,
}

impl Head {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut width = 2 * cfg.feature_dim;
        for (i, &h) in cfg.head_hidden.iter().enumerate() {
            hidden.push(candle_nn::linear(width, h, vb.pp(format!("fc{i}")))?);
            width = h;
        }
        let out = candle_nn::linear(width, 1, vb.pp("out"))?;
        Ok(Head { hidden, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.hidden {
            h = l.forward(&h)?.gelu()?;
        }
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }
}

/// Encoder, decoder, backbone and head sharing one parameter map.
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub backbone: Backbone,
    head: Head,
    varmap: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.param_count())
            .finish()
    }
}

impl ModelBundle {
    /// Builds the network with seeded fan-in uniform initialization.
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let encoder = Encoder::new(&config, vb.pp("encoder"))?;
        let decoder = Decoder::new(&config, vb.pp("decoder"))?;
        let backbone = Backbone::new(&config, vb.pp("backbone"))?;
        let head = Head::new(&config, vb.pp("head"))?;
        let model = ModelBundle {
            encoder,
            decoder,
            backbone,
            head,
            varmap,
            dtype,
            device: device.clone(),
            config,
        };
        model.reinitialize(model.config.init_seed)?;
        Ok(model)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Parameters sorted by name.
    pub fn named_params(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Resets every parameter: weights and biases uniform in `±1/sqrt(fan_in)`,
    /// normalization gains to 1 and shifts to 0.
    pub fn reinitialize(&self, seed: u64) -> Result<()> {
        let params = self.named_params();
        let shapes: BTreeMap<String, Vec<usize>> =
            params.iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in &params {
            let n = var.elem_count();
            let values: Vec<f64> = if name.contains(".norm") {
                let fill = if name.ends_with(".weight") { 1.0 } else { 0.0 };
                vec![fill; n]
            } else {
                let weight_name = name.strip_suffix(".bias").map(|p| format!("{p}.weight"));
                let wdims = match &weight_name {
                    Some(w) => shapes.get(w).cloned().unwrap_or_else(|| var.dims().to_vec()),
                    None => var.dims().to_vec(),
                };
                let bound = 1.0 / (fan_in(name, &wdims) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Overwrites parameters from a name → tensor map; every parameter must be present.
    pub fn load_params(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.named_params() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape {
                    expected: format!("{name} {:?}", var.dims()),
                    got: format!("{:?}", t.dims()),
                });
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Detached copies of all parameters.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.named_params()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn param_hash(&self) -> Result<String> {
        params_hash(&self.snapshot()?)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, var) in self.named_params() {
            let s = var.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::Integrity(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let s = self.config.image_size;
        match images.dims() {
            [n, 3, h, w] if *h == s && *w == s && *n > 0 => Ok(*n),
            other => Err(Error::Shape {
                expected: format!("(N, 3, {s}, {s})"),
                got: format!("{other:?}"),
            }),
        }
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.encoder.forward(images)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        match latent.dims() {
            [n, c, h, w] if *n > 0 && [*c, *h, *w] == self.config.latent_shape => {}
            other => {
                return Err(Error::Shape {
                    expected: format!("(N, {:?})", self.config.latent_shape),
                    got: format!("{other:?}"),
                })
            }
        }
        let unit = self.decoder.forward(latent)?;
        self.normalize_unit(&unit)
    }

    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        Ok(self.backbone.run(images, None)?.features)
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        self.check_images(images)?;
        self.check_finite()?;
        let latent = self.encoder.forward(images)?;
        let reconstruction = self.normalize_unit(&self.decoder.forward(&latent)?)?;
        let features_input = self.backbone.run(images, None)?.features;
        let features_recon = self.backbone.run(&reconstruction, None)?.features;
        let head_input = Tensor::cat(&[&features_input, &features_recon], 1)?;
        let logits = self.head.forward(&head_input)?;
        Ok(ForwardOutput {
            logits,
            reconstruction,
            latent,
            features_input,
            features_recon,
            head_input,
        })
    }

    /// Activations of the named layer on the input branch.
    pub fn layer_activation(&self, images: &Tensor, layer: &str) -> Result<Tensor> {
        self.check_images(images)?;
        self.check_layer(layer)?;
        let trace = self.backbone.run(images, None)?;
        trace
            .captures
            .into_iter()
            .find(|(n, _)| n == layer)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("layer `{layer}` produced no activation")))
    }

    /// Logits with the input-branch activation of `layer` replaced by `activation`.
    pub fn logits_from_activation(&self, images: &Tensor, layer: &str, activation: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        self.check_layer(layer)?;
        let latent = self.encoder.forward(images)?;
        let reconstruction = self.normalize_unit(&self.decoder.forward(&latent)?)?;
        let features_recon = self.backbone.run(&reconstruction, None)?.features.detach();
        let features_input = self.backbone.run(images, Some((layer, activation)))?.features;
        let head_input = Tensor::cat(&[&features_input, &features_recon], 1)?;
        self.head.forward(&head_input)
    }

    /// Layers valid as GradCAM targets, shallowest first.
    pub fn cam_layers(&self) -> Vec<&'static str> {
        let mut layers = TRUNK_LAYERS.to_vec();
        if self.config.use_attention_companion {
            layers.push(ATTENTION_LAYER);
        }
        layers
    }

    fn check_layer(&self, layer: &str) -> Result<()> {
        let valid = self.cam_layers();
        if valid.contains(&layer) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown layer `{layer}`; valid layers: {}", valid.join(", "))))
        }
    }

    /// Maps decoder output in `[0, 1]` into the model's input normalization.
    fn normalize_unit(&self, unit: &Tensor) -> Result<Tensor> {
        match &self.config.normalization {
            Normalization::UnitRange => Ok(unit.clone()),
            Normalization::MeanStd { mean, std } => {
                let m = Tensor::new(mean.as_slice(), &self.device)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
                let s = Tensor::new(std.as_slice(), &self.device)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
                Ok(unit.broadcast_sub(&m)?.broadcast_div(&s)?)
            }
        }
    }

    /// Converts 8-bit crops to a normalized `(N, 3, H, W)` batch.
    pub fn images_to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.dimensions() != (s as u32, s as u32) {
                return Err(Error::Shape {
                    expected: format!("{s}x{s}x3 image"),
                    got: format!("{}x{}x3 image", img.width(), img.height()),
                });
            }
            let raw = img.as_raw();
            for c in 0..3 {
                data.extend(raw.iter().skip(c).step_by(3).map(|&v| v as f32 / 255.0));
            }
        }
        let unit = Tensor::from_vec(data, (images.len(), 3, s, s), &self.device)?.to_dtype(self.dtype)?;
        self.normalize_unit(&unit)
    }
}

fn fan_in(name: &str, dims: &[usize]) -> usize {
    match dims {
        // transposed conv weights are (in, out, k, k); with stride == kernel each
        // output pixel sees exactly one tap per input channel
        [cin, _, _, _] if name.contains("deconv") => *cin,
        [_, cin, kh, kw] => cin * kh * kw,
        [_, cin] => *cin,
        [n] => *n,
        _ => 1,
    }
    .max(1)
}

/// SHA-256 over parameter names, shapes and little-endian f64 values.
pub fn params_hash(params: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.dtype().as_str().as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}
