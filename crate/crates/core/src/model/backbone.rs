use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use super::{Fusion, ModelConfig};
use crate::error::Result;

/// Conv trunk stages whose outputs can be inspected, shallowest first.
pub const TRUNK_LAYERS: [&str; 3] = ["trunk.stem", "trunk.stage1", "trunk.stage2"];
/// Output of the attention block, reshaped back to a spatial map.
pub const ATTENTION_LAYER: &str = "attention.block";

const WINDOW: usize = 7;
const LN_EPS: f64 = 1e-5;

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get(dim, "weight")?,
            bias: vb.get(dim, "bias")?,
        })
    }

    // composed from primitive ops so that it has a backward pass
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Strided downsample followed by a residual 3×3 mixing conv.
struct Stage {
    down: Conv2d,
    mix: Option<Conv2d>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.down.forward(x)?.gelu()?;
        match &self.mix {
            Some(mix) => Ok((&h + mix.forward(&h)?.gelu()?)?),
            None => Ok(h),
        }
    }
}

/// Swin-style block: non-overlapping 7×7 windows, multi-head self-attention
/// and an MLP, both pre-normed with residuals.
struct WindowAttention {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl WindowAttention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(WindowAttention {
            norm1: LayerNorm::new(dim, vb.pp("norm1"))?,
            qkv: candle_nn::linear(dim, 3 * dim, vb.pp("qkv"))?,
            proj: candle_nn::linear(dim, dim, vb.pp("proj"))?,
            norm2: LayerNorm::new(dim, vb.pp("norm2"))?,
            fc1: candle_nn::linear(dim, 2 * dim, vb.pp("fc1"))?,
            fc2: candle_nn::linear(2 * dim, dim, vb.pp("fc2"))?,
            heads,
        })
    }

    /// `(N, C, H, W)` map → `(N * windows, WINDOW², C)` tokens.
    fn partition(map: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = map.dims4()?;
        let (gh, gw) = (h / WINDOW, w / WINDOW);
        Ok(map
            .reshape((n, c, gh, WINDOW, gw, WINDOW))?
            .permute((0, 2, 4, 3, 5, 1))?
            .reshape((n * gh * gw, WINDOW * WINDOW, c))?)
    }

    fn reverse(tokens: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let (gh, gw) = (h / WINDOW, w / WINDOW);
        Ok(tokens
            .reshape((n, gh, gw, WINDOW, WINDOW, c))?
            .permute((0, 5, 1, 3, 2, 4))?
            .reshape((n, c, h, w))?)
    }

    fn forward(&self, map: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = map.dims4()?;
        let x = Self::partition(map)?;
        let (b, t, _) = x.dims3()?;
        let hd = c / self.heads;

        let qkv = self.qkv.forward(&self.norm1.forward(&x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, c))?;
        let x = (&x + self.proj.forward(&ctx)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        let x = (&x + mlp)?;
        Self::reverse(&x, n, c, h, w)
    }
}

/// Result of one backbone pass.
pub struct BackboneTrace {
    pub features: Tensor,
    /// `(layer id, activation)` for every inspectable layer, in order.
    pub captures: Vec<(String, Tensor)>,
}

/// Convolutional trunk, optional attention companion, and the projection to
/// `feature_dim`.
pub struct Backbone {
    stem: Stage,
    stages: Vec<Stage>,
    attention: Option<WindowAttention>,
    attn_norm: Option<LayerNorm>,
    proj: Linear,
    fusion: Fusion,
}

impl Backbone {
    pub(super) fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let [w0, w1, w2] = cfg.trunk_widths;
        let trunk = vb.pp("trunk");
        let stem = Stage {
            down: candle_nn::conv2d(3, w0, 4, Conv2dConfig { stride: 4, ..Default::default() }, trunk.pp("stem"))?,
            mix: None,
        };
        let mut stages = Vec::new();
        for (i, (cin, cout)) in [(w0, w1), (w1, w2)].into_iter().enumerate() {
            let st = trunk.pp(format!("stage{}", i + 1));
            stages.push(Stage {
                down: candle_nn::conv2d(cin, cout, 2, Conv2dConfig { stride: 2, ..Default::default() }, st.pp("down"))?,
                mix: Some(candle_nn::conv2d(
                    cout,
                    cout,
                    3,
                    Conv2dConfig { padding: 1, ..Default::default() },
                    st.pp("mix"),
                )?),
            });
        }
        let (attention, attn_norm) = if cfg.use_attention_companion {
            let a = vb.pp("attention");
            (
                Some(WindowAttention::new(w2, cfg.attention_heads, a.pp("block"))?),
                Some(LayerNorm::new(w2, a.pp("norm_out"))?),
            )
        } else {
            (None, None)
        };
        let proj_in = match (cfg.use_attention_companion, cfg.fusion) {
            (true, Fusion::Concat) => 2 * w2,
            _ => w2,
        };
        Ok(Backbone {
            stem,
            stages,
            attention,
            attn_norm,
            proj: candle_nn::linear(proj_in, cfg.feature_dim, vb.pp("proj"))?,
            fusion: cfg.fusion,
        })
    }

    /// Runs the backbone. With `replace = Some((layer, t))`, the activation of
    /// `layer` is substituted by `t` and everything downstream uses it.
    pub fn run(&self, images: &Tensor, replace: Option<(&str, &Tensor)>) -> Result<BackboneTrace> {
        let mut captures = Vec::new();
        let mut take = |name: &str, t: Tensor| -> Tensor {
            let t = match replace {
                Some((layer, r)) if layer == name => r.clone(),
                _ => t,
            };
            captures.push((name.to_string(), t.clone()));
            t
        };
        let mut h = take(TRUNK_LAYERS[0], self.stem.forward(images)?);
        for (stage, name) in self.stages.iter().zip(&TRUNK_LAYERS[1..]) {
            h = take(name, stage.forward(&h)?);
        }
        let conv_pooled = h.flatten_from(2)?.mean(2)?;
        let pooled = match (&self.attention, &self.attn_norm) {
            (Some(attn), Some(norm)) => {
                let map = take(ATTENTION_LAYER, attn.forward(&h)?);
                let attn_pooled = norm.forward(&map.flatten_from(2)?.mean(2)?)?;
                match self.fusion {
                    Fusion::Concat => Tensor::cat(&[&conv_pooled, &attn_pooled], 1)?,
                    Fusion::Sum => (conv_pooled + attn_pooled)?,
                }
            }
            _ => conv_pooled,
        };
        Ok(BackboneTrace {
            features: self.proj.forward(&pooled)?,
            captures,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn window_partition_round_trips() {
        let map = Tensor::arange(0f32, (2 * 4 * 14 * 14) as f32, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 14, 14))
            .unwrap();
        let tokens = WindowAttention::partition(&map).unwrap();
        assert_eq!(tokens.dims(), &[8, 49, 4]);
        // first window, first token, channel 1 is map[0, 1, 0, 0]
        let v = tokens.get(0).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[1], 196.0);
        // second window of image 0 starts at column 7
        let v = tokens.get(1).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[0], 7.0);
        let back = WindowAttention::reverse(&tokens, 2, 4, 14, 14).unwrap();
        let diff = (back - &map).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
