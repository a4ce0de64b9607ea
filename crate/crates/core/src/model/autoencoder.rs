use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, VarBuilder};

use super::ModelConfig;
use crate::error::Result;

/// Five 2×2 stride-2 convolutions: 224 → 112 → 56 → 28 → 14 → 7.
pub struct Encoder {
    convs: Vec<Conv2d>,
}

impl Encoder {
    pub(super) fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let w = cfg.autoencoder_widths;
        let chans = [3, w[0], w[1], w[2], w[3], cfg.latent_shape[0]];
        let conv_cfg = Conv2dConfig {
            stride: 2,
            ..Default::default()
        };
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| candle_nn::conv2d(c[0], c[1], 2, conv_cfg, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<_>>()?;
        Ok(Encoder { convs })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut h = images.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

/// Mirror of the encoder with 2×2 stride-2 transposed convolutions; the
/// sigmoid output lies in `[0, 1]`.
pub struct Decoder {
    deconvs: Vec<ConvTranspose2d>,
}

impl Decoder {
    pub(super) fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let w = cfg.autoencoder_widths;
        let chans = [cfg.latent_shape[0], w[3], w[2], w[1], w[0], 3];
        let deconv_cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let deconvs = chans
            .windows(2)
            .enumerate()
            .map(|(i, c)| candle_nn::conv_transpose2d(c[0], c[1], 2, deconv_cfg, vb.pp(format!("deconv{i}"))))
            .collect::<candle_core::Result<_>>()?;
        Ok(Decoder { deconvs })
    }

    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        let mut h = latent.clone();
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            h = deconv.forward(&h)?;
            if i != last {
                h = h.gelu()?;
            }
        }
        // written out so every step has a backward rule
        Ok((h.neg()?.exp()? + 1.0)?.recip()?)
    }
}
