use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig};
use deepguard::cam::CamModel;
use deepguard::Result;

pub const LAYER: &str = "planted.conv";

/// The logit reads only the top-left 56×56 patch: the input is masked to
/// that patch, then a bias-free 8×8 stride-8 conv and a positive linear
/// read-out follow.
pub struct PlantedModel {
    mask: Tensor,
    conv: Conv2d,
    readout: Tensor,
    /// Scales the read-out; 0 makes the logit constant.
    pub gain: f64,
}

impl PlantedModel {
    pub fn new(gain: f64) -> Self {
        let dev = Device::Cpu;
        let mut m = vec![0f32; 224 * 224];
        for y in 0..56 {
            for x in 0..56 {
                m[y * 224 + x] = 1.0;
            }
        }
        let mask = Tensor::from_vec(m, (1, 1, 224, 224), &dev).unwrap();
        let w: Vec<f32> = (0..4 * 3 * 8 * 8).map(|i| 0.01 + (i % 7) as f32 * 0.002).collect();
        let weight = Tensor::from_vec(w, (4, 3, 8, 8), &dev).unwrap();
        let conv = Conv2d::new(weight, None, Conv2dConfig { stride: 8, ..Default::default() });
        let readout = Tensor::from_vec((0..4 * 28 * 28).map(|i| 0.5 + (i % 5) as f32 * 0.1).collect(), (1, 4, 28, 28), &dev).unwrap();
        PlantedModel { mask, conv, readout, gain }
    }
}

impl CamModel for PlantedModel {
    fn cam_layers(&self) -> Vec<String> {
        vec![LAYER.to_string()]
    }

    fn default_layer(&self) -> String {
        LAYER.to_string()
    }

    fn layer_activation(&self, images: &Tensor, _layer: &str) -> Result<Tensor> {
        let x = images.to_dtype(DType::F32)?.broadcast_mul(&self.mask)?;
        Ok(self.conv.forward(&x)?)
    }

    fn logits_from_activation(&self, _images: &Tensor, _layer: &str, activation: &Tensor) -> Result<Tensor> {
        let weighted = activation.broadcast_mul(&(&self.readout * self.gain)?)?;
        Ok((weighted.sum_all()? - 1.0)?.reshape(1)?)
    }
}
