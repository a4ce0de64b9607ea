//! GradCAM heat maps, overlays, and how much heat falls on the eyes.

use candle_core::{DType, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{EyeMaskSpec, Label, CROP_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

const SIDE: usize = CROP_SIZE as usize;

/// A network GradCAM can inspect: the activation of a named layer, and the
/// logits recomputed with that activation swapped in.
pub trait CamModel {
    fn cam_layers(&self) -> Vec<String>;
    fn default_layer(&self) -> String;
    fn layer_activation(&self, images: &Tensor, layer: &str) -> Result<Tensor>;
    fn logits_from_activation(&self, images: &Tensor, layer: &str, activation: &Tensor) -> Result<Tensor>;
}

impl CamModel for ModelBundle {
    fn cam_layers(&self) -> Vec<String> {
        ModelBundle::cam_layers(self).into_iter().map(String::from).collect()
    }

    /// Deepest convolutional stage of the trunk.
    fn default_layer(&self) -> String {
        crate::model::TRUNK_LAYERS[2].to_string()
    }

    fn layer_activation(&self, images: &Tensor, layer: &str) -> Result<Tensor> {
        ModelBundle::layer_activation(self, images, layer)
    }

    fn logits_from_activation(&self, images: &Tensor, layer: &str, activation: &Tensor) -> Result<Tensor> {
        ModelBundle::logits_from_activation(self, images, layer, activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Row-major 224×224 values in `[0, 1]`.
    pub heat: Vec<f32>,
    pub target_layer: String,
    pub target_class: Label,
    pub sample_id: String,
    /// Set when the rectified map was identically zero.
    pub degenerate: bool,
}

impl AttentionMap {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.heat[y * SIDE + x]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(CROP_SIZE, CROP_SIZE, |x, y| {
            Luma([(self.at(x as usize, y as usize) * 255.0).round() as u8])
        })
    }

    /// The map through [`colormap`].
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(CROP_SIZE, CROP_SIZE, |x, y| Rgb(colormap(self.at(x as usize, y as usize))))
    }

    /// Share of the total heat inside `[x0, x1) × [y0, y1)`; 0 for an all-zero map.
    pub fn mass_in(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let total: f64 = self.heat.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(SIDE) {
            for x in x0..x1.min(SIDE) {
                inside += self.at(x, y) as f64;
            }
        }
        inside / total
    }
}

/// GradCAM for one image `(1, 3, 224, 224)`.
///
/// The class score is the logit for fake and its negation for real; with
/// `target_class = None` the predicted class is used.
pub fn gradcam_map(
    model: &dyn CamModel,
    image: &Tensor,
    target_layer: &str,
    target_class: Option<Label>,
    sample_id: &str,
) -> Result<AttentionMap> {
    let layers = model.cam_layers();
    if !layers.iter().any(|l| l == target_layer) {
        return Err(Error::Config(format!(
            "unknown layer `{target_layer}`; valid layers: {}",
            layers.join(", ")
        )));
    }
    if image.dim(0)? != 1 {
        return Err(Error::Shape {
            expected: "(1, 3, 224, 224)".into(),
            got: format!("{:?}", image.dims()),
        });
    }
    let activation = Var::from_tensor(&model.layer_activation(image, target_layer)?.detach())?;
    let logit = model
        .logits_from_activation(image, target_layer, activation.as_tensor())?
        .flatten_all()?
        .get(0)?;
    let class = match target_class {
        Some(c) => c,
        None if logit.to_dtype(DType::F64)?.to_scalar::<f64>()? >= 0.0 => Label::Fake,
        None => Label::Real,
    };
    let score = match class {
        Label::Fake => logit,
        Label::Real => logit.neg()?,
    };
    let grads = score.backward()?;
    let (_, c, h, w) = activation.dims4()?;
    let act = activation.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let grad = match grads.get(activation.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; act.len()],
    };
    let hw = h * w;
    let alpha: Vec<f64> = (0..c).map(|k| grad[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let mut cam = vec![0.0f64; hw];
    for (k, a) in alpha.iter().enumerate() {
        for (dst, v) in cam.iter_mut().zip(&act[k * hw..(k + 1) * hw]) {
            *dst += a * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let up = upsample_bilinear(&cam, w, h, SIDE, SIDE);
    let max = up.iter().cloned().fold(0.0f64, f64::max);
    let degenerate = max <= 0.0;
    let heat = if degenerate {
        vec![0.0; SIDE * SIDE]
    } else {
        up.iter().map(|v| (v / max) as f32).collect()
    };
    Ok(AttentionMap {
        heat,
        target_layer: target_layer.to_string(),
        target_class: class,
        sample_id: sample_id.to_string(),
        degenerate,
    })
}

/// Half-pixel-centered bilinear resize with edge clamping.
pub fn upsample_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let coord = |d: usize, sn: usize, dn: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(sn - 1);
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Stops of the overlay palette, dark to bright; colors between stops are
/// linear in RGB and rounded to the nearest integer.
pub const PALETTE: [(f32, [u8; 3]); 5] = [
    (0.0, [0, 0, 4]),
    (0.25, [87, 16, 110]),
    (0.5, [188, 55, 84]),
    (0.75, [249, 142, 9]),
    (1.0, [252, 255, 164]),
];

pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in PALETTE.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if v <= t1 {
            let f = (v - t0) / (t1 - t0);
            return std::array::from_fn(|i| (c0[i] as f32 + f * (c1[i] as f32 - c0[i] as f32)).round() as u8);
        }
    }
    PALETTE[PALETTE.len() - 1].1
}

/// `(1 - alpha)·image + alpha·colormap(heat)`, rounded and clipped.
pub fn overlay(image: &RgbImage, map: &AttentionMap, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if image.dimensions() != (CROP_SIZE, CROP_SIZE) || map.heat.len() != SIDE * SIDE {
        return Err(Error::Shape {
            expected: format!("{CROP_SIZE}x{CROP_SIZE} image and map"),
            got: format!("{}x{} image, {} heat values", image.width(), image.height(), map.heat.len()),
        });
    }
    Ok(RgbImage::from_fn(CROP_SIZE, CROP_SIZE, |x, y| {
        let src = image.get_pixel(x, y).0;
        let cm = colormap(map.at(x as usize, y as usize));
        Rgb(std::array::from_fn(|i| {
            ((1.0 - alpha) * src[i] as f32 + alpha * cm[i] as f32).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

/// Σ heat inside the dilated eye boxes / Σ heat; 0 when the map is all zero.
pub fn eye_region_mass(map: &AttentionMap, spec: &EyeMaskSpec) -> f64 {
    let cover = spec.coverage();
    let total: f64 = map.heat.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = map
        .heat
        .iter()
        .zip(&cover)
        .filter(|(_, c)| **c)
        .map(|(&v, _)| v as f64)
        .sum();
    inside / total
}
