//! Training-time augmentation policies.
//!
//! Three regimes exist:
//! - `NA`: no augmentation; the input passes through untouched.
//! - `RF`: geometric only (horizontal flip, small rotation). Every output is
//!   a rearrangement of input pixels, so the real/fake label cannot change.
//! - `LEGACY`: the photometric pipeline (noise, brightness/contrast, sharpen)
//!   kept only to reproduce the baseline. It has to be requested explicitly.
//!
//! Policies are pure functions of `(policy, image, draw)`: the draw index
//! selects an independent ChaCha stream under the policy seed.

use std::fmt;
use std::str::FromStr;

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::check_crop;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Legacy,
    Na,
    Rf,
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyName::Legacy => "legacy",
            PolicyName::Na => "na",
            PolicyName::Rf => "rf",
        })
    }
}

impl FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "legacy" => Ok(PolicyName::Legacy),
            "na" | "none" => Ok(PolicyName::Na),
            "rf" => Ok(PolicyName::Rf),
            other => Err(Error::Config(format!("unknown augmentation policy `{other}` (expected legacy|na|rf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugOp {
    HorizontalFlip { p: f64 },
    VerticalFlip { p: f64 },
    /// Angle uniform in `[-max_deg, max_deg]`, counter-clockwise positive.
    Rotation { p: f64, max_deg: f64 },
    /// Additive noise with sigma uniform in `[sigma_min, sigma_max]` (0–255 scale).
    GaussianNoise { p: f64, sigma_min: f64, sigma_max: f64 },
    BrightnessContrast { p: f64, brightness: f64, contrast: f64 },
    Sharpen { p: f64, alpha_min: f64, alpha_max: f64 },
}

impl AugOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugOp::HorizontalFlip { .. } => "horizontal_flip",
            AugOp::VerticalFlip { .. } => "vertical_flip",
            AugOp::Rotation { .. } => "rotation",
            AugOp::GaussianNoise { .. } => "gaussian_noise",
            AugOp::BrightnessContrast { .. } => "brightness_contrast",
            AugOp::Sharpen { .. } => "sharpen",
        }
    }

    pub fn probability(&self) -> f64 {
        match *self {
            AugOp::HorizontalFlip { p }
            | AugOp::VerticalFlip { p }
            | AugOp::Rotation { p, .. }
            | AugOp::GaussianNoise { p, .. }
            | AugOp::BrightnessContrast { p, .. }
            | AugOp::Sharpen { p, .. } => p,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, AugOp::HorizontalFlip { .. } | AugOp::VerticalFlip { .. } | AugOp::Rotation { .. })
    }

    fn validate(&self) -> Result<()> {
        let p = self.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{}: probability {p} outside [0, 1]", self.name())));
        }
        let ok = match *self {
            AugOp::Rotation { max_deg, .. } => (0.0..=180.0).contains(&max_deg),
            AugOp::GaussianNoise { sigma_min, sigma_max, .. } => sigma_min >= 0.0 && sigma_min <= sigma_max,
            AugOp::BrightnessContrast { brightness, contrast, .. } => {
                (0.0..=1.0).contains(&brightness) && (0.0..=1.0).contains(&contrast)
            }
            AugOp::Sharpen { alpha_min, alpha_max, .. } => {
                (0.0..=1.0).contains(&alpha_min) && alpha_min <= alpha_max && alpha_max <= 1.0
            }
            AugOp::HorizontalFlip { .. } | AugOp::VerticalFlip { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid parameters for {}: {self:?}", self.name())))
        }
    }
}

/// Index selecting the random stream for one application of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub name: PolicyName,
    pub ops: Vec<AugOp>,
    pub seed: u64,
}

/// Knobs for the RF policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfParams {
    pub hflip_p: f64,
    pub max_rotation_deg: f64,
    pub vertical_flip: bool,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams {
            hflip_p: 0.5,
            max_rotation_deg: 15.0,
            vertical_flip: false,
        }
    }
}

impl AugmentationPolicy {
    pub fn none(seed: u64) -> Self {
        AugmentationPolicy {
            name: PolicyName::Na,
            ops: Vec::new(),
            seed,
        }
    }

    pub fn random_flip(seed: u64) -> Self {
        Self::random_flip_with(seed, RfParams::default())
    }

    pub fn random_flip_with(seed: u64, params: RfParams) -> Self {
        let mut ops = vec![AugOp::HorizontalFlip { p: params.hflip_p }];
        if params.vertical_flip {
            ops.push(AugOp::VerticalFlip { p: 0.5 });
        }
        if params.max_rotation_deg > 0.0 {
            ops.push(AugOp::Rotation {
                p: 1.0,
                max_deg: params.max_rotation_deg,
            });
        }
        AugmentationPolicy {
            name: PolicyName::Rf,
            ops,
            seed,
        }
    }

    /// The baseline photometric pipeline.
    pub fn legacy(seed: u64) -> Self {
        AugmentationPolicy {
            name: PolicyName::Legacy,
            ops: vec![
                AugOp::GaussianNoise {
                    p: 0.5,
                    sigma_min: 10.0,
                    sigma_max: 50.0,
                },
                AugOp::BrightnessContrast {
                    p: 0.5,
                    brightness: 0.2,
                    contrast: 0.2,
                },
                AugOp::Sharpen {
                    p: 0.5,
                    alpha_min: 0.2,
                    alpha_max: 0.5,
                },
            ],
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("augmentation policy: {e}")))?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            op.validate()?;
        }
        match self.name {
            PolicyName::Na if !self.ops.is_empty() => Err(Error::Config("NA policy must have no ops".into())),
            PolicyName::Rf => match self.ops.iter().find(|op| !op.is_geometric()) {
                Some(op) => Err(Error::Config(format!("RF policy may only hold geometric ops, found {}", op.name()))),
                None => Ok(()),
            },
            PolicyName::Legacy if self.ops.iter().all(AugOp::is_geometric) => {
                Err(Error::Config("LEGACY policy must hold photometric ops".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Applies `policy` to a 224×224 image using the random stream `draw`.
pub fn apply_policy(policy: &AugmentationPolicy, image: &RgbImage, draw: Draw) -> Result<RgbImage> {
    check_crop(image)?;
    policy.validate()?;
    if policy.ops.is_empty() {
        return Ok(image.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(draw.0);
    let mut out = image.clone();
    for op in &policy.ops {
        let fire = rng.random::<f64>() < op.probability();
        if !fire {
            continue;
        }
        out = match *op {
            AugOp::HorizontalFlip { .. } => hflip(&out),
            AugOp::VerticalFlip { .. } => imageops::flip_vertical(&out),
            AugOp::Rotation { max_deg, .. } => {
                let angle = if max_deg > 0.0 { rng.random_range(-max_deg..=max_deg) } else { 0.0 };
                rotate(&out, angle)
            }
            AugOp::GaussianNoise { sigma_min, sigma_max, .. } => {
                let sigma = if sigma_max > sigma_min { rng.random_range(sigma_min..=sigma_max) } else { sigma_min };
                gaussian_noise(&out, sigma, &mut rng)
            }
            AugOp::BrightnessContrast { brightness, contrast, .. } => {
                let beta = rng.random_range(-brightness..=brightness) * 255.0;
                let alpha = 1.0 + rng.random_range(-contrast..=contrast);
                map_pixels(&out, |v| alpha * v + beta)
            }
            AugOp::Sharpen { alpha_min, alpha_max, .. } => {
                let alpha = rng.random_range(alpha_min..=alpha_max);
                sharpen(&out, alpha)
            }
        };
    }
    Ok(out)
}

/// Mirrors columns: `x -> W - 1 - x`.
pub fn hflip(image: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(image)
}

/// Rotates counter-clockwise by `angle_deg` about the image center.
///
/// Multiples of 90° are exact index permutations. Other angles use bilinear
/// interpolation with reflect-101 padding.
pub fn rotate(image: &RgbImage, angle_deg: f64) -> RgbImage {
    let a = angle_deg.rem_euclid(360.0);
    let quarter = (a / 90.0).round();
    if (a - quarter * 90.0).abs() < 1e-9 {
        return match quarter as u32 % 4 {
            0 => image.clone(),
            // imageops rotations are clockwise
            1 => imageops::rotate270(image),
            2 => imageops::rotate180(image),
            _ => imageops::rotate90(image),
        };
    }
    let (w, h) = image.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = reflect(cx + cos * dx - sin * dy, w);
        let sy = reflect(cy + sin * dx + cos * dy, h);
        bilinear(image, sx, sy)
    })
}

fn reflect(mut c: f64, n: u32) -> f64 {
    let max = n as f64 - 1.0;
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    c = c.rem_euclid(period);
    if c > max {
        period - c
    } else {
        c
    }
}

fn bilinear(image: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = image.dimensions();
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p = |xx, yy| image.get_pixel(xx, yy).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
        let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
        out[ch] = clamp_u8(top * (1.0 - fy) + bottom * fy);
    }
    Rgb(out)
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(image: &RgbImage, f: impl Fn(f64) -> f64) -> RgbImage {
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for c in px.0.iter_mut() {
            *c = clamp_u8(f(*c as f64));
        }
    }
    out
}

fn gaussian_noise(image: &RgbImage, sigma: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let Ok(normal) = Normal::new(0.0, sigma) else {
        return image.clone();
    };
    let mut out = image.clone();
    for px in out.pixels_mut() {
        for c in px.0.iter_mut() {
            *c = clamp_u8(*c as f64 + normal.sample(rng));
        }
    }
    out
}

/// Blend of the image with its 4-neighbour Laplacian sharpening.
fn sharpen(image: &RgbImage, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let at = |x: i64, y: i64, c: usize| {
        image.get_pixel(x.clamp(0, w as i64 - 1) as u32, y.clamp(0, h as i64 - 1) as u32).0[c] as f64
    };
    RgbImage::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v = at(xi, yi, c);
            let sharp = 5.0 * v - at(xi - 1, yi, c) - at(xi + 1, yi, c) - at(xi, yi - 1, c) - at(xi, yi + 1, c);
            *o = clamp_u8((1.0 - alpha) * v + alpha * sharp);
        }
        Rgb(out)
    })
}
