//! Raw videos to balanced, split, face-cropped image datasets.
//!
//! The pipeline runs in four steps, each usable on its own:
//!
//! 1. [`video::extract_frames`] samples frames at `t = k / rate`.
//! 2. [`face::detect_and_crop_face`] turns a frame into a 224×224 crop.
//! 3. [`manifest::build_manifest`] splits the crops by video or by image,
//!    and [`manifest::balance_train_split`] equalizes the train classes.
//! 4. [`mask::materialize_variant`] writes the masked-eye copy of the train
//!    split used by the pretraining stage.

pub mod extract;
pub mod face;
pub mod manifest;
pub mod mask;
pub mod video;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use extract::{crop_file_name, discover_videos, extract_all, extract_video, VideoSummary};
pub use face::{detect_and_crop_face, CenterCropDetector, FaceCrop, FaceDetector, FaceRegion, SkinToneDetector};
pub use manifest::{balance_train_split, build_manifest, ClassCounts, DatasetManifest, ManifestMeta, SplitLevel, SplitRatios};
pub use mask::{mask_eyes, materialize_variant, EyeLandmarks, EyeMaskParams, EyeMaskSpec, LandmarkIndex, MaskRecord, Rect, RegionSource};
pub use video::{extract_frames, frame_timestamps, FfmpegDecoder, GifDecoder, VideoDecoder, VideoRecord};

/// Side length of every face crop fed to the model.
pub const CROP_SIZE: u32 = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    /// Binary target with fake as the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::Validation(format!("unknown label `{other}` (expected real|fake)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}` (expected train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    MaskedEye,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::MaskedEye => "masked_eye",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "masked_eye" => Ok(Variant::MaskedEye),
            other => Err(Error::Validation(format!(
                "unknown variant `{other}` (expected original|masked_eye)"
            ))),
        }
    }
}

/// One face crop on disk and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub source_video_id: String,
    pub frame_time_s: f64,
    pub variant: Variant,
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Loads a stored crop and checks the 224×224×3 contract.
pub fn load_crop(path: &Path) -> Result<RgbImage> {
    let img = load_rgb(path)?;
    check_crop(&img)?;
    Ok(img)
}

pub fn check_crop(img: &RgbImage) -> Result<()> {
    if img.dimensions() != (CROP_SIZE, CROP_SIZE) {
        return Err(Error::Shape {
            expected: format!("{CROP_SIZE}x{CROP_SIZE}x3 image"),
            got: format!("{}x{}x3 image", img.width(), img.height()),
        });
    }
    Ok(())
}

/// Saves as lossless 8-bit PNG, creating parent directories.
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
