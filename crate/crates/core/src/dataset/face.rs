//! Face localization and cropping.
//!
//! Detection sits behind [`FaceDetector`] so a real detector can be dropped
//! in. Two are shipped: [`CenterCropDetector`] (passthrough, for tests and
//! pre-cropped footage) and [`SkinToneDetector`], a chroma-threshold blob
//! finder that needs no model weights.

use image::imageops::{self, FilterType};
use image::RgbImage;

use super::mask::EyeLandmarks;
use super::CROP_SIZE;
use crate::error::Result;

/// Context added around the detected box before cropping, as a fraction of its side.
const CROP_CONTEXT: f32 = 0.2;

/// A detected face: bounding box plus five landmarks
/// (left eye, right eye, nose, left mouth corner, right mouth corner).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceRegion {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub landmarks: [(f32, f32); 5],
}

impl FaceRegion {
    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Box with landmarks placed at canonical frontal-face proportions.
    pub fn with_canonical_landmarks(x: f32, y: f32, w: f32, h: f32) -> Self {
        let at = |fx: f32, fy: f32| (x + fx * w, y + fy * h);
        FaceRegion {
            x,
            y,
            w,
            h,
            landmarks: [at(0.32, 0.40), at(0.68, 0.40), at(0.5, 0.58), at(0.37, 0.76), at(0.63, 0.76)],
        }
    }
}

pub trait FaceDetector {
    fn detect(&self, frame: &RgbImage) -> Vec<FaceRegion>;
}

/// Treats the largest centered square of the frame as the face.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenterCropDetector;

impl FaceDetector for CenterCropDetector {
    fn detect(&self, frame: &RgbImage) -> Vec<FaceRegion> {
        let (w, h) = frame.dimensions();
        if w == 0 || h == 0 {
            return Vec::new();
        }
        let side = w.min(h) as f32;
        let x = (w as f32 - side) / 2.0;
        let y = (h as f32 - side) / 2.0;
        vec![FaceRegion::with_canonical_landmarks(x, y, side, side)]
    }
}

/// Finds connected regions of skin chroma (YCbCr thresholds) and reports
/// each sufficiently large one as a face.
#[derive(Debug, Clone, Copy)]
pub struct SkinToneDetector {
    /// Smallest blob kept, as a fraction of the frame area.
    pub min_area_frac: f32,
}

impl Default for SkinToneDetector {
    fn default() -> Self {
        SkinToneDetector { min_area_frac: 0.005 }
    }
}

fn is_skin(px: &image::Rgb<u8>) -> bool {
    let [r, g, b] = px.0.map(f32::from);
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (77.0..=127.0).contains(&cb) && (133.0..=173.0).contains(&cr)
}

impl FaceDetector for SkinToneDetector {
    fn detect(&self, frame: &RgbImage) -> Vec<FaceRegion> {
        let (w, h) = frame.dimensions();
        let (wu, hu) = (w as usize, h as usize);
        let mask: Vec<bool> = frame.pixels().map(is_skin).collect();
        let mut seen = vec![false; mask.len()];
        let min_area = (self.min_area_frac * (wu * hu) as f32).max(1.0) as usize;
        let mut faces = Vec::new();
        let mut stack = Vec::new();
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let mut count = 0usize;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % wu, i / wu);
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let mut visit = |j: usize| {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < wu {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - wu);
                }
                if y + 1 < hu {
                    visit(i + wu);
                }
            }
            if count >= min_area {
                faces.push(FaceRegion::with_canonical_landmarks(
                    x0 as f32,
                    y0 as f32,
                    (x1 - x0 + 1) as f32,
                    (y1 - y0 + 1) as f32,
                ));
            }
        }
        faces
    }
}

/// A 224×224 face crop with its eye landmarks in crop coordinates.
#[derive(Debug, Clone)]
pub struct FaceCrop {
    pub image: RgbImage,
    pub eyes: EyeLandmarks,
    pub source: FaceRegion,
}

/// Crops the largest detected face to a square 224×224 image, or `None`
/// when the detector finds nothing.
pub fn detect_and_crop_face(frame: &RgbImage, detector: &dyn FaceDetector) -> Result<Option<FaceCrop>> {
    let faces = detector.detect(frame);
    let Some(face) = faces
        .into_iter()
        .max_by(|a, b| a.area().total_cmp(&b.area()))
    else {
        return Ok(None);
    };
    let side = (face.w.max(face.h) * (1.0 + CROP_CONTEXT)).max(1.0);
    let cx = face.x + face.w / 2.0;
    let cy = face.y + face.h / 2.0;
    let x0 = (cx - side / 2.0).round() as i64;
    let y0 = (cy - side / 2.0).round() as i64;
    let side_px = side.round().max(1.0) as u32;

    // square window with edge replication where it leaves the frame
    let (fw, fh) = frame.dimensions();
    let window = RgbImage::from_fn(side_px, side_px, |x, y| {
        let sx = (x0 + x as i64).clamp(0, fw as i64 - 1) as u32;
        let sy = (y0 + y as i64).clamp(0, fh as i64 - 1) as u32;
        *frame.get_pixel(sx, sy)
    });
    let image = if side_px == CROP_SIZE {
        window
    } else {
        imageops::resize(&window, CROP_SIZE, CROP_SIZE, FilterType::Triangle)
    };
    let scale = CROP_SIZE as f32 / side_px as f32;
    let to_crop = |(lx, ly): (f32, f32)| ((lx - x0 as f32) * scale, (ly - y0 as f32) * scale);
    let eyes = EyeLandmarks {
        left: to_crop(face.landmarks[0]),
        right: to_crop(face.landmarks[1]),
    };
    Ok(Some(FaceCrop {
        image,
        eyes,
        source: face,
    }))
}
