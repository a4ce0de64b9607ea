//! Synthetic eye occlusion for the masked-eye pretraining dataset.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::{check_crop, load_crop, save_png, Split, Variant, CROP_SIZE};
use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle, `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    fn in_frame(&self, size: u32) -> bool {
        self.x.checked_add(self.w).is_some_and(|r| r <= size) && self.y.checked_add(self.h).is_some_and(|b| b <= size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    #[default]
    Landmarks,
    FixedBand,
}

/// Concrete mask for one crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeMaskSpec {
    pub region_source: RegionSource,
    pub boxes: Vec<Rect>,
    pub margin_px: u32,
    pub fill: [u8; 3],
}

impl EyeMaskSpec {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if !b.in_frame(CROP_SIZE) {
                return Err(Error::Validation(format!(
                    "mask box {b:?} lies outside the {CROP_SIZE}x{CROP_SIZE} frame"
                )));
            }
        }
        Ok(())
    }

    /// Boxes grown by `margin_px` and clipped to the frame, as `(x0, y0, x1, y1)` with exclusive ends.
    pub fn dilated_boxes(&self) -> Vec<(u32, u32, u32, u32)> {
        let m = self.margin_px;
        self.boxes
            .iter()
            .filter(|b| b.w > 0 && b.h > 0)
            .map(|b| {
                (
                    b.x.saturating_sub(m),
                    b.y.saturating_sub(m),
                    (b.x + b.w).saturating_add(m).min(CROP_SIZE),
                    (b.y + b.h).saturating_add(m).min(CROP_SIZE),
                )
            })
            .filter(|(x0, y0, x1, y1)| x0 < x1 && y0 < y1)
            .collect()
    }

    /// Per-pixel membership in the dilated union, row-major over the 224×224 frame.
    pub fn coverage(&self) -> Vec<bool> {
        let n = CROP_SIZE as usize;
        let mut covered = vec![false; n * n];
        for (x0, y0, x1, y1) in self.dilated_boxes() {
            for y in y0..y1 {
                let row = y as usize * n;
                covered[row + x0 as usize..row + x1 as usize].fill(true);
            }
        }
        covered
    }
}

/// Eye centers in crop pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeLandmarks {
    pub left: (f32, f32),
    pub right: (f32, f32),
}

/// How mask geometry is derived for each crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EyeMaskParams {
    pub region_source: RegionSource,
    /// Side of each per-eye square as a fraction of the crop width.
    pub box_side_frac: f64,
    /// Fallback band, as fractions of the crop height `[top, bottom)`.
    pub band_rows: (f64, f64),
    pub margin_px: u32,
    pub fill: [u8; 3],
}

impl Default for EyeMaskParams {
    fn default() -> Self {
        EyeMaskParams {
            region_source: RegionSource::Landmarks,
            box_side_frac: 0.25,
            band_rows: (0.34, 0.52),
            margin_px: 4,
            fill: [0, 0, 0],
        }
    }
}

impl EyeMaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.box_side_frac > 0.0 && self.box_side_frac <= 1.0) {
            return Err(Error::Validation(format!("box_side_frac must be in (0, 1], got {}", self.box_side_frac)));
        }
        let (t, b) = self.band_rows;
        if !(0.0..1.0).contains(&t) || !(t < b && b <= 1.0) {
            return Err(Error::Validation(format!("band_rows must satisfy 0 <= top < bottom <= 1, got {:?}", self.band_rows)));
        }
        Ok(())
    }

    pub fn fixed_band(&self) -> EyeMaskSpec {
        let size = CROP_SIZE as f64;
        let top = (self.band_rows.0 * size).round() as u32;
        let bottom = ((self.band_rows.1 * size).round() as u32).min(CROP_SIZE);
        EyeMaskSpec {
            region_source: RegionSource::FixedBand,
            boxes: vec![Rect::new(0, top, CROP_SIZE, bottom - top)],
            margin_px: self.margin_px,
            fill: self.fill,
        }
    }

    /// Builds the mask for one crop. The flag is true when landmarks were
    /// requested but unusable and the fixed band was used instead.
    pub fn spec_for(&self, eyes: Option<&EyeLandmarks>) -> (EyeMaskSpec, bool) {
        match (self.region_source, eyes) {
            (RegionSource::FixedBand, _) => (self.fixed_band(), false),
            (RegionSource::Landmarks, Some(e)) => match self.eye_boxes(e) {
                Some(boxes) => (
                    EyeMaskSpec {
                        region_source: RegionSource::Landmarks,
                        boxes,
                        margin_px: self.margin_px,
                        fill: self.fill,
                    },
                    false,
                ),
                None => (self.fixed_band(), true),
            },
            (RegionSource::Landmarks, None) => (self.fixed_band(), true),
        }
    }

    fn eye_boxes(&self, eyes: &EyeLandmarks) -> Option<Vec<Rect>> {
        let size = CROP_SIZE as f32;
        let side = ((self.box_side_frac * CROP_SIZE as f64).round() as u32).clamp(1, CROP_SIZE);
        [eyes.left, eyes.right]
            .into_iter()
            .map(|(cx, cy)| {
                if !(cx.is_finite() && cy.is_finite()) || cx < 0.0 || cy < 0.0 || cx >= size || cy >= size {
                    return None;
                }
                // shift inward so the whole square stays in frame
                let max_origin = (CROP_SIZE - side) as f32;
                let x = (cx - side as f32 / 2.0).round().clamp(0.0, max_origin) as u32;
                let y = (cy - side as f32 / 2.0).round().clamp(0.0, max_origin) as u32;
                Some(Rect::new(x, y, side, side))
            })
            .collect()
    }
}

/// Paints the dilated box union with `spec.fill`; every other pixel is copied unchanged.
pub fn mask_eyes(crop: &RgbImage, spec: &EyeMaskSpec) -> Result<RgbImage> {
    check_crop(crop)?;
    spec.validate()?;
    let mut out = crop.clone();
    let fill = Rgb(spec.fill);
    for (x0, y0, x1, y1) in spec.dilated_boxes() {
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x, y, fill);
            }
        }
    }
    Ok(out)
}

/// Eye landmarks per crop, persisted as `landmarks.csv` in the crop root.
///
/// Entries are keyed by the crop-root-relative `<label>/<video>/<file>`, so
/// lookups succeed whether the crop root was given as a relative or an
/// absolute path, and the crop tree can be moved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkIndex {
    entries: HashMap<PathBuf, EyeLandmarks>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkRow {
    image_path: PathBuf,
    left_x: f32,
    left_y: f32,
    right_x: f32,
    right_y: f32,
}

impl LandmarkIndex {
    pub const FILE_NAME: &'static str = "landmarks.csv";

    fn key(path: &Path) -> PathBuf {
        let parts: Vec<_> = path.components().collect();
        parts[parts.len().saturating_sub(3)..].iter().collect()
    }

    pub fn insert(&mut self, path: PathBuf, eyes: EyeLandmarks) {
        self.entries.insert(Self::key(&path), eyes);
    }

    pub fn get(&self, path: &Path) -> Option<&EyeLandmarks> {
        self.entries.get(&Self::key(path))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<_> = self.entries.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
        for (p, e) in rows {
            w.serialize(LandmarkRow {
                image_path: p.clone(),
                left_x: e.left.0,
                left_y: e.left.1,
                right_x: e.right.0,
                right_y: e.right.1,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads the index; a missing file yields an empty index.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut idx = Self::default();
        for row in r.deserialize::<LandmarkRow>() {
            let row = row?;
            idx.insert(
                row.image_path,
                EyeLandmarks {
                    left: (row.left_x, row.left_y),
                    right: (row.right_x, row.right_y),
                },
            );
        }
        Ok(idx)
    }
}

/// Provenance of a materialized masked variant, kept in the manifest sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub params: EyeMaskParams,
    pub output_dir: PathBuf,
    /// Samples that fell back to the fixed band for lack of landmarks.
    pub fallbacks: Vec<PathBuf>,
}

/// Writes a masked copy of every train sample under `out_dir` and returns
/// the manifest pointing the train split at those copies.
pub fn materialize_variant(
    manifest: &DatasetManifest,
    variant: Variant,
    params: &EyeMaskParams,
    landmarks: &LandmarkIndex,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if variant != Variant::MaskedEye {
        return Err(Error::Validation(format!("cannot materialize variant `{variant}`")));
    }
    params.validate()?;
    let missing: Vec<PathBuf> = manifest
        .split(Split::Train)
        .filter(|s| !s.image_path.exists())
        .map(|s| s.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }

    let mut fallbacks = Vec::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        if s.split != Split::Train {
            samples.push(s.clone());
            continue;
        }
        if s.variant != Variant::Original {
            return Err(Error::Validation(format!(
                "{} is already a {} sample",
                s.image_path.display(),
                s.variant
            )));
        }
        let crop = load_crop(&s.image_path)?;
        let (spec, fell_back) = params.spec_for(landmarks.get(&s.image_path));
        if fell_back {
            fallbacks.push(s.image_path.clone());
        }
        let masked = mask_eyes(&crop, &spec)?;
        let file_name = s.image_path.file_name().unwrap_or_default();
        let dest = out_dir.join(s.label.as_str()).join(&s.source_video_id).join(file_name);
        save_png(&masked, &dest)?;
        let mut rec = s.clone();
        rec.image_path = dest;
        rec.variant = Variant::MaskedEye;
        samples.push(rec);
    }
    if !fallbacks.is_empty() {
        log::warn!("{} samples had no usable eye landmarks; fixed band used", fallbacks.len());
    }
    Ok(DatasetManifest {
        samples,
        mask: Some(MaskRecord {
            params: params.clone(),
            output_dir: out_dir.to_path_buf(),
            fallbacks,
        }),
        ..manifest.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::manifest::{Balancing, SplitLevel, SplitRatios};
    use crate::dataset::{Label, SampleRecord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(224, 224, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn spec(boxes: Vec<Rect>, margin_px: u32, fill: [u8; 3]) -> EyeMaskSpec {
        EyeMaskSpec {
            region_source: RegionSource::Landmarks,
            boxes,
            margin_px,
            fill,
        }
    }

    #[test]
    fn single_black_box() {
        let img = noise_image(1);
        let s = spec(vec![Rect::new(50, 60, 30, 20)], 0, [0, 0, 0]);
        let out = mask_eyes(&img, &s).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            let inside = (50..80).contains(&x) && (60..80).contains(&y);
            if inside {
                assert_eq!(px.0, [0, 0, 0]);
            } else {
                assert_eq!(px, img.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn empty_box_list_is_identity() {
        let img = noise_image(2);
        assert_eq!(mask_eyes(&img, &spec(vec![], 4, [9, 9, 9])).unwrap(), img);
    }

    #[test]
    fn overlapping_boxes_mask_exact_union() {
        let img = RgbImage::from_pixel(224, 224, Rgb([200, 100, 50]));
        let s = spec(vec![Rect::new(10, 10, 40, 40), Rect::new(30, 30, 40, 40)], 2, [1, 2, 3]);
        let out = mask_eyes(&img, &s).unwrap();
        // union of [8,52)x[8,52) and [28,72)x[28,72)
        let in_a = |x: u32, y: u32| (8..52).contains(&x) && (8..52).contains(&y);
        let in_b = |x: u32, y: u32| (28..72).contains(&x) && (28..72).contains(&y);
        let mut masked = 0;
        for (x, y, px) in out.enumerate_pixels() {
            let want_masked = in_a(x, y) || in_b(x, y);
            assert_eq!(px.0 == [1, 2, 3], want_masked, "({x},{y})");
            masked += usize::from(want_masked);
        }
        assert_eq!(masked, 44 * 44 * 2 - 24 * 24);
    }

    #[test]
    fn out_of_bounds_box_is_named() {
        let img = noise_image(3);
        let err = mask_eyes(&img, &spec(vec![Rect::new(200, 10, 30, 10)], 0, [0, 0, 0])).unwrap_err();
        assert!(err.to_string().contains("x: 200"), "{err}");
    }

    #[test]
    fn default_geometry() {
        let p = EyeMaskParams::default();
        let eyes = EyeLandmarks {
            left: (70.0, 90.0),
            right: (154.0, 90.0),
        };
        let (s, fb) = p.spec_for(Some(&eyes));
        assert!(!fb);
        assert_eq!(s.boxes, vec![Rect::new(42, 62, 56, 56), Rect::new(126, 62, 56, 56)]);
        assert_eq!(s.margin_px, 4);
        let (band, fb) = p.spec_for(None);
        assert!(fb);
        assert_eq!(band.boxes, vec![Rect::new(0, 76, 224, 40)]);
        // landmarks near the border shift the square inside
        let (s, _) = p.spec_for(Some(&EyeLandmarks {
            left: (2.0, 2.0),
            right: (223.0, 223.0),
        }));
        assert_eq!(s.boxes, vec![Rect::new(0, 0, 56, 56), Rect::new(168, 168, 56, 56)]);
    }

    #[test]
    fn materialize_masks_train_only_with_fallback_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        let mut landmarks = LandmarkIndex::default();
        for (i, split) in [Split::Train, Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
            let p = dir.path().join(format!("crops/real/v{i}/t00000000.png"));
            save_png(&noise_image(i as u64), &p).unwrap();
            if i == 0 {
                landmarks.insert(p.clone(), EyeLandmarks { left: (70.0, 90.0), right: (154.0, 90.0) });
            }
            samples.push(SampleRecord {
                image_path: p,
                label: Label::Real,
                split,
                source_video_id: format!("v{i}"),
                frame_time_s: 0.0,
                variant: Variant::Original,
            });
        }
        let m = DatasetManifest {
            samples,
            split_ratios: SplitRatios::default(),
            balancing: Balancing::default(),
            seed: 0,
            split_level: SplitLevel::Video,
            mask: None,
        };
        let params = EyeMaskParams::default();
        let out = dir.path().join("masked");
        let mm = materialize_variant(&m, Variant::MaskedEye, &params, &landmarks, &out).unwrap();
        assert_eq!(mm.samples.len(), 4);
        for (a, b) in m.samples.iter().zip(&mm.samples) {
            if a.split == Split::Train {
                assert_eq!(b.variant, Variant::MaskedEye);
                assert!(b.image_path.starts_with(&out));
                assert_eq!((&a.source_video_id, a.frame_time_s, a.label), (&b.source_video_id, b.frame_time_s, b.label));
            } else {
                assert_eq!(a, b);
            }
        }
        let rec = mm.mask.as_ref().unwrap();
        assert_eq!(rec.fallbacks, vec![m.samples[1].image_path.clone()]);

        // mean over the masked region equals the fill value
        let img = load_crop(&mm.samples[0].image_path).unwrap();
        let (s, _) = params.spec_for(landmarks.get(&m.samples[0].image_path));
        let cov = s.coverage();
        let (mut sum, mut n) = (0u64, 0u64);
        for (i, px) in img.pixels().enumerate() {
            if cov[i] {
                sum += px.0.iter().map(|&c| c as u64).sum::<u64>();
                n += 3;
            }
        }
        assert_eq!(sum as f64 / n as f64, 0.0);

        // second run is bit-identical
        let out2 = dir.path().join("masked2");
        let mm2 = materialize_variant(&m, Variant::MaskedEye, &params, &landmarks, &out2).unwrap();
        for (a, b) in mm.split(Split::Train).zip(mm2.split(Split::Train)) {
            assert_eq!(std::fs::read(&a.image_path).unwrap(), std::fs::read(&b.image_path).unwrap());
        }
    }

    #[test]
    fn landmark_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut idx = LandmarkIndex::default();
        idx.insert(PathBuf::from("a/b.png"), EyeLandmarks { left: (1.5, 2.0), right: (3.0, 4.25) });
        let p = dir.path().join(LandmarkIndex::FILE_NAME);
        idx.write(&p).unwrap();
        assert_eq!(LandmarkIndex::read(&p).unwrap(), idx);
        assert!(LandmarkIndex::read(&dir.path().join("none.csv")).unwrap().is_empty());
    }

    #[test]
    fn landmark_lookup_ignores_how_the_crop_root_is_spelled() {
        let mut idx = LandmarkIndex::default();
        let eyes = EyeLandmarks { left: (70.0, 90.0), right: (150.0, 90.0) };
        idx.insert(PathBuf::from("/tmp/cache/crops/fake/v1/t00000500.png"), eyes);
        assert_eq!(idx.get(Path::new("cache/crops/fake/v1/t00000500.png")), Some(&eyes));
        assert_eq!(idx.get(Path::new("../moved/fake/v1/t00000500.png")), Some(&eyes));
        assert_eq!(idx.get(Path::new("cache/crops/real/v1/t00000500.png")), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn locality(seed in any::<u64>(), nboxes in 0usize..4, margin in 0u32..8) {
            let img = noise_image(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let boxes: Vec<Rect> = (0..nboxes).map(|_| {
                let w = rng.random_range(1..80);
                let h = rng.random_range(1..80);
                Rect::new(rng.random_range(0..=224 - w), rng.random_range(0..=224 - h), w, h)
            }).collect();
            let s = spec(boxes, margin, [7, 8, 9]);
            let out = mask_eyes(&img, &s).unwrap();
            let cov = s.coverage();
            for (i, (a, b)) in img.pixels().zip(out.pixels()).enumerate() {
                if cov[i] { prop_assert_eq!(b.0, [7, 8, 9]); } else { prop_assert_eq!(a, b); }
            }
        }
    }
}
