#![allow(dead_code)]

use std::path::Path;

use deepguard::dataset::manifest::{Balancing, SplitLevel, SplitRatios};
use deepguard::dataset::{save_png, DatasetManifest, Label, SampleRecord, Split, Variant};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class-distinctive 224×224 crop: real faces are bluish and smooth, fakes
/// are reddish with horizontal stripes. Per-image noise keeps samples distinct.
pub fn synthetic_crop(label: Label, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(224, 224, |x, y| {
        let n: i32 = rng.random_range(-20..=20);
        let base = match label {
            Label::Real => [70, 110, 180 - (x / 8) as i32],
            Label::Fake => {
                let stripe = if (y / 8) % 2 == 0 { 40 } else { 0 };
                [170 + stripe, 90, 70]
            }
        };
        Rgb(base.map(|v| (v + n).clamp(0, 255) as u8))
    })
}

/// Writes `per_class[split]` crops per class and returns the manifest.
pub fn synthetic_manifest(root: &Path, per_class: [usize; 3], seed: u64) -> DatasetManifest {
    let mut samples = Vec::new();
    let mut k = 0u64;
    for (split, n) in Split::ALL.iter().zip(per_class) {
        for label in Label::ALL {
            for i in 0..n {
                let video = format!("{split}_{label}_{i}");
                let path = root.join(label.as_str()).join(&video).join("t00000000.png");
                save_png(&synthetic_crop(label, seed.wrapping_mul(1000) + k), &path).unwrap();
                k += 1;
                samples.push(SampleRecord {
                    image_path: path,
                    label,
                    split: *split,
                    source_video_id: video,
                    frame_time_s: 0.0,
                    variant: Variant::Original,
                });
            }
        }
    }
    samples.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    DatasetManifest {
        samples,
        split_ratios: SplitRatios::default(),
        balancing: Balancing::default(),
        seed,
        split_level: SplitLevel::Video,
        mask: None,
    }
}

pub mod planted;
