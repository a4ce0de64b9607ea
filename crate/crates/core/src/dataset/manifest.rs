//! Dataset manifests: the on-disk listing of every sample.
//!
//! A manifest is a UTF-8 CSV with header
//! `image_path,label,split,source_video_id,frame_time_s,variant`
//! plus a `<name>.meta.json` sidecar holding the seed, ratios, split level,
//! class balance and (for masked variants) the mask geometry.
//!
//! Crops are discovered under `crops_root/{real,fake}/<video_id>/t<ms>.png`.
//! PNGs placed directly in a class directory count as single-frame videos.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::MaskRecord;
use super::{Label, SampleRecord, Split, Variant};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "deepguard-manifest-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLevel {
    #[default]
    Video,
    Image,
}

impl std::str::FromStr for SplitLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(SplitLevel::Video),
            "image" => Ok(SplitLevel::Image),
            other => Err(Error::Validation(format!("unknown split level `{other}` (expected video|image)"))),
        }
    }
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([0.6, 0.2, 0.2])
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios([train, val, test]);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Validation(format!("split ratios must be finite and non-negative: {:?}", self.0)));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` units; ties go to the earlier split.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let exact = self.0.map(|r| r * n as f64);
        let mut counts = exact.map(|e| e.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let assigned: usize = counts.iter().sum();
        for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

impl ClassCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Real => self.real += 1,
            Label::Fake => self.fake += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Balancing {
    pub counts: BTreeMap<Split, ClassCounts>,
    /// Train samples kept per class, once balanced.
    pub per_class: Option<usize>,
    pub seed: Option<u64>,
}

/// Sidecar metadata written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub format: String,
    pub seed: u64,
    pub split_ratios: SplitRatios,
    pub split_level: SplitLevel,
    pub balancing: Balancing,
    pub mask: Option<MaskRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
    pub split_ratios: SplitRatios,
    pub balancing: Balancing,
    pub seed: u64,
    pub split_level: SplitLevel,
    pub mask: Option<MaskRecord>,
}

fn count_classes(samples: &[SampleRecord]) -> BTreeMap<Split, ClassCounts> {
    let mut counts: BTreeMap<Split, ClassCounts> = Split::ALL.iter().map(|s| (*s, ClassCounts::default())).collect();
    for s in samples {
        counts.entry(s.split).or_default().bump(s.label);
    }
    counts
}

/// `foo/manifest.csv` -> `foo/manifest.meta.json`
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn counts(&self) -> BTreeMap<Split, ClassCounts> {
        count_classes(&self.samples)
    }

    /// The variant every train sample carries, or `None` if mixed or empty.
    pub fn train_variant(&self) -> Option<Variant> {
        let mut it = self.split(Split::Train).map(|s| s.variant);
        let first = it.next()?;
        it.all(|v| v == first).then_some(first)
    }

    pub fn meta(&self) -> ManifestMeta {
        ManifestMeta {
            format: MANIFEST_FORMAT.to_string(),
            seed: self.seed,
            split_ratios: self.split_ratios,
            split_level: self.split_level,
            balancing: self.balancing.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Checks that no `(label, source_video_id)` group spans two splits.
    pub fn check_video_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<(Label, &str), Split> = HashMap::new();
        for s in &self.samples {
            let key = (s.label, s.source_video_id.as_str());
            match seen.get(&key) {
                Some(prev) if *prev != s.split => {
                    return Err(Error::Integrity(format!(
                        "video {} appears in both {prev} and {}",
                        s.source_video_id, s.split
                    )))
                }
                _ => {
                    seen.insert(key, s.split);
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.samples {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<manifest>", e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Validation(format!("manifest is not UTF-8: {e}")))
    }

    pub fn from_parts(csv_text: &str, meta_json: &str) -> Result<Self> {
        let meta: ManifestMeta = serde_json::from_str(meta_json)?;
        if meta.format != MANIFEST_FORMAT {
            return Err(Error::Validation(format!("unsupported manifest format `{}`", meta.format)));
        }
        let mut r = csv::Reader::from_reader(csv_text.as_bytes());
        let samples = r.deserialize().collect::<std::result::Result<Vec<SampleRecord>, _>>()?;
        Ok(DatasetManifest {
            samples,
            split_ratios: meta.split_ratios,
            balancing: meta.balancing,
            seed: meta.seed,
            split_level: meta.split_level,
            mask: meta.mask,
        })
    }

    /// Writes the CSV and its `.meta.json` sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(csv_path, self.to_csv_string()?).map_err(|e| Error::io(csv_path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        let mp = meta_path(csv_path);
        std::fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let csv_text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mp = meta_path(csv_path);
        let meta = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        Self::from_parts(&csv_text, &meta)
    }
}

/// One crop found on disk before splitting.
#[derive(Debug, Clone)]
struct Crop {
    path: PathBuf,
    label: Label,
    video: String,
    time_s: f64,
}

fn frame_time_from_name(path: &Path) -> f64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix('t'))
        .and_then(|ms| ms.parse::<u64>().ok())
        .map(|ms| ms as f64 / 1000.0)
        .unwrap_or(0.0)
}

fn is_png(path: &Path) -> bool {
    path.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn scan_crops(crops_root: &Path) -> Result<Vec<Crop>> {
    let mut crops = Vec::new();
    let mut missing = Vec::new();
    for label in Label::ALL {
        let class_dir = crops_root.join(label.as_str());
        let before = crops.len();
        if class_dir.is_dir() {
            for entry in sorted_entries(&class_dir)? {
                if entry.is_dir() {
                    let video = entry.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    for frame in sorted_entries(&entry)?.into_iter().filter(|p| is_png(p)) {
                        crops.push(Crop {
                            time_s: frame_time_from_name(&frame),
                            path: frame,
                            label,
                            video: video.clone(),
                        });
                    }
                } else if is_png(&entry) {
                    crops.push(Crop {
                        video: entry.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                        path: entry,
                        label,
                        time_s: 0.0,
                    });
                }
            }
        }
        if crops.len() == before {
            missing.push(label.as_str());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "no crops found for class(es) {} under {}",
            missing.join(", "),
            crops_root.display()
        )));
    }
    Ok(crops)
}

/// Splits the crops under `crops_root` into train/val/test.
///
/// Units (videos or single images) are shuffled per class, interleaved so
/// every prefix holds the classes in proportion, then cut at the
/// largest-remainder split sizes. Deterministic for a fixed seed.
pub fn build_manifest(
    crops_root: &Path,
    ratios: SplitRatios,
    seed: u64,
    split_level: SplitLevel,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    let crops = scan_crops(crops_root)?;

    // unit key -> crop indices, in discovery order
    let mut units: BTreeMap<(Label, String), Vec<usize>> = BTreeMap::new();
    for (i, c) in crops.iter().enumerate() {
        let key = match split_level {
            SplitLevel::Video => (c.label, c.video.clone()),
            SplitLevel::Image => (c.label, c.path.to_string_lossy().into_owned()),
        };
        units.entry(key).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered: Vec<(f64, usize, Vec<usize>)> = Vec::new();
    for label in Label::ALL {
        let mut class_units: Vec<Vec<usize>> = units
            .iter()
            .filter(|((l, _), _)| *l == label)
            .map(|(_, v)| v.clone())
            .collect();
        class_units.shuffle(&mut rng);
        let n = class_units.len() as f64;
        for (i, u) in class_units.into_iter().enumerate() {
            ordered.push(((i as f64 + 0.5) / n, label.index(), u));
        }
    }
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let [n_train, n_val, _] = ratios.apportion(ordered.len());
    let mut samples = Vec::with_capacity(crops.len());
    for (pos, (_, _, members)) in ordered.into_iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        for i in members {
            let c = &crops[i];
            samples.push(SampleRecord {
                image_path: c.path.clone(),
                label: c.label,
                split,
                source_video_id: c.video.clone(),
                frame_time_s: c.time_s,
                variant: Variant::Original,
            });
        }
    }
    samples.sort_by(|a, b| a.image_path.cmp(&b.image_path));

    Ok(DatasetManifest {
        balancing: Balancing {
            counts: count_classes(&samples),
            per_class: None,
            seed: None,
        },
        samples,
        split_ratios: ratios,
        seed,
        split_level,
        mask: None,
    })
}

/// Subsamples the train split to exactly `per_class` samples of each class.
/// Val and test are left untouched.
pub fn balance_train_split(manifest: &DatasetManifest, per_class: usize, seed: u64) -> Result<DatasetManifest> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        if s.split == Split::Train {
            by_class.entry(s.label).or_default().push(i);
        }
    }
    let short: Vec<String> = Label::ALL
        .iter()
        .map(|l| (l, by_class.get(l).map_or(0, Vec::len)))
        .filter(|(_, n)| *n < per_class)
        .map(|(l, n)| format!("{l}: {n} available"))
        .collect();
    if !short.is_empty() {
        let all: Vec<String> = Label::ALL
            .iter()
            .map(|l| format!("{l}={}", by_class.get(l).map_or(0, Vec::len)))
            .collect();
        return Err(Error::Validation(format!(
            "cannot balance train split to {per_class} per class ({}); counts: {}",
            short.join("; "),
            all.join(", ")
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: BTreeSet<usize> = BTreeSet::new();
    for label in Label::ALL {
        let idx = &by_class[&label];
        if idx.len() == per_class {
            keep.extend(idx.iter().copied());
        } else {
            keep.extend(index::sample(&mut rng, idx.len(), per_class).into_iter().map(|j| idx[j]));
        }
    }
    let samples: Vec<SampleRecord> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| s.split != Split::Train || keep.contains(i))
        .map(|(_, s)| s.clone())
        .collect();
    Ok(DatasetManifest {
        balancing: Balancing {
            counts: count_classes(&samples),
            per_class: Some(per_class),
            seed: Some(seed),
        },
        samples,
        ..manifest.clone()
    })
}
