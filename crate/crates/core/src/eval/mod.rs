//! Frame-level metrics: confusion matrix, accuracy, per-class and macro F1,
//! and AuROC with fake as the positive class.

pub mod ablation;

use std::path::PathBuf;

use candle_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_crop, DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::train::{total_loss, LossWeights};

/// 2×2 counts indexed by `[true class][predicted class]`, real = 0, fake = 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    /// Builds the matrix from per-class totals and error counts.
    pub fn from_errors(n_real: u64, real_wrong: u64, n_fake: u64, fake_wrong: u64) -> Self {
        ConfusionMatrix {
            counts: [[n_real - real_wrong, real_wrong], [fake_wrong, n_fake - fake_wrong]],
        }
    }

    pub fn get(&self, truth: Label, predicted: Label) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Off-diagonal share of the row for `truth`; 0 for an empty row.
    pub fn misclassification_rate(&self, truth: Label) -> f64 {
        let row = self.counts[truth.index()];
        let n = row[0] + row[1];
        if n == 0 {
            0.0
        } else {
            row[truth.other().index()] as f64 / n as f64
        }
    }

    /// F1 with `class` as positive; 0 when it has no true positives.
    pub fn f1(&self, class: Label) -> f64 {
        let c = class.index();
        let o = class.other().index();
        let tp = self.counts[c][c];
        if tp == 0 {
            return 0.0;
        }
        let fp = self.counts[o][c];
        let fn_ = self.counts[c][o];
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Validation("confusion matrix needs at least one sample".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predictions.iter().zip(labels) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub f1_macro: f64,
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix is empty".into()));
    }
    let f1_fake = cm.f1(Label::Fake);
    let f1_real = cm.f1(Label::Real);
    Ok(ClassMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        f1_fake,
        f1_real,
        f1_macro: (f1_fake + f1_real) / 2.0,
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic, ties counted half.
///
/// Sort-based: tied scores share their average rank. Ranks are kept doubled
/// so the rank sum is an exact integer.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| **l == Label::Fake).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AuROC needs both real and fake samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank2_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end; doubled average = start + 1 + end
        let rank2 = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == Label::Fake).count() as u64;
        rank2_sum += rank2 * pos_in_group;
        start = end;
    }
    let u2 = rank2_sum - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Everything reported for one (model, split) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub f1_macro: f64,
    /// `None` when the split holds a single class.
    pub auroc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub split: Split,
    pub model_id: String,
    pub config_hash: String,
    pub threshold: f64,
    pub samples: usize,
}

impl MetricsReport {
    pub fn from_scores(
        probs: &[f64],
        labels: &[Label],
        threshold: f64,
        split: Split,
        model_id: &str,
        config_hash: &str,
    ) -> Result<Self> {
        let preds: Vec<Label> = probs.iter().map(|&p| if p >= threshold { Label::Fake } else { Label::Real }).collect();
        let cm = confusion(&preds, labels)?;
        let m = metrics_from_confusion(&cm)?;
        let auroc = match auroc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            accuracy: m.accuracy,
            f1_fake: m.f1_fake,
            f1_real: m.f1_real,
            f1_macro: m.f1_macro,
            auroc,
            confusion: cm,
            split,
            model_id: model_id.to_string(),
            config_hash: config_hash.to_string(),
            threshold,
            samples: labels.len(),
        })
    }
}

/// Model outputs over a list of images.
#[derive(Debug, Clone)]
pub struct Scored {
    /// p(fake) per image.
    pub probs: Vec<f64>,
    /// Sample-weighted mean losses; zero when no weights were given.
    pub loss_cls: f64,
    pub loss_recon: f64,
}

/// Runs inference in batches. Losses are computed when `weights` is given.
pub fn score_images(
    model: &ModelBundle,
    images: &[&RgbImage],
    labels: &[Label],
    weights: Option<&LossWeights>,
    batch_size: usize,
) -> Result<Scored> {
    let mut probs = Vec::with_capacity(images.len());
    let (mut cls, mut rec) = (0.0, 0.0);
    for (imgs, labs) in images.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let x = model.images_to_tensor(imgs)?;
        let out = model.forward(&x)?;
        if let Some(w) = weights {
            let parts = total_loss(&out, &x, labs, w)?;
            cls += parts.classification_value()? * imgs.len() as f64;
            rec += parts.reconstruction_value()? * imgs.len() as f64;
        }
        probs.extend(sigmoid_vec(&out.logits)?);
    }
    let n = images.len().max(1) as f64;
    Ok(Scored {
        probs,
        loss_cls: cls / n,
        loss_recon: rec / n,
    })
}

pub(crate) fn sigmoid_vec(logits: &Tensor) -> Result<Vec<f64>> {
    Ok(logits
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|z| 1.0 / (1.0 + (-z).exp()))
        .collect())
}

/// Loads every image of `split`, reporting all missing files at once.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<(Vec<RgbImage>, Vec<Label>)> {
    let samples: Vec<_> = manifest.split(split).collect();
    let missing: Vec<PathBuf> = samples
        .iter()
        .filter(|s| !s.image_path.exists())
        .map(|s| s.image_path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let images = samples.iter().map(|s| load_crop(&s.image_path)).collect::<Result<Vec<_>>>()?;
    Ok((images, samples.iter().map(|s| s.label).collect()))
}

pub const EVAL_BATCH: usize = 16;

/// Scores `split` without augmentation and thresholds p(fake) at `threshold`.
pub fn evaluate(model: &ModelBundle, manifest: &DatasetManifest, split: Split, threshold: f64) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (images, labels) = load_split(manifest, split)?;
    if images.is_empty() {
        return Err(Error::EmptyInput(format!("split {split} has no samples")));
    }
    let refs: Vec<&RgbImage> = images.iter().collect();
    let scored = score_images(model, &refs, &labels, None, EVAL_BATCH)?;
    let hash = model.config.config_hash();
    let model_id = model.param_hash()?;
    MetricsReport::from_scores(&scored.probs, &labels, threshold, split, &model_id[..16], &hash)
}
