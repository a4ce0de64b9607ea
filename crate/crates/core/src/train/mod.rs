//! Optimization loop, staged curriculum and checkpoints.
//!
//! The objective is a class-weighted binary cross-entropy on the head's logit
//! plus `lambda_recon` times the autoencoder's mean squared reconstruction
//! error. A curriculum runs stages in order; a stage may start from the best
//! checkpoint of the one before it, and that hand-off is verified by hash.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_FORMAT};
pub use optim::{Adam, AdamHyper, AdamState};

use crate::augment::{apply_policy, AugmentationPolicy, Draw};
use crate::dataset::{DatasetManifest, Label, Split, Variant};
use crate::error::{Error, Result};
use crate::eval::{load_split, metrics_from_confusion, confusion, score_images, auroc, EVAL_BATCH};
use crate::model::{ForwardOutput, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_fake: f64,
    pub w_real: f64,
    pub lambda_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_fake: 1.85,
            w_real: 1.0,
            lambda_recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn unweighted() -> Self {
        LossWeights {
            w_fake: 1.0,
            w_real: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_fake", self.w_fake), ("w_real", self.w_real)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and positive, got {w}")));
            }
        }
        if !(self.lambda_recon.is_finite() && self.lambda_recon >= 0.0) {
            return Err(Error::Validation(format!(
                "lambda_recon must be finite and non-negative, got {}",
                self.lambda_recon
            )));
        }
        Ok(())
    }

    pub fn class_weight(&self, label: Label) -> f64 {
        match label {
            Label::Fake => self.w_fake,
            Label::Real => self.w_real,
        }
    }
}

/// `Σ c(y)·BCE / Σ c(y)` with `c(fake) = w_fake`, `c(real) = w_real`.
///
/// Per-sample BCE uses the stable form `max(z, 0) - z·y + ln(1 + e^{-|z|})`.
pub fn weighted_bce(logits: &Tensor, labels: &[Label], weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    if logits.dims() != [labels.len()] {
        return Err(Error::Shape {
            expected: format!("({},) logits", labels.len()),
            got: format!("{:?}", logits.dims()),
        });
    }
    let check = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = check.iter().position(|z| !z.is_finite()) {
        return Err(Error::Integrity(format!("logit {i} is not finite ({})", check[i])));
    }
    let dev = logits.device();
    let dtype = logits.dtype();
    let y = Tensor::from_vec(labels.iter().map(|l| l.target()).collect::<Vec<_>>(), labels.len(), dev)?.to_dtype(dtype)?;
    let c_vals: Vec<f64> = labels.iter().map(|l| weights.class_weight(*l)).collect();
    let c_sum: f64 = c_vals.iter().sum();
    let c = Tensor::from_vec(c_vals, labels.len(), dev)?.to_dtype(dtype)?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_sample = ((logits.relu()? - (logits * &y)?)? + softplus)?;
    Ok(((per_sample * c)?.sum_all()? / c_sum)?)
}

/// The two objective terms and their combination.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub classification: Tensor,
    pub reconstruction: Tensor,
}

impl LossParts {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    pub fn classification_value(&self) -> Result<f64> {
        scalar(&self.classification)
    }

    pub fn reconstruction_value(&self) -> Result<f64> {
        scalar(&self.reconstruction)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `weighted_bce + lambda_recon · mean((reconstruction - images)²)`.
pub fn total_loss(out: &ForwardOutput, images: &Tensor, labels: &[Label], weights: &LossWeights) -> Result<LossParts> {
    if out.reconstruction.dims() != images.dims() {
        return Err(Error::Shape {
            expected: format!("reconstruction {:?}", images.dims()),
            got: format!("{:?}", out.reconstruction.dims()),
        });
    }
    let classification = weighted_bce(&out.logits, labels, weights)?;
    let reconstruction = (&out.reconstruction - images)?.sqr()?.mean_all()?;
    let total = if weights.lambda_recon == 0.0 {
        classification.clone()
    } else {
        (&classification + (&reconstruction * weights.lambda_recon)?)?
    };
    Ok(LossParts {
        total,
        classification,
        reconstruction,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFrom {
    Scratch,
    PreviousStage,
    Checkpoint(PathBuf),
}

impl std::fmt::Display for InitFrom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitFrom::Scratch => f.write_str("scratch"),
            InitFrom::PreviousStage => f.write_str("previous_stage"),
            InitFrom::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub dataset_variant: Variant,
    pub policy: AugmentationPolicy,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub init_from: InitFrom,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Validation("stage name is empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation(format!("stage `{}`: epochs must be at least 1", self.name)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "stage `{}`: learning rate must be positive, got {}",
                self.name, self.learning_rate
            )));
        }
        self.weights.validate()?;
        self.policy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub stages: Vec<StageConfig>,
    pub global_seed: u64,
}

impl CurriculumPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Validation("curriculum has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if i == 0 && s.init_from == InitFrom::PreviousStage {
                return Err(Error::Validation(format!(
                    "first stage `{}` cannot start from a previous stage",
                    s.name
                )));
            }
            if self.stages[..i].iter().any(|p| p.name == s.name) {
                return Err(Error::Validation(format!("duplicate stage name `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Seed used for shuffling within stage `index`.
    pub fn stage_seed(&self, index: usize) -> u64 {
        self.global_seed ^ ((index as u64 + 1) << 32)
    }
}

/// Knobs that are not part of the learning problem.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub threshold: f64,
    /// Stops a stage after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Where per-stage best checkpoints are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV to which one row per (epoch, split) is appended.
    pub metrics_log: Option<PathBuf>,
    pub run_config_hash: Option<String>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            threshold: 0.5,
            max_steps: None,
            checkpoint_dir: None,
            metrics_log: None,
            run_config_hash: None,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub split: Split,
    pub loss_cls: f64,
    pub loss_recon: f64,
    pub acc: f64,
    pub f1_macro: f64,
    pub auroc: Option<f64>,
}

/// Appends rows, writing the header when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Checkpoint of the epoch with the best validation macro-F1 (the latest
    /// epoch on ties, or the last epoch without a validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub initial_hash: String,
    pub steps: u64,
}

struct Prepared {
    train: Vec<RgbImage>,
    train_labels: Vec<Label>,
    val: Vec<RgbImage>,
    val_labels: Vec<Label>,
}

fn prepare(stage: &StageConfig, manifest: &DatasetManifest) -> Result<Prepared> {
    match manifest.train_variant() {
        Some(v) if v == stage.dataset_variant => {}
        found => {
            return Err(Error::Config(format!(
                "stage `{}` needs a {} train split, manifest has {}",
                stage.name,
                stage.dataset_variant,
                found.map_or("none or mixed".to_string(), |v| v.to_string())
            )))
        }
    }
    let (train, train_labels) = load_split(manifest, Split::Train)?;
    if train.is_empty() {
        return Err(Error::EmptyInput(format!("stage `{}` has no training samples", stage.name)));
    }
    let (val, val_labels) = load_split(manifest, Split::Val)?;
    Ok(Prepared {
        train,
        train_labels,
        val,
        val_labels,
    })
}

struct SnapshotCtx<'a> {
    stage: &'a StageConfig,
    stage_index: usize,
    initial_hash: &'a str,
    opts: &'a TrainOptions,
}

fn snapshot(
    model: &ModelBundle,
    opt: Option<&Adam>,
    ctx: &SnapshotCtx<'_>,
    rng: RngState,
    metrics: Option<EpochRecord>,
) -> Result<Checkpoint> {
    let SnapshotCtx { stage, stage_index, initial_hash, opts } = *ctx;
    let params = model.snapshot()?;
    let optimizer = opt.map(|o| o.state().clone());
    Ok(Checkpoint {
        meta: CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.config.clone(),
            config_hash: model.config.config_hash(),
            run_config_hash: opts.run_config_hash.clone(),
            stage: stage.name.clone(),
            stage_index,
            epoch: rng.epoch,
            step: optimizer.as_ref().map_or(0, |o| o.step),
            rng,
            metrics,
            param_hash: crate::model::params_hash(&params)?,
            optimizer: optimizer.as_ref().map(|o| (o.hyper, o.step)),
            stage_initial_hash: Some(initial_hash.to_string()),
        },
        params,
        optimizer,
    })
}

/// Trains `model` in place for one stage.
pub fn train_stage(
    model: &ModelBundle,
    stage: &StageConfig,
    manifest: &DatasetManifest,
    stage_index: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    run_stage(model, stage, manifest, stage_index, seed, opts, None)
}

/// Continues a stage from a checkpoint written at the end of one of its epochs.
pub fn resume_stage(
    model: &ModelBundle,
    stage: &StageConfig,
    manifest: &DatasetManifest,
    from: &Checkpoint,
    opts: &TrainOptions,
) -> Result<StageOutcome> {
    if from.meta.stage != stage.name {
        return Err(Error::Integrity(format!(
            "checkpoint belongs to stage `{}`, not `{}`",
            from.meta.stage, stage.name
        )));
    }
    if from.meta.config_hash != model.config.config_hash() {
        return Err(Error::Integrity("checkpoint model config hash differs from the model".into()));
    }
    run_stage(model, stage, manifest, from.meta.stage_index, from.meta.rng.seed, opts, Some(from))
}

fn run_stage(
    model: &ModelBundle,
    stage: &StageConfig,
    manifest: &DatasetManifest,
    stage_index: usize,
    seed: u64,
    opts: &TrainOptions,
    resume: Option<&Checkpoint>,
) -> Result<StageOutcome> {
    stage.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let data = prepare(stage, manifest)?;
    let n = data.train.len();

    let mut opt = Adam::new(model.named_params(), AdamHyper::with_lr(stage.learning_rate))?;
    let mut first_epoch = 1;
    if let Some(ck) = resume {
        model.load_params(&ck.params)?;
        if let Some(state) = &ck.optimizer {
            opt.restore(state)?;
        }
        first_epoch = ck.meta.rng.epoch + 1;
    }
    let initial_hash = match resume.and_then(|ck| ck.meta.stage_initial_hash.clone()) {
        Some(h) => h,
        None => model.param_hash()?,
    };
    let ctx = SnapshotCtx {
        stage,
        stage_index,
        initial_hash: &initial_hash,
        opts,
    };
    let paths = opts
        .checkpoint_dir
        .as_ref()
        .map(|dir| StageCheckpointPaths::new(dir, stage_index, &stage.name));
    let initial = snapshot(model, Some(&opt), &ctx, RngState { seed, epoch: first_epoch - 1 }, None)?;
    let mut best: Option<(f64, Checkpoint)> = match resume {
        Some(ck) => best_so_far(ck, paths.as_ref(), model)?,
        None => None,
    };
    let mut last = initial.clone();
    let mut history = Vec::new();
    let mut steps = 0usize;

    for epoch in first_epoch..=stage.epochs {
        if opts.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut cls_sum, mut rec_sum) = (0.0, 0.0);
        let mut seen_labels = Vec::with_capacity(n);
        let mut seen_probs = Vec::with_capacity(n);
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let augmented = chunk
                .iter()
                .map(|&i| apply_policy(&stage.policy, &data.train[i], Draw((epoch * n + i) as u64)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&RgbImage> = augmented.iter().collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| data.train_labels[i]).collect();
            let x = model.images_to_tensor(&refs)?;
            let parts = match model.forward(&x).and_then(|out| Ok((total_loss(&out, &x, &labels, &stage.weights)?, out))) {
                Ok(p) => p,
                Err(Error::Integrity(_)) => return Err(diverged(stage, epoch, best, initial)),
                Err(e) => return Err(e),
            };
            let (parts, out) = parts;
            let total = parts.total_value()?;
            if !total.is_finite() {
                return Err(diverged(stage, epoch, best, initial));
            }
            let grads = parts.total.backward()?;
            opt.step(&grads)?;
            steps += 1;
            cls_sum += parts.classification_value()? * chunk.len() as f64;
            rec_sum += parts.reconstruction_value()? * chunk.len() as f64;
            seen_labels.extend_from_slice(&labels);
            seen_probs.extend(crate::eval::sigmoid_vec(&out.logits)?);
        }
        let seen = seen_labels.len().max(1) as f64;
        let train_row = epoch_row(
            epoch,
            stage,
            Split::Train,
            cls_sum / seen,
            rec_sum / seen,
            &seen_probs,
            &seen_labels,
            opts.threshold,
        )?;
        let mut rows = vec![train_row];

        let val_row = if data.val.is_empty() {
            None
        } else {
            let refs: Vec<&RgbImage> = data.val.iter().collect();
            let s = score_images(model, &refs, &data.val_labels, Some(&stage.weights), EVAL_BATCH)?;
            let row = epoch_row(epoch, stage, Split::Val, s.loss_cls, s.loss_recon, &s.probs, &data.val_labels, opts.threshold)?;
            rows.push(row.clone());
            Some(row)
        };
        if let Some(log) = &opts.metrics_log {
            append_metrics(log, &rows)?;
        }
        history.extend(rows);

        let rng_state = RngState { seed, epoch };
        last = snapshot(model, Some(&opt), &ctx, rng_state, val_row)?;
        let score = selection_score(&last);
        let improved = best.as_ref().is_none_or(|(b, _)| score >= *b);
        if improved {
            best = Some((score, last.clone()));
        }
        if let Some(p) = &paths {
            last.save(&p.last)?;
            if improved {
                last.save(&p.best)?;
            }
        }
    }

    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(StageOutcome {
        best,
        last,
        history,
        initial_hash,
        steps: steps as u64,
    })
}

/// Validation macro-F1, or +inf without a validation split so the latest epoch wins.
fn selection_score(ck: &Checkpoint) -> f64 {
    ck.meta.metrics.as_ref().map_or(f64::INFINITY, |m| m.f1_macro)
}

/// Where a stage keeps its best and latest checkpoints inside a checkpoint directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCheckpointPaths {
    pub best: PathBuf,
    pub last: PathBuf,
}

impl StageCheckpointPaths {
    pub fn new(dir: &Path, stage_index: usize, stage_name: &str) -> Self {
        StageCheckpointPaths {
            best: dir.join(format!("{stage_index:02}_{stage_name}.safetensors")),
            last: dir.join(format!("{stage_index:02}_{stage_name}.last.safetensors")),
        }
    }
}

/// The best checkpoint recorded before `resume_from` was written, falling
/// back to `resume_from` itself when none is on disk. Epoch 0 has no score.
fn best_so_far(
    resume_from: &Checkpoint,
    paths: Option<&StageCheckpointPaths>,
    model: &ModelBundle,
) -> Result<Option<(f64, Checkpoint)>> {
    if resume_from.meta.epoch == 0 {
        return Ok(None);
    }
    if let Some(p) = paths.filter(|p| p.best.exists()) {
        let ck = Checkpoint::load(&p.best, model.device())?;
        let same_run = ck.meta.stage == resume_from.meta.stage
            && ck.meta.rng.seed == resume_from.meta.rng.seed
            && ck.meta.epoch <= resume_from.meta.epoch;
        if !same_run {
            log::warn!("{} belongs to another run; ignoring it", p.best.display());
        } else if ck.meta.epoch > 0 {
            return Ok(Some((selection_score(&ck), ck)));
        }
    }
    Ok(Some((selection_score(resume_from), resume_from.clone())))
}

fn diverged(stage: &StageConfig, epoch: usize, best: Option<(f64, Checkpoint)>, initial: Checkpoint) -> Error {
    log::error!("stage `{}` diverged at epoch {epoch}", stage.name);
    Error::Diverged {
        stage: stage.name.clone(),
        epoch,
        last_good: Box::new(best.map(|(_, c)| c).unwrap_or(initial)),
    }
}

#[allow(clippy::too_many_arguments)]
fn epoch_row(
    epoch: usize,
    stage: &StageConfig,
    split: Split,
    loss_cls: f64,
    loss_recon: f64,
    probs: &[f64],
    labels: &[Label],
    threshold: f64,
) -> Result<EpochRecord> {
    let preds: Vec<Label> = probs.iter().map(|&p| if p >= threshold { Label::Fake } else { Label::Real }).collect();
    let m = metrics_from_confusion(&confusion(&preds, labels)?)?;
    Ok(EpochRecord {
        epoch,
        stage: stage.name.clone(),
        split,
        loss_cls,
        loss_recon,
        acc: m.accuracy,
        f1_macro: m.f1_macro,
        auroc: auroc(probs, labels).ok(),
    })
}

/// Links one stage's starting parameters to where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub init_from: InitFrom,
    pub initial_hash: String,
    /// Best-checkpoint hash of the stage the parameters were taken from.
    pub parent_hash: Option<String>,
    pub best_hash: String,
    pub best_epoch: usize,
    pub checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    pub final_checkpoint: Checkpoint,
    pub stages: Vec<StageOutcome>,
    pub lineage: Vec<LineageEntry>,
}

/// File name of the lineage record inside a checkpoint directory.
pub const LINEAGE_FILE: &str = "lineage.json";

/// Runs every stage of `plan` on one model, carrying parameters forward.
///
/// With a checkpoint directory, each stage leaves its best and latest
/// checkpoints there and the lineage is rewritten after every stage.
pub fn run_curriculum(
    model: &ModelBundle,
    plan: &CurriculumPlan,
    manifests: &BTreeMap<Variant, DatasetManifest>,
    opts: &TrainOptions,
) -> Result<CurriculumOutcome> {
    drive_curriculum(model, plan, manifests, opts, None)
}

/// Continues an interrupted [`run_curriculum`] from a per-epoch checkpoint.
///
/// The checkpoint must come from the same run configuration, and earlier
/// stages must have left their lineage in the checkpoint directory.
/// `CurriculumOutcome::stages` then covers only the stages run here.
pub fn resume_curriculum(
    model: &ModelBundle,
    plan: &CurriculumPlan,
    manifests: &BTreeMap<Variant, DatasetManifest>,
    opts: &TrainOptions,
    from: &Checkpoint,
) -> Result<CurriculumOutcome> {
    if from.meta.run_config_hash != opts.run_config_hash {
        return Err(Error::Integrity(format!(
            "checkpoint was written under run config {}, current run config is {}",
            from.meta.run_config_hash.as_deref().unwrap_or("<none>"),
            opts.run_config_hash.as_deref().unwrap_or("<none>")
        )));
    }
    let k = from.meta.stage_index;
    match plan.stages.get(k) {
        Some(s) if s.name == from.meta.stage => {}
        _ => {
            return Err(Error::Integrity(format!(
                "checkpoint stage `{}` (index {k}) is not in the plan",
                from.meta.stage
            )))
        }
    }
    let dir = opts
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| Error::Config("resuming needs a checkpoint directory".into()))?;
    let mut lineage = read_lineage(&dir.join(LINEAGE_FILE))?;
    if lineage.len() < k {
        return Err(Error::Integrity(format!(
            "lineage in {} covers {} stages, resume point is stage {k}",
            dir.display(),
            lineage.len()
        )));
    }
    lineage.truncate(k);
    for (entry, stage) in lineage.iter().zip(&plan.stages) {
        if entry.stage != stage.name {
            return Err(Error::Integrity(format!(
                "recorded stage `{}` does not match planned stage `{}`",
                entry.stage, stage.name
            )));
        }
    }
    drive_curriculum(model, plan, manifests, opts, Some((from, lineage)))
}

fn read_lineage(path: &Path) -> Result<Vec<LineageEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_lineage(path: &Path, lineage: &[LineageEntry]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(lineage)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn drive_curriculum(
    model: &ModelBundle,
    plan: &CurriculumPlan,
    manifests: &BTreeMap<Variant, DatasetManifest>,
    opts: &TrainOptions,
    resume: Option<(&Checkpoint, Vec<LineageEntry>)>,
) -> Result<CurriculumOutcome> {
    plan.validate()?;
    for s in &plan.stages {
        if !manifests.contains_key(&s.dataset_variant) {
            return Err(Error::Config(format!(
                "stage `{}` needs a {} manifest",
                s.name, s.dataset_variant
            )));
        }
    }
    let (resume_from, mut lineage) = match resume {
        Some((ck, lineage)) => (Some(ck), lineage),
        None => (None, Vec::new()),
    };
    let start = lineage.len();
    let mut outcomes: Vec<StageOutcome> = Vec::new();
    for (k, stage) in plan.stages.iter().enumerate().skip(start) {
        let resuming = resume_from.filter(|ck| ck.meta.stage_index == k);
        let previous_best = || -> Result<(Option<BTreeMap<String, Tensor>>, String)> {
            match outcomes.last() {
                Some(o) => Ok((Some(o.best.params.clone()), o.best.meta.param_hash.clone())),
                None => {
                    let entry = lineage.last().expect("validated: not the first stage");
                    Ok((None, entry.best_hash.clone()))
                }
            }
        };
        let parent_hash = match &stage.init_from {
            InitFrom::Scratch => {
                if resuming.is_none() {
                    model.reinitialize(model.config.init_seed.wrapping_add(k as u64))?;
                }
                None
            }
            InitFrom::PreviousStage => {
                let (params, hash) = previous_best()?;
                if resuming.is_none() {
                    let params = params.ok_or_else(|| {
                        Error::Integrity(format!("stage `{}` has no in-memory parent", stage.name))
                    })?;
                    model.load_params(&params)?;
                }
                Some(hash)
            }
            InitFrom::Checkpoint(path) => {
                let ck = Checkpoint::load(path, model.device())?;
                if ck.meta.config_hash != model.config.config_hash() {
                    return Err(Error::Integrity(format!(
                        "{} was written for a different model config",
                        path.display()
                    )));
                }
                if resuming.is_none() {
                    model.load_params(&ck.params)?;
                }
                Some(ck.meta.param_hash)
            }
        };
        log::info!("stage {k} `{}` ({} epochs, init {})", stage.name, stage.epochs, stage.init_from);
        let manifest = &manifests[&stage.dataset_variant];
        let outcome = match resuming {
            Some(ck) => resume_stage(model, stage, manifest, ck, opts)?,
            None => train_stage(model, stage, manifest, k, plan.stage_seed(k), opts)?,
        };
        if let Some(parent) = &parent_hash {
            if *parent != outcome.initial_hash {
                return Err(Error::Integrity(format!(
                    "stage `{}` started from {} but its parent checkpoint is {parent}",
                    stage.name, outcome.initial_hash
                )));
            }
        }
        let checkpoint_path = match &opts.checkpoint_dir {
            Some(dir) => {
                let p = StageCheckpointPaths::new(dir, k, &stage.name).best;
                outcome.best.save(&p)?;
                Some(p)
            }
            None => None,
        };
        lineage.push(LineageEntry {
            stage: stage.name.clone(),
            init_from: stage.init_from.clone(),
            initial_hash: outcome.initial_hash.clone(),
            parent_hash,
            best_hash: outcome.best.meta.param_hash.clone(),
            best_epoch: outcome.best.meta.epoch,
            checkpoint_path,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            write_lineage(&dir.join(LINEAGE_FILE), &lineage)?;
        }
        outcomes.push(outcome);
    }
    let final_checkpoint = outcomes
        .last()
        .ok_or_else(|| Error::Integrity("resume point is past the last stage".into()))?
        .best
        .clone();
    model.load_params(&final_checkpoint.params)?;
    Ok(CurriculumOutcome {
        final_checkpoint,
        stages: outcomes,
        lineage,
    })
}
