//! Declarative run configuration (TOML) and run provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPolicy, PolicyName, RfParams};
use crate::dataset::{DatasetManifest, Split, Variant};
use crate::error::{Error, Result};
use crate::eval::ablation::AblationSetup;
use crate::eval::{evaluate, MetricsReport};
use crate::model::{canonical_hash, ModelBundle, ModelConfig};
use crate::train::{run_curriculum, CurriculumPlan, InitFrom, LossWeights, StageConfig, TrainOptions};

/// Environment variable naming the directory for derived data.
pub const CACHE_ENV: &str = "DEEPGUARD_CACHE";

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".deepguard-cache"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest whose train split holds original crops.
    pub manifest: Option<PathBuf>,
    /// Manifest whose train split holds masked-eye crops.
    pub masked_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            masked_manifest: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub policy: PolicyName,
    /// LEGACY is only accepted when this is set.
    pub allow_legacy: bool,
    pub hflip_p: f64,
    pub max_rotation_deg: f64,
    pub vertical_flip: bool,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let rf = RfParams::default();
        AugmentSection {
            policy: PolicyName::Rf,
            allow_legacy: false,
            hflip_p: rf.hflip_p,
            max_rotation_deg: rf.max_rotation_deg,
            vertical_flip: rf.vertical_flip,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Scratch,
    PreviousStage,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSpec {
    pub name: String,
    pub variant: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub init_from: InitKind,
    /// Required when `init_from = "checkpoint"`.
    pub checkpoint: Option<PathBuf>,
    /// Overrides `augment.policy` for this stage.
    pub policy: Option<PolicyName>,
}

impl Default for StageSpec {
    fn default() -> Self {
        StageSpec {
            name: "train".into(),
            variant: Variant::Original,
            epochs: 10,
            learning_rate: 1e-4,
            init_from: InitKind::Scratch,
            checkpoint: None,
            policy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            seed: 0,
            batch_size: 32,
            max_steps: None,
            stages: vec![
                StageSpec {
                    name: "pretrain".into(),
                    variant: Variant::MaskedEye,
                    epochs: 5,
                    ..StageSpec::default()
                },
                StageSpec {
                    name: "finetune".into(),
                    variant: Variant::Original,
                    epochs: 10,
                    init_from: InitKind::PreviousStage,
                    ..StageSpec::default()
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.5,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub augment: AugmentSection,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub curriculum: CurriculumSection,
    pub eval: EvalSection,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn check_keys(table: &toml::Table, section: &str, known: &[String]) -> Result<()> {
    match table.keys().find(|k| !known.contains(k)) {
        Some(key) => Err(Error::UnknownKey {
            section: section.to_string(),
            key: key.clone(),
        }),
        None => Ok(()),
    }
}

/// Rejects keys the schema does not know, naming the key and its section.
fn check_schema(doc: &toml::Table) -> Result<()> {
    let defaults = RunConfig::default();
    check_keys(doc, "<top level>", &keys_of(&defaults))?;
    let sections: [(&str, Vec<String>); 6] = [
        ("data", keys_of(&defaults.data)),
        ("augment", keys_of(&defaults.augment)),
        ("model", keys_of(&defaults.model)),
        ("loss", keys_of(&defaults.loss)),
        ("curriculum", keys_of(&defaults.curriculum)),
        ("eval", keys_of(&defaults.eval)),
    ];
    for (name, known) in &sections {
        match doc.get(*name) {
            Some(toml::Value::Table(t)) => check_keys(t, name, known)?,
            Some(_) => return Err(Error::Config(format!("[{name}] must be a table"))),
            None => {}
        }
    }
    if let Some(toml::Value::Array(stages)) = doc.get("curriculum").and_then(|c| c.get("stages")) {
        let known = keys_of(&StageSpec::default());
        for s in stages {
            if let toml::Value::Table(t) = s {
                check_keys(t, "curriculum.stages", &known)?;
            }
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        check_schema(&doc)?;
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON form, defaults included.
    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Validation(format!(
                "eval.threshold must lie in (0, 1), got {}",
                self.eval.threshold
            )));
        }
        if self.curriculum.batch_size == 0 {
            return Err(Error::Validation("curriculum.batch_size must be at least 1".into()));
        }
        self.plan()?.validate()
    }

    pub fn policy(&self, name: PolicyName) -> Result<AugmentationPolicy> {
        let a = &self.augment;
        let policy = match name {
            PolicyName::Na => AugmentationPolicy::none(a.seed),
            PolicyName::Rf => AugmentationPolicy::random_flip_with(
                a.seed,
                RfParams {
                    hflip_p: a.hflip_p,
                    max_rotation_deg: a.max_rotation_deg,
                    vertical_flip: a.vertical_flip,
                },
            ),
            PolicyName::Legacy if a.allow_legacy => AugmentationPolicy::legacy(a.seed),
            PolicyName::Legacy => {
                return Err(Error::Config("the legacy policy requires augment.allow_legacy = true".into()))
            }
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn plan(&self) -> Result<CurriculumPlan> {
        let stages = self
            .curriculum
            .stages
            .iter()
            .map(|s| {
                let init_from = match (s.init_from, &s.checkpoint) {
                    (InitKind::Scratch, _) => InitFrom::Scratch,
                    (InitKind::PreviousStage, _) => InitFrom::PreviousStage,
                    (InitKind::Checkpoint, Some(p)) => InitFrom::Checkpoint(p.clone()),
                    (InitKind::Checkpoint, None) => {
                        return Err(Error::Config(format!(
                            "stage `{}`: init_from = \"checkpoint\" needs a checkpoint path",
                            s.name
                        )))
                    }
                };
                Ok(StageConfig {
                    name: s.name.clone(),
                    dataset_variant: s.variant,
                    policy: self.policy(s.policy.unwrap_or(self.augment.policy))?,
                    epochs: s.epochs,
                    learning_rate: s.learning_rate,
                    weights: self.loss,
                    init_from,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = CurriculumPlan {
            stages,
            global_seed: self.curriculum.seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Options for a run writing into `out_dir`.
    pub fn train_options(&self, out_dir: &Path) -> TrainOptions {
        TrainOptions {
            batch_size: self.curriculum.batch_size,
            threshold: self.eval.threshold,
            max_steps: self.curriculum.max_steps,
            checkpoint_dir: Some(out_dir.join("checkpoints")),
            metrics_log: Some(out_dir.join("metrics.csv")),
            run_config_hash: Some(self.config_hash()),
        }
    }

    /// Reads the manifests the curriculum needs.
    pub fn load_manifests(&self) -> Result<BTreeMap<Variant, DatasetManifest>> {
        let mut out = BTreeMap::new();
        let needs_masked = self.curriculum.stages.iter().any(|s| s.variant == Variant::MaskedEye);
        let original = self
            .data
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("data.manifest is required".into()))?;
        out.insert(Variant::Original, DatasetManifest::read(original)?);
        match (&self.data.masked_manifest, needs_masked) {
            (Some(p), _) => {
                out.insert(Variant::MaskedEye, DatasetManifest::read(p)?);
            }
            (None, true) => {
                return Err(Error::Config(
                    "a masked_eye stage needs data.masked_manifest (run `deepguard mask-eyes` first)".into(),
                ))
            }
            (None, false) => {}
        }
        Ok(out)
    }

    /// Grid settings: epochs come from the masked-eye and last original stages.
    pub fn ablation_setup(&self, out_dir: &Path) -> Result<AblationSetup> {
        let stages = &self.curriculum.stages;
        let pretrain = stages.iter().find(|s| s.variant == Variant::MaskedEye);
        let train = stages.iter().rev().find(|s| s.variant == Variant::Original);
        let a = &self.augment;
        Ok(AblationSetup {
            model: self.model.clone(),
            wl_weights: self.loss,
            rf: RfParams {
                hflip_p: a.hflip_p,
                max_rotation_deg: a.max_rotation_deg,
                vertical_flip: a.vertical_flip,
            },
            augment_seed: a.seed,
            pretrain_epochs: pretrain.map_or(5, |s| s.epochs),
            train_epochs: train.map_or(10, |s| s.epochs),
            learning_rate: train.map_or(1e-4, |s| s.learning_rate),
            seed: self.curriculum.seed,
            eval_split: self.eval.split,
            threshold: self.eval.threshold,
            options: TrainOptions {
                checkpoint_dir: None,
                metrics_log: Some(out_dir.join("ablation_metrics.csv")),
                ..self.train_options(out_dir)
            },
            dtype: DType::F32,
        })
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml(&text)
}

/// Provenance for one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<PathBuf>,
    pub versions: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &str, config_hash: &str, seed: u64, started_at: String) -> Self {
        let version = env!("CARGO_PKG_VERSION").to_string();
        let versions = ["dataset", "augment", "model", "train", "eval", "cam", "config"]
            .iter()
            .map(|m| (m.to_string(), version.clone()))
            .collect();
        RunRecord {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            started_at: started_at.clone(),
            finished_at: started_at,
            artifacts: Vec::new(),
            versions,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub w: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Value with the highest validation macro-F1, first on ties.
    pub best_w: f64,
}

pub fn validate_sweep(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    for (i, w) in values.iter().enumerate() {
        if !(w.is_finite() && *w > 0.0) {
            return Err(Error::Validation(format!("w must be finite and positive, got {w}")));
        }
        if values[..i].contains(w) {
            return Err(Error::Validation(format!("duplicate sweep value {w}")));
        }
    }
    Ok(())
}

/// One full curriculum per `w_fake` value, each scored on the validation split.
pub fn sweep_w(
    values: &[f64],
    base: &RunConfig,
    manifests: &BTreeMap<Variant, DatasetManifest>,
    opts: &TrainOptions,
) -> Result<SweepResult> {
    validate_sweep(values)?;
    let original = manifests
        .get(&Variant::Original)
        .ok_or_else(|| Error::Config("sweep needs an original-variant manifest".into()))?;
    let mut rows = Vec::with_capacity(values.len());
    for &w in values {
        let mut cfg = base.clone();
        cfg.loss.w_fake = w;
        let plan = cfg.plan()?;
        let model = ModelBundle::new(cfg.model.clone(), DType::F32, &Device::Cpu)?;
        let opts = TrainOptions {
            run_config_hash: Some(cfg.config_hash()),
            checkpoint_dir: opts.checkpoint_dir.as_ref().map(|d| d.join(format!("w_{w}"))),
            ..opts.clone()
        };
        log::info!("sweep w = {w}");
        run_curriculum(&model, &plan, manifests, &opts)?;
        let report = evaluate(&model, original, Split::Val, cfg.eval.threshold)?;
        rows.push(SweepRow { w, report });
    }
    let best_w = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.report.f1_macro >= r.report.f1_macro => Some(b),
            _ => Some(r),
        })
        .map(|r| r.w)
        .expect("nonempty sweep");
    Ok(SweepResult { rows, best_w })
}
