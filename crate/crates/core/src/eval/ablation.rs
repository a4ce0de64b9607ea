//! Technique ablation grid: each cell trains one model variant from scratch
//! and evaluates it on a held-out split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::augment::{AugmentationPolicy, RfParams};
use crate::dataset::{DatasetManifest, Split, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::train::{run_curriculum, CurriculumPlan, InitFrom, LossWeights, StageConfig, TrainOptions};

/// Declaration order is the order labels are printed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Technique {
    /// Class-weighted loss.
    WL,
    /// No augmentation.
    NA,
    /// Random flip and rotation.
    RF,
    /// Masked-eye pretraining stage.
    MEP,
    /// Attention companion removed.
    RST,
}

impl Technique {
    pub fn as_str(self) -> &'static str {
        match self {
            Technique::WL => "WL",
            Technique::NA => "NA",
            Technique::RF => "RF",
            Technique::MEP => "MEP",
            Technique::RST => "RST",
        }
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WL" => Ok(Technique::WL),
            "NA" => Ok(Technique::NA),
            "RF" => Ok(Technique::RF),
            "MEP" => Ok(Technique::MEP),
            "RST" => Ok(Technique::RST),
            _ => Err(Error::Config(format!("unknown technique `{}` (expected WL, NA, RF, MEP, RST)", s.trim()))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TechniqueSet(pub BTreeSet<Technique>);

impl TechniqueSet {
    pub fn new(items: &[Technique]) -> Result<Self> {
        let set = TechniqueSet(items.iter().copied().collect());
        set.validate()?;
        Ok(set)
    }

    pub fn has(&self, t: Technique) -> bool {
        self.0.contains(&t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.has(Technique::NA) && self.has(Technique::RF) {
            return Err(Error::Config(format!("`{self}`: NA and RF are mutually exclusive")));
        }
        Ok(())
    }
}

impl fmt::Display for TechniqueSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("Base model");
        }
        let parts: Vec<&str> = self.0.iter().map(|t| t.as_str()).collect();
        f.write_str(&parts.join(" + "))
    }
}

impl FromStr for TechniqueSet {
    type Err = Error;

    /// `"WL + NA"`, `"wl,na"`, or `"base"` / `"Base model"` for the empty set.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("base") || t.eq_ignore_ascii_case("base model") {
            return Ok(TechniqueSet::default());
        }
        let items = t
            .split(['+', ','])
            .map(Technique::from_str)
            .collect::<Result<Vec<_>>>()?;
        TechniqueSet::new(&items)
    }
}

/// The ten rows reported for the original study, in order.
pub fn standard_grid() -> Vec<TechniqueSet> {
    use Technique::*;
    [
        &[][..],
        &[WL],
        &[NA],
        &[RST],
        &[MEP],
        &[WL, NA],
        &[WL, NA, RST],
        &[WL, NA, MEP],
        &[NA, MEP],
        &[WL, RF, MEP],
    ]
    .iter()
    .map(|s| TechniqueSet::new(s).expect("standard rows are valid"))
    .collect()
}

/// One technique set per line; blank lines and `#` comments are skipped.
pub fn parse_grid(text: &str) -> Result<Vec<TechniqueSet>> {
    let grid = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(TechniqueSet::from_str)
        .collect::<Result<Vec<_>>>()?;
    validate_grid(&grid)?;
    Ok(grid)
}

pub fn validate_grid(grid: &[TechniqueSet]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    for (i, set) in grid.iter().enumerate() {
        set.validate()?;
        if grid[..i].contains(set) {
            return Err(Error::Config(format!("duplicate ablation row `{set}`")));
        }
    }
    Ok(())
}

/// Everything the grid holds fixed.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub model: ModelConfig,
    /// Weights used when WL is on; without WL both class weights are 1.
    pub wl_weights: LossWeights,
    pub rf: RfParams,
    pub augment_seed: u64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_split: Split,
    pub threshold: f64,
    pub options: TrainOptions,
    pub dtype: DType,
}

impl Default for AblationSetup {
    fn default() -> Self {
        AblationSetup {
            model: ModelConfig::default(),
            wl_weights: LossWeights::default(),
            rf: RfParams::default(),
            augment_seed: 0,
            pretrain_epochs: 5,
            train_epochs: 10,
            learning_rate: 1e-4,
            seed: 0,
            eval_split: Split::Test,
            threshold: 0.5,
            options: TrainOptions::default(),
            dtype: DType::F32,
        }
    }
}

/// Model and curriculum for one row.
///
/// Without NA or RF the photometric LEGACY policy is used, as in the base
/// model. MEP prepends a masked-eye stage and fine-tunes from it.
pub fn cell_plan(set: &TechniqueSet, setup: &AblationSetup) -> Result<(ModelConfig, CurriculumPlan)> {
    set.validate()?;
    let model = ModelConfig {
        use_attention_companion: !set.has(Technique::RST),
        ..setup.model.clone()
    };
    let weights = if set.has(Technique::WL) {
        setup.wl_weights
    } else {
        LossWeights {
            w_fake: 1.0,
            w_real: 1.0,
            lambda_recon: setup.wl_weights.lambda_recon,
        }
    };
    let policy = if set.has(Technique::NA) {
        AugmentationPolicy::none(setup.augment_seed)
    } else if set.has(Technique::RF) {
        AugmentationPolicy::random_flip_with(setup.augment_seed, setup.rf)
    } else {
        AugmentationPolicy::legacy(setup.augment_seed)
    };
    let stage = |name: &str, variant, epochs, init_from| StageConfig {
        name: name.to_string(),
        dataset_variant: variant,
        policy: policy.clone(),
        epochs,
        learning_rate: setup.learning_rate,
        weights,
        init_from,
    };
    let stages = if set.has(Technique::MEP) {
        vec![
            stage("pretrain", Variant::MaskedEye, setup.pretrain_epochs, InitFrom::Scratch),
            stage("finetune", Variant::Original, setup.train_epochs, InitFrom::PreviousStage),
        ]
    } else {
        vec![stage("train", Variant::Original, setup.train_epochs, InitFrom::Scratch)]
    };
    Ok((
        model,
        CurriculumPlan {
            stages,
            global_seed: setup.seed,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub techniques: TechniqueSet,
    pub label: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub cells: Vec<AblationCell>,
    pub table: String,
}

/// Trains and evaluates every row in order.
pub fn run_ablation(
    grid: &[TechniqueSet],
    setup: &AblationSetup,
    manifests: &BTreeMap<Variant, DatasetManifest>,
) -> Result<AblationResult> {
    validate_grid(grid)?;
    let original = manifests
        .get(&Variant::Original)
        .ok_or_else(|| Error::Config("ablation needs an original-variant manifest".into()))?;
    if grid.iter().any(|s| s.has(Technique::MEP)) && !manifests.contains_key(&Variant::MaskedEye) {
        return Err(Error::Config("MEP rows need a masked_eye manifest".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for set in grid {
        let (config, plan) = cell_plan(set, setup)?;
        log::info!("ablation row `{set}`");
        let model = ModelBundle::new(config, setup.dtype, &Device::Cpu)?;
        run_curriculum(&model, &plan, manifests, &setup.options)?;
        let report = evaluate(&model, original, setup.eval_split, setup.threshold)?;
        cells.push(AblationCell {
            techniques: set.clone(),
            label: set.to_string(),
            report,
        });
    }
    let table = render_table(&cells);
    Ok(AblationResult { cells, table })
}

/// Markdown table `| Model | Acc | F1 | AUC |`; the best F1 (first on ties) is bold.
pub fn render_table(cells: &[AblationCell]) -> String {
    let best = cells
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, c)| match acc {
            Some((_, f)) if f >= c.report.f1_macro => acc,
            _ => Some((i, c.report.f1_macro)),
        })
        .map(|(i, _)| i);
    let mut out = String::from("| Model | Acc | F1 | AUC |\n|---|---|---|---|\n");
    for (i, c) in cells.iter().enumerate() {
        let f1 = format!("{:.4}", c.report.f1_macro);
        let f1 = if Some(i) == best { format!("**{f1}**") } else { f1 };
        let auc = c.report.auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        out.push_str(&format!("| {} | {:.4} | {} | {} |\n", c.label, c.report.accuracy, f1, auc));
    }
    out
}
