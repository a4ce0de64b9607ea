use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::{DType, Device};
use serde::Serialize;
use serde_json::json;

use deepguard::cam::{eye_region_mass, gradcam_map, overlay, CamModel};
use deepguard::config::{cache_dir, parse_config, sweep_w, RunConfig, RunRecord, SweepResult};
use deepguard::dataset::{
    balance_train_split, build_manifest, discover_videos, extract_all, load_crop, materialize_variant, save_png,
    CenterCropDetector, DatasetManifest, EyeMaskParams, FaceDetector, LandmarkIndex, RegionSource, SkinToneDetector,
    Split, SplitRatios, Variant,
};
use deepguard::eval::ablation::{parse_grid, run_ablation, standard_grid};
use deepguard::eval::evaluate;
use deepguard::model::export::export_model;
use deepguard::model::{canonical_hash, ModelBundle};
use deepguard::train::{resume_curriculum, run_curriculum, Checkpoint, LINEAGE_FILE};
use deepguard::Error;

use crate::{
    AblateArgs, BalanceArgs, Cli, Command, DetectorKind, EvalArgs, ExportArgs, ExtractArgs, GradcamArgs, ManifestArgs,
    MaskEyesArgs, SweepArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(a) => extract(a),
        Command::Manifest(a) => manifest(a),
        Command::Balance(a) => balance(a),
        Command::MaskEyes(a) => mask_eyes(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcam(a) => gradcam(a),
        Command::Export(a) => export(a),
        Command::SweepW(a) => sweep(a),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// `out/foo.csv` -> `out/foo.run.json`
fn record_path_for(file: &Path) -> PathBuf {
    file.with_extension("run.json")
}

struct Provenance {
    record: RunRecord,
}

impl Provenance {
    fn start(command: &str, config_hash: String, seed: u64) -> Self {
        Provenance {
            record: RunRecord::new(command, &config_hash, seed, now()),
        }
    }

    /// Hash of the command's effective arguments, for commands without a config file.
    fn for_args(command: &str, args: serde_json::Value, seed: u64) -> Self {
        Self::start(command, canonical_hash(&args), seed)
    }

    fn finish(mut self, artifacts: Vec<PathBuf>, path: &Path) -> Result<()> {
        self.record.finished_at = now();
        self.record.artifacts = artifacts;
        self.record.write(path)?;
        log::info!("run record: {}", path.display());
        Ok(())
    }
}

fn load_model(checkpoint: &Path) -> Result<(ModelBundle, Checkpoint)> {
    let ck = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let model = ModelBundle::new(ck.meta.model.clone(), DType::F32, &Device::Cpu)?;
    model.load_params(&ck.params)?;
    Ok((model, ck))
}

/// `landmarks.csv` in the crop root above the first sample of `split`.
fn default_landmarks(manifest: &DatasetManifest, split: Split) -> Option<PathBuf> {
    let first = manifest.split(split).next()?;
    let root = first.image_path.parent()?.parent()?.parent()?;
    Some(root.join(LandmarkIndex::FILE_NAME))
}

fn read_landmarks(explicit: Option<&Path>, manifest: &DatasetManifest, split: Split) -> Result<LandmarkIndex> {
    let path = match explicit {
        Some(p) if !p.exists() => return Err(Error::MissingFiles(vec![p.to_path_buf()]).into()),
        Some(p) => Some(p.to_path_buf()),
        None => default_landmarks(manifest, split),
    };
    let index = match &path {
        Some(p) => LandmarkIndex::read(p)?,
        None => LandmarkIndex::default(),
    };
    if index.is_empty() {
        log::warn!("no eye landmarks found; the fixed band will be used");
    }
    Ok(index)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let out = a.out.unwrap_or_else(|| cache_dir().join("crops"));
    let videos = match (&a.videos, a.label) {
        (Some(root), _) => discover_videos(root)?,
        (None, Some(label)) => a.video.iter().map(|v| (v.clone(), label)).collect(),
        (None, None) => unreachable!("clap requires --label with --video"),
    };
    let prov = Provenance::for_args(
        "extract",
        json!({
            "videos": videos.iter().map(|(p, l)| (p, l.as_str())).collect::<Vec<_>>(),
            "rate": a.rate,
            "detector": format!("{:?}", a.detector),
        }),
        0,
    );
    let detector: Box<dyn FaceDetector> = match a.detector {
        DetectorKind::Skin => Box::new(SkinToneDetector::default()),
        DetectorKind::Center => Box::new(CenterCropDetector),
    };
    let summaries = extract_all(&videos, a.rate, detector.as_ref(), &out)?;
    let crops: usize = summaries.iter().map(|s| s.crops).sum();
    let frames: usize = summaries.iter().map(|s| s.frames).sum();
    println!("{} videos, {frames} frames, {crops} crops -> {}", summaries.len(), out.display());
    let summary_path = out.join("extract_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summaries)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    prov.finish(
        vec![out.join(LandmarkIndex::FILE_NAME), summary_path],
        &out.join("run_extract.json"),
    )
}

fn manifest(a: ManifestArgs) -> Result<()> {
    let &[train, val, test] = a.ratios.as_slice() else {
        return Err(Error::Validation(format!("--ratios takes three values, got {}", a.ratios.len())).into());
    };
    let ratios = SplitRatios::new(train, val, test)?;
    let prov = Provenance::for_args(
        "manifest",
        json!({"crops": a.crops, "ratios": a.ratios, "seed": a.seed, "split_level": a.split_level}),
        a.seed,
    );
    let m = build_manifest(&a.crops, ratios, a.seed, a.split_level)?;
    m.write(&a.out)?;
    print_counts(&m);
    prov.finish(vec![a.out.clone()], &record_path_for(&a.out))
}

fn print_counts(m: &DatasetManifest) {
    for (split, c) in m.counts() {
        println!("{split:>5}: {} real, {} fake", c.real, c.fake);
    }
}

fn balance(a: BalanceArgs) -> Result<()> {
    let m = DatasetManifest::read(&a.manifest)?;
    let per_class = match a.per_class {
        Some(n) => n,
        None => {
            let c = m.counts()[&Split::Train];
            c.real.min(c.fake)
        }
    };
    let prov = Provenance::for_args(
        "balance",
        json!({"manifest": a.manifest, "per_class": per_class, "seed": a.seed}),
        a.seed,
    );
    let balanced = balance_train_split(&m, per_class, a.seed)?;
    balanced.write(&a.out)?;
    print_counts(&balanced);
    prov.finish(vec![a.out.clone()], &record_path_for(&a.out))
}

fn mask_eyes(a: MaskEyesArgs) -> Result<()> {
    let m = DatasetManifest::read(&a.manifest)?;
    let params = EyeMaskParams {
        region_source: if a.fixed_band {
            RegionSource::FixedBand
        } else {
            RegionSource::Landmarks
        },
        margin_px: a.margin_px,
        ..EyeMaskParams::default()
    };
    let landmarks = if a.fixed_band {
        LandmarkIndex::default()
    } else {
        read_landmarks(a.landmarks.as_deref(), &m, Split::Train)?
    };
    let images_dir = a.images_dir.unwrap_or_else(|| cache_dir().join("masked_eye"));
    let prov = Provenance::for_args(
        "mask-eyes",
        json!({"manifest": a.manifest, "params": params, "images_dir": images_dir}),
        m.seed,
    );
    let masked = materialize_variant(&m, Variant::MaskedEye, &params, &landmarks, &images_dir)?;
    masked.write(&a.out)?;
    let n = masked.split(Split::Train).count();
    let fallbacks = masked.mask.as_ref().map_or(0, |r| r.fallbacks.len());
    println!("{n} masked train images ({fallbacks} fixed-band fallbacks) -> {}", images_dir.display());
    prov.finish(vec![a.out.clone(), images_dir], &record_path_for(&a.out))
}

/// Results a fresh run would append to or overwrite.
fn previous_results(out_dir: &Path) -> Vec<PathBuf> {
    [out_dir.join("metrics.csv"), out_dir.join("checkpoints")]
        .into_iter()
        .filter(|p| p.exists())
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let out_dir = a.out.clone().unwrap_or_else(|| cfg.data.output_dir.clone());
    let opts = cfg.train_options(&out_dir);
    let stale = previous_results(&out_dir);
    if a.resume.is_none() && !stale.is_empty() {
        if !a.overwrite {
            return Err(Error::Validation(format!(
                "{} already holds a run; pass --resume or --overwrite",
                out_dir.display()
            ))
            .into());
        }
        for p in &stale {
            if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            }
            .with_context(|| format!("removing {}", p.display()))?;
        }
    }
    let prov = Provenance::start("train", cfg.config_hash(), cfg.curriculum.seed);
    let manifests = cfg.load_manifests()?;
    let plan = cfg.plan()?;
    let model = ModelBundle::new(cfg.model.clone(), DType::F32, &Device::Cpu)?;
    let result = match &a.resume {
        Some(path) => {
            let from = Checkpoint::load(path, &Device::Cpu)?;
            resume_curriculum(&model, &plan, &manifests, &opts, &from)
        }
        None => run_curriculum(&model, &plan, &manifests, &opts),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged { stage, epoch, last_good }) => {
            let path = out_dir.join("last_good.safetensors");
            last_good.save(&path)?;
            eprintln!("last good parameters saved to {}", path.display());
            return Err(Error::Diverged { stage, epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let final_path = out_dir.join("final.safetensors");
    outcome.final_checkpoint.save(&final_path)?;
    let lineage_path = out_dir.join(LINEAGE_FILE);
    std::fs::write(&lineage_path, serde_json::to_string_pretty(&outcome.lineage)?)
        .with_context(|| format!("writing {}", lineage_path.display()))?;
    for entry in &outcome.lineage {
        println!(
            "{:<12} best epoch {:>3}  {}",
            entry.stage,
            entry.best_epoch,
            &entry.best_hash[..16]
        );
    }
    let mut artifacts = vec![final_path, lineage_path];
    artifacts.extend(opts.metrics_log.clone());
    artifacts.extend(outcome.lineage.iter().filter_map(|e| e.checkpoint_path.clone()));
    prov.finish(artifacts, &out_dir.join("run.json"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let prov = Provenance::start(
        "eval",
        ck.meta.run_config_hash.clone().unwrap_or_else(|| ck.meta.config_hash.clone()),
        ck.meta.rng.seed,
    );
    let m = DatasetManifest::read(&a.manifest)?;
    let report = evaluate(&model, &m, a.split, a.threshold)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{} on {} samples: acc {:.4}  f1 {:.4}  auc {}",
                a.split,
                report.samples,
                report.accuracy,
                report.f1_macro,
                report.auroc.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            prov.finish(vec![path.clone()], &record_path_for(path))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn output_dir(cfg: &RunConfig, explicit: Option<PathBuf>, sub: &str) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.data.output_dir.join(sub))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let out = output_dir(&cfg, a.out, "ablation");
    let grid = match &a.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_grid(&text)?
        }
        None => standard_grid(),
    };
    let prov = Provenance::start("ablate", cfg.config_hash(), cfg.curriculum.seed);
    let setup = cfg.ablation_setup(&out)?;
    let manifests = cfg.load_manifests()?;
    if let Some(log) = &setup.options.metrics_log {
        if log.exists() {
            std::fs::remove_file(log).with_context(|| format!("removing {}", log.display()))?;
        }
    }
    let result = run_ablation(&grid, &setup, &manifests)?;
    let table_path = out.join("ablation.md");
    let json_path = out.join("ablation.json");
    write_text(&table_path, &result.table)?;
    write_json(&json_path, &result)?;
    print!("{}", result.table);
    prov.finish(vec![table_path, json_path], &out.join("run.json"))
}

fn gradcam(a: GradcamArgs) -> Result<()> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let layer = a.layer.clone().unwrap_or_else(|| CamModel::default_layer(&model));
    let prov = Provenance::for_args(
        "gradcam",
        json!({
            "checkpoint": ck.meta.param_hash,
            "layer": layer,
            "class": a.target_class,
            "image": a.image,
            "manifest": a.manifest,
            "split": a.split,
        }),
        0,
    );
    match (&a.image, &a.manifest) {
        (Some(image), _) => {
            let img = load_crop(image)?;
            let x = model.images_to_tensor(&[&img])?;
            let id = image.display().to_string();
            let map = gradcam_map(&model, &x, &layer, a.target_class, &id)?;
            let out = a.out.clone().unwrap_or_else(|| image.with_extension("gradcam.png"));
            save_png(&map.to_rgb(), &out)?;
            let mut artifacts = vec![out.clone()];
            if let Some(ov) = &a.overlay {
                save_png(&overlay(&img, &map, a.alpha)?, ov)?;
                artifacts.push(ov.clone());
            }
            println!(
                "{}: layer {}, class {}{}",
                out.display(),
                map.target_layer,
                map.target_class,
                if map.degenerate { ", degenerate (all-zero) map" } else { "" }
            );
            prov.finish(artifacts, &record_path_for(&out))
        }
        (None, Some(manifest)) => {
            let m = DatasetManifest::read(manifest)?;
            let landmarks = read_landmarks(a.landmarks.as_deref(), &m, a.split)?;
            let params = EyeMaskParams::default();
            let csv_path = a.csv.clone().unwrap_or_else(|| PathBuf::from(format!("gradcam_{}.csv", a.split)));
            let mut rows = String::from("image_path,label,target_class,layer,eye_region_mass,degenerate\n");
            let mut per_class: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for s in m.split(a.split) {
                let img = load_crop(&s.image_path)?;
                let x = model.images_to_tensor(&[&img])?;
                let id = s.image_path.display().to_string();
                let map = gradcam_map(&model, &x, &layer, a.target_class, &id)?;
                let (spec, _) = params.spec_for(landmarks.get(&s.image_path));
                let mass = eye_region_mass(&map, &spec);
                writeln!(
                    rows,
                    "{},{},{},{},{mass:.6},{}",
                    csv_field(&id),
                    s.label,
                    map.target_class,
                    map.target_layer,
                    map.degenerate
                )?;
                let e = per_class.entry(s.label.to_string()).or_default();
                e.0 += mass;
                e.1 += 1;
                if let Some(dir) = &a.maps_dir {
                    let stem = s.image_path.file_stem().unwrap_or_default().to_string_lossy();
                    let name = format!("{}_{}_{stem}.png", s.label, s.source_video_id);
                    save_png(&map.to_rgb(), &dir.join(name))?;
                }
            }
            write_text(&csv_path, &rows)?;
            for (label, (sum, n)) in &per_class {
                println!("{label}: mean eye-region mass {:.4} over {n} maps", sum / *n as f64);
            }
            let mut artifacts = vec![csv_path.clone()];
            artifacts.extend(a.maps_dir.clone());
            prov.finish(artifacts, &record_path_for(&csv_path))
        }
        (None, None) => unreachable!("clap requires --image or --manifest"),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn export(a: ExportArgs) -> Result<()> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let prov = Provenance::start(
        "export",
        ck.meta.run_config_hash.clone().unwrap_or_else(|| ck.meta.config_hash.clone()),
        ck.meta.rng.seed,
    );
    let files = export_model(&model, &a.out)?;
    for f in &files {
        println!("{}", f.display());
    }
    prov.finish(files, &a.out.join("run.json"))
}

fn render_sweep(result: &SweepResult) -> String {
    let mut out = String::from("| w | Acc | F1 | AUC | |\n|---|---|---|---|---|\n");
    for row in &result.rows {
        let r = &row.report;
        let auc = r.auroc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mark = if row.w == result.best_w { "best" } else { "" };
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} | {auc} | {mark} |\n",
            row.w, r.accuracy, r.f1_macro
        ));
    }
    out
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let out = output_dir(&cfg, a.out, "sweep");
    let prov = Provenance::start("sweep-w", cfg.config_hash(), cfg.curriculum.seed);
    let manifests = cfg.load_manifests()?;
    let metrics = out.join("sweep_metrics.csv");
    if metrics.exists() {
        std::fs::remove_file(&metrics).with_context(|| format!("removing {}", metrics.display()))?;
    }
    let opts = deepguard::train::TrainOptions {
        metrics_log: Some(metrics.clone()),
        ..cfg.train_options(&out)
    };
    let result = sweep_w(&a.values, &cfg, &manifests, &opts)?;
    let table = render_sweep(&result);
    let table_path = out.join("sweep.md");
    let json_path = out.join("sweep.json");
    write_text(&table_path, &table)?;
    write_json(&json_path, &result)?;
    print!("{table}");
    println!("best w = {}", result.best_w);
    prov.finish(vec![table_path, json_path, metrics], &out.join("run.json"))
}
