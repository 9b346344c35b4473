//! `distill`, `grad-check` and `data-gen`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use log::info;
use multidistill_core::data::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use multidistill_core::distill::{DistillConfig, LossReport};
use multidistill_core::tensor::GradCheckReport;
use multidistill_core::trainer::{
    config_hash, run_grad_check, train_distill, DistillSetup, GradCheckConfig, GRAD_CHECK_TOLERANCE,
};
use multidistill_core::{Tensor, TeacherSpec, TrainConfig, ViTConfig};
use serde::{Deserialize, Serialize};

use crate::output::{hex, read_toml, run_dir, to_json, write, Stamp};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistillFile {
    /// Preset name or a full encoder table.
    model: toml::Value,
    /// Preset name or an array of teacher tables.
    teachers: toml::Value,
    #[serde(default)]
    distill: DistillConfig,
    train: TrainConfig,
    data: DataSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
    /// Dataset written by `data-gen`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dir: Option<PathBuf>,
}

/// Everything that determines a distillation run; its hash names the output directory.
#[derive(Serialize)]
struct ResolvedDistill {
    setup: DistillSetup,
    train: TrainConfig,
    data: DataSection,
    /// Content hash of the loaded frames when they come from disk.
    #[serde(skip_serializing_if = "Option::is_none")]
    data_fingerprint: Option<String>,
}

fn resolve_model(v: toml::Value) -> Result<ViTConfig> {
    match v {
        toml::Value::String(name) => Ok(ViTConfig::preset(&name)?),
        other => other.try_into().context("model"),
    }
}

fn resolve_teachers(v: toml::Value) -> Result<Vec<TeacherSpec>> {
    match v {
        toml::Value::String(name) => match name.as_str() {
            "desk" => Ok(vec![TeacherSpec::desk_vision(), TeacherSpec::desk_vision_language()]),
            "grad-check" => Ok(vec![TeacherSpec::grad_check_vision(), TeacherSpec::grad_check_vision_language()]),
            "full" => Ok(vec![TeacherSpec::vision_large(), TeacherSpec::vision_language_full()]),
            other => bail!("teachers: unknown preset `{other}` (expected desk, grad-check or full)"),
        },
        other => other.try_into().context("teachers"),
    }
}

fn load_images(data: &DataSection, base: &Path) -> Result<(Vec<Tensor>, Option<String>)> {
    match (&data.synthetic, data.count, &data.dir) {
        (Some(spec), Some(count), None) => Ok((generate_synthetic(spec, count)?.images, None)),
        (None, None, Some(dir)) => {
            let path = base.join(dir);
            let ds = SyntheticDataset::read(&path).with_context(|| format!("data.dir {}", path.display()))?;
            let bytes: Vec<Vec<u8>> = ds.images.iter().map(Tensor::to_bytes).collect();
            Ok((ds.images, Some(hex(config_hash(&bytes)?))))
        }
        _ => bail!("data: give either `synthetic` with `count`, or `dir`"),
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    stamp: &'a Stamp,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Serialize)]
struct DistillSummary<'a> {
    #[serde(flatten)]
    stamp: Stamp,
    /// Hash stored in the checkpoint header (student, teachers, loss and training settings).
    trainer_hash: String,
    steps: usize,
    images: usize,
    initial_total: f64,
    final_total: f64,
    checkpoint_sha256: String,
    encoder_hash: String,
    config: &'a ResolvedDistill,
}

pub fn cmd_distill(config: &Path, out: &Path) -> Result<ExitCode> {
    let file: DistillFile = read_toml(config)?;
    let setup = DistillSetup { student: resolve_model(file.model)?, teachers: resolve_teachers(file.teachers)?, distill: file.distill };
    setup.validate().context("invalid config")?;
    file.train.validate().context("invalid config: train")?;
    let base = config.parent().unwrap_or(Path::new("."));
    let (images, data_fingerprint) = load_images(&file.data, base)?;
    let s = &setup.student;
    let want = [s.in_channels, s.image_size, s.image_size];
    if let Some(bad) = images.iter().find(|t| t.shape() != want) {
        bail!("data: frame shape {:?} does not match the model input {want:?}", bad.shape());
    }
    let resolved = ResolvedDistill { setup, train: file.train, data: file.data, data_fingerprint };
    let hash = config_hash(&resolved)?;
    let dir = run_dir(out, hash)?;
    info!("distilling {} frames into {}", images.len(), dir.display());

    let n = images.len();
    let (ckpt, log) = train_distill(resolved.setup.clone(), resolved.train.clone(), images)?;
    let stamp = Stamp::new(hash);
    ckpt.save(&dir.join("checkpoint.mdck"))?;
    let mut lines = String::new();
    for report in &log {
        lines.push_str(&serde_json::to_string(&LogLine { stamp: &stamp, report })?);
        lines.push('\n');
    }
    write(&dir.join("log.jsonl"), lines)?;
    let summary = DistillSummary {
        stamp,
        trainer_hash: hex(ckpt.config_hash),
        steps: log.len(),
        images: n,
        initial_total: log.first().map_or(f64::NAN, |r| r.total),
        final_total: log.last().map_or(f64::NAN, |r| r.total),
        checkpoint_sha256: ckpt.file_hash(),
        encoder_hash: ckpt.encoder_hash(),
        config: &resolved,
    };
    write(&dir.join("summary.json"), to_json(&summary)?)?;
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GradCheckOutput {
    #[serde(flatten)]
    stamp: Stamp,
    tolerance: f64,
    passed: bool,
    report: GradCheckReport,
}

pub fn cmd_grad_check(config: &Path) -> Result<ExitCode> {
    let cfg: GradCheckConfig = read_toml(config)?;
    let hash = config_hash(&cfg)?;
    let report = run_grad_check(&cfg)?;
    let passed = report.max_rel_error < GRAD_CHECK_TOLERANCE;
    print!("{}", to_json(&GradCheckOutput { stamp: Stamp::new(hash), tolerance: GRAD_CHECK_TOLERANCE, passed, report })?);
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataGenSpec {
    count: usize,
    synthetic: SyntheticSpec,
}

#[derive(Serialize)]
struct DataGenMeta<'a> {
    #[serde(flatten)]
    stamp: Stamp,
    spec: &'a DataGenSpec,
}

pub fn cmd_data_gen(spec_path: &Path, out: &Path) -> Result<ExitCode> {
    let spec: DataGenSpec = read_toml(spec_path)?;
    if spec.count == 0 {
        bail!("count must be positive");
    }
    let hash = config_hash(&spec)?;
    let ds = generate_synthetic(&spec.synthetic, spec.count)?;
    let dir = run_dir(out, hash)?;
    ds.write(&dir)?;
    write(&dir.join("meta.json"), to_json(&DataGenMeta { stamp: Stamp::new(hash), spec: &spec })?)?;
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}
