//! `stats`: run-table comparison against a reference model.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use multidistill_core::stats::{compare_models, ComparisonReport, Direction, RunTable, TaskDefinition};
use multidistill_core::trainer::config_hash;
use multidistill_core::MetricReport;
use serde::{Deserialize, Serialize};

use crate::output::{read_toml, run_dir, to_json, write, Stamp};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsConfig {
    reference: String,
    tasks: Vec<TaskDefinition>,
}

/// One evaluated run in a `.jsonl` report table.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportLine {
    model: String,
    run: usize,
    task: String,
    metrics: BTreeMap<String, f64>,
    #[serde(default)]
    diagnostics: Vec<String>,
}

/// `.csv`/`.json` tables hold representative values already; `.jsonl` tables
/// hold metric reports reduced by each task's `metrics` list.
fn load_table(path: &Path, cfg: &StatsConfig) -> Result<RunTable> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ReportLine = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            entries.push((r.model, r.run, r.task, MetricReport { metrics: r.metrics, diagnostics: r.diagnostics }));
        }
        return Ok(RunTable::from_reports(&cfg.tasks, &entries)?);
    }
    if let Some(t) = cfg.tasks.iter().find(|t| !t.metrics.is_empty()) {
        bail!("task `{}`: `metrics` applies only to .jsonl report tables", t.name);
    }
    Ok(RunTable::load(path)?)
}

#[derive(Serialize)]
struct StatsOutput<'a> {
    #[serde(flatten)]
    stamp: Stamp,
    #[serde(flatten)]
    report: &'a ComparisonReport,
}

pub fn cmd_stats(table_path: &Path, config: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let cfg: StatsConfig = read_toml(config)?;
    let table = load_table(table_path, &cfg)?;
    let present = table.tasks();
    if let Some(t) = cfg.tasks.iter().find(|t| !present.contains(&t.name)) {
        bail!("task `{}` has no runs in {}", t.name, table_path.display());
    }
    let directions: BTreeMap<String, Direction> = cfg.tasks.iter().map(|t| (t.name.clone(), t.direction)).collect();
    let report = compare_models(&table, &cfg.reference, &directions)?;
    let hash = config_hash(&(&cfg, table.records()))?;
    let json = to_json(&StatsOutput { stamp: Stamp::new(hash), report: &report })?;
    if let Some(out) = out {
        let dir = run_dir(out, hash)?;
        write(&dir.join("report.json"), &json)?;
        write(&dir.join("ranks.csv"), report.ranks.to_csv())?;
    }
    print!("{json}");
    Ok(ExitCode::SUCCESS)
}
