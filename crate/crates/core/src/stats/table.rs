use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mean_rank, paired_t_test, summarize, wilcoxon_signed_rank, Direction, RankTable, Summary, TestResult};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// One representative metric value of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub model: String,
    pub task: String,
    pub run: usize,
    pub value: f64,
}

/// How a task's representative value is formed from a [`MetricReport`]:
/// the mean of the named metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefinition {
    pub name: String,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub direction: Direction,
}

impl TaskDefinition {
    pub fn representative(&self, report: &MetricReport) -> Result<f64> {
        if self.metrics.is_empty() {
            return Err(Error::Config(format!("task `{}` lists no metrics", self.name)));
        }
        let vals = self
            .metrics
            .iter()
            .map(|m| report.get(m).ok_or_else(|| Error::Data(format!("task `{}`: report lacks metric `{m}`", self.name))))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Models × tasks × runs of representative values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunTable {
    records: Vec<RunRecord>,
}

impl RunTable {
    pub fn new(records: Vec<RunRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.model.is_empty() || r.task.is_empty() {
                return Err(Error::Data("model and task names must be non-empty".into()));
            }
            if !r.value.is_finite() {
                return Err(Error::Data(format!("{}/{}/run {}: non-finite value", r.model, r.task, r.run)));
            }
            if !seen.insert((r.model.clone(), r.task.clone(), r.run)) {
                return Err(Error::Data(format!("duplicate run {} for {}/{}", r.run, r.model, r.task)));
            }
        }
        Ok(Self { records })
    }

    /// Builds the table from `(model, run, report)` entries for every task definition.
    pub fn from_reports(tasks: &[TaskDefinition], entries: &[(String, usize, String, MetricReport)]) -> Result<Self> {
        let defs: BTreeMap<&str, &TaskDefinition> = tasks.iter().map(|t| (t.name.as_str(), t)).collect();
        let records = entries
            .iter()
            .map(|(model, run, task, report)| {
                let def = defs.get(task.as_str()).ok_or_else(|| Error::Config(format!("no definition for task `{task}`")))?;
                Ok(RunRecord { model: model.clone(), task: task.clone(), run: *run, value: def.representative(report)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    fn ordered<'a>(&'a self, key: impl Fn(&'a RunRecord) -> &'a str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|x| x == key(r)) {
                out.push(key(r).to_string());
            }
        }
        out
    }

    /// Models in order of first appearance.
    pub fn models(&self) -> Vec<String> {
        self.ordered(|r| &r.model)
    }

    pub fn tasks(&self) -> Vec<String> {
        self.ordered(|r| &r.task)
    }

    /// `(run, value)` pairs of one cell, sorted by run index.
    pub fn cell(&self, model: &str, task: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> =
            self.records.iter().filter(|r| r.model == model && r.task == task).map(|r| (r.run, r.value)).collect();
        v.sort_by_key(|x| x.0);
        v
    }

    pub fn values(&self, model: &str, task: &str) -> Result<Vec<f64>> {
        let c = self.cell(model, task);
        if c.is_empty() {
            return Err(Error::Coverage { model: model.into(), task: task.into() });
        }
        Ok(c.into_iter().map(|x| x.1).collect())
    }

    pub fn cell_mean(&self, model: &str, task: &str) -> Result<f64> {
        let v = self.values(model, task)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Runs of two models on one task, aligned by run index.
    pub fn paired(&self, a: &str, b: &str, task: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ca, cb) = (self.cell(a, task), self.cell(b, task));
        for (m, c) in [(a, &ca), (b, &cb)] {
            if c.is_empty() {
                return Err(Error::Coverage { model: m.into(), task: task.into() });
            }
        }
        let ia: Vec<usize> = ca.iter().map(|x| x.0).collect();
        let ib: Vec<usize> = cb.iter().map(|x| x.0).collect();
        if ia != ib {
            return Err(Error::Data(format!("task `{task}`: runs of `{a}` {ia:?} and `{b}` {ib:?} are not aligned")));
        }
        Ok((ca.into_iter().map(|x| x.1).collect(), cb.into_iter().map(|x| x.1).collect()))
    }

    /// Mean-rank table over cell means.
    pub fn rank(&self, directions: &BTreeMap<String, Direction>) -> Result<RankTable> {
        let models = self.models();
        let tasks = self.tasks();
        let values = models
            .iter()
            .map(|m| tasks.iter().map(|t| self.cell_mean(m, t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let dirs = tasks.iter().map(|t| direction_of(directions, t)).collect::<Result<Vec<_>>>()?;
        Ok(mean_rank(&models, &tasks, &values, &dirs))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>()?;
        Self::new(records)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads `.csv` or `.json` (an array of records) by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Self::read_csv(file),
            Some("json") => Self::new(serde_json::from_reader::<_, Vec<RunRecord>>(std::io::BufReader::new(file))?),
            _ => Err(Error::Format(format!("{}: expected a .csv or .json run table", path.display()))),
        }
    }
}

fn direction_of(directions: &BTreeMap<String, Direction>, task: &str) -> Result<Direction> {
    directions.get(task).copied().ok_or_else(|| Error::Config(format!("no direction given for task `{task}`")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: String,
    pub direction: Direction,
    pub summaries: BTreeMap<String, Summary>,
    /// Paired t-test of the reference against each other model.
    pub t_tests: BTreeMap<String, TestResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model: String,
    /// Wilcoxon test on task-level means, oriented so that a positive
    /// difference favours the reference.
    pub wilcoxon: TestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub tasks: Vec<TaskComparison>,
    pub baselines: Vec<ModelComparison>,
    pub ranks: RankTable,
}

/// Summaries, per-task paired t-tests and cross-task Wilcoxon tests of
/// `reference` against every other model, plus the rank table.
pub fn compare_models(table: &RunTable, reference: &str, directions: &BTreeMap<String, Direction>) -> Result<ComparisonReport> {
    let models = table.models();
    if !models.iter().any(|m| m == reference) {
        return Err(Error::Config(format!("reference model `{reference}` is not in the run table")));
    }
    let ranks = table.rank(directions)?;
    let mut tasks = Vec::new();
    for task in table.tasks() {
        let direction = direction_of(directions, &task)?;
        let mut summaries = BTreeMap::new();
        for m in &models {
            summaries.insert(m.clone(), summarize(&table.values(m, &task)?)?);
        }
        let mut t_tests = BTreeMap::new();
        for m in models.iter().filter(|m| *m != reference) {
            let (a, b) = table.paired(reference, m, &task)?;
            t_tests.insert(m.clone(), paired_t_test(&a, &b)?);
        }
        tasks.push(TaskComparison { task, direction, summaries, t_tests });
    }
    let mut baselines = Vec::new();
    for m in models.iter().filter(|m| *m != reference) {
        let mut ours = Vec::new();
        let mut theirs = Vec::new();
        for t in &tasks {
            let sign = if t.direction == Direction::HigherBetter { 1.0 } else { -1.0 };
            ours.push(sign * table.cell_mean(reference, &t.task)?);
            theirs.push(sign * table.cell_mean(m, &t.task)?);
        }
        baselines.push(ModelComparison { model: m.clone(), wilcoxon: wilcoxon_signed_rank(&ours, &theirs)? });
    }
    Ok(ComparisonReport { reference: reference.to_string(), tasks, baselines, ranks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, task: &str, run: usize, value: f64) -> RunRecord {
        RunRecord { model: model.into(), task: task.into(), run, value }
    }

    fn table() -> RunTable {
        let mut r = Vec::new();
        for run in 0..5 {
            let x = run as f64 * 0.01;
            r.push(rec("zen", "phase", run, 0.80 + x));
            r.push(rec("base", "phase", run, 0.70 + x * 1.5));
            r.push(rec("zen", "depth", run, 0.10 - x));
            r.push(rec("base", "depth", run, 0.20 - x * 0.5));
        }
        RunTable::new(r).unwrap()
    }

    fn dirs() -> BTreeMap<String, Direction> {
        [("phase".to_string(), Direction::HigherBetter), ("depth".to_string(), Direction::LowerBetter)].into()
    }

    #[test]
    fn comparison_report() {
        let rep = compare_models(&table(), "zen", &dirs()).unwrap();
        assert_eq!(rep.ranks.mean_rank, vec![1.0, 2.0]);
        assert_eq!(rep.tasks.len(), 2);
        assert!(rep.tasks[0].t_tests["base"].p_value < 0.01);
        // Two tasks, both favouring zen: exact p = 2/4.
        assert_eq!(rep.baselines[0].wilcoxon.p_value, 0.5);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"ci95\""));
    }

    #[test]
    fn missing_cell_is_a_coverage_error() {
        let mut r = table().records().to_vec();
        r.retain(|x| !(x.model == "base" && x.task == "depth"));
        let t = RunTable::new(r).unwrap();
        match t.rank(&dirs()) {
            Err(Error::Coverage { model, task }) => assert_eq!((model.as_str(), task.as_str()), ("base", "depth")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn misaligned_runs_are_rejected() {
        let mut r = table().records().to_vec();
        r.iter_mut().filter(|x| x.model == "base").for_each(|x| x.run += 1);
        let t = RunTable::new(r).unwrap();
        assert!(t.paired("zen", "base", "phase").is_err());
    }

    #[test]
    fn duplicates_and_missing_directions() {
        assert!(RunTable::new(vec![rec("a", "t", 0, 1.0), rec("a", "t", 0, 2.0)]).is_err());
        let mut d = dirs();
        d.remove("depth");
        assert!(matches!(table().rank(&d), Err(Error::Config(_))));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("model,task,run,value\n"));
        assert_eq!(RunTable::read_csv(buf.as_slice()).unwrap(), t);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<RunTable>(&json).unwrap(), t);
    }

    #[test]
    fn representative_values() {
        let mut rep = MetricReport::default();
        rep.insert("video_macro_f1", 0.6);
        rep.insert("video_accuracy", 0.8);
        let def = TaskDefinition { name: "phase".into(), metrics: vec!["video_macro_f1".into(), "video_accuracy".into()], direction: Direction::HigherBetter };
        assert!((def.representative(&rep).unwrap() - 0.7).abs() < 1e-15);
        let t = RunTable::from_reports(std::slice::from_ref(&def), &[("zen".into(), 0, "phase".into(), rep.clone())]).unwrap();
        assert_eq!(t.values("zen", "phase").unwrap().len(), 1);
        let bad = TaskDefinition { metrics: vec!["missing".into()], ..def };
        assert!(bad.representative(&rep).is_err());
    }
}
