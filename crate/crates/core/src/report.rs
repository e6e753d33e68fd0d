//! Run artifacts: `metrics.csv`, `summary.json`, `manifest.json`,
//! `matrix.csv`, `steps.csv` and per-metric `plotdata/` series.

use crate::config::{ConfigError, RunConfig, Seeds};
use crate::metrics::{as_percent, kar, MetricsRecord};
use crate::scheduler::{RunResult, Totals};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const METRICS_COLUMNS: [&str; 11] = [
    "t",
    "em",
    "bwt",
    "fwt",
    "kar",
    "kg_alignment",
    "kg_forgetting",
    "kg_updating",
    "tokens_trained",
    "train_time_s",
    "discarded_items",
];

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn write(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(path).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgSummary {
    pub alignment: f64,
    pub forgetting: f64,
    pub updating: f64,
}

/// Percent-scaled copies of the headline metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayMetrics {
    pub em: f64,
    pub last_task_em: f64,
    pub mean_task_em: f64,
    pub bwt: f64,
    pub fwt: f64,
    /// Rate computed from the percent-scaled transfer metrics.
    pub kar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    /// EM of the final model on the QA of every seen task.
    pub em: f64,
    /// Post-training EM on the last task alone.
    pub last_task_em: f64,
    /// Mean of the per-step post-training EM values.
    pub mean_task_em: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub kar: f64,
    pub kg: KgSummary,
    pub kar_tokens: u64,
    pub totals: Totals,
    pub display: DisplayMetrics,
}

impl Summary {
    pub fn from_result(r: &RunResult) -> Self {
        let last = r.last();
        let kar_tokens = last_kar_tokens(r);
        let kar_pct = if r.totals.train_time_s > 0.0 {
            kar(as_percent(last.fwt), as_percent(last.bwt), kar_tokens as f64, r.totals.train_time_s).unwrap_or(0.0)
        } else {
            0.0
        };
        Self {
            steps: r.records.len(),
            em: r.final_em_seen,
            last_task_em: last.em,
            mean_task_em: r.mean_em(),
            bwt: last.bwt,
            fwt: last.fwt,
            kar: last.kar,
            kg: KgSummary {
                alignment: last.kg_alignment,
                forgetting: last.kg_forgetting,
                updating: last.kg_updating,
            },
            kar_tokens,
            totals: r.totals.clone(),
            display: DisplayMetrics {
                em: as_percent(r.final_em_seen),
                last_task_em: as_percent(last.em),
                mean_task_em: as_percent(r.mean_em()),
                bwt: as_percent(last.bwt),
                fwt: as_percent(last.fwt),
                kar: kar_pct,
            },
        }
    }
}

fn last_kar_tokens(r: &RunResult) -> u64 {
    match r.config.token_accounting {
        crate::config::TokenAccounting::Trained => r.totals.tokens_trained,
        crate::config::TokenAccounting::Arrived => r.totals.tokens_arrived,
    }
}

/// Everything needed to rerun a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: Seeds,
}

impl Manifest {
    pub fn for_config(config: &RunConfig) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool: "ockl".into(),
            tool_version: crate::VERSION.into(),
            config: config.clone(),
            seeds: config.seeds(),
        }
    }
}

/// Reads a run config, accepting either a bare config or a `manifest.json`.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(&text) {
        if m.contains_key("manifest_version") {
            let inner = m.get("config").cloned().unwrap_or(Value::Null);
            return Ok(RunConfig::from_json(&inner.to_string())?);
        }
    }
    Ok(RunConfig::from_json(&text)?)
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.em,
            r.bwt,
            r.fwt,
            r.kar,
            r.kg_alignment,
            r.kg_forgetting,
            r.kg_updating,
            r.tokens_trained,
            r.train_time_s,
            r.discarded_items
        );
    }
    out
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> ReportError {
    ReportError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_COLUMNS.join(",").as_str()) {
        return Err(parse_err(path, 1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != METRICS_COLUMNS.len() {
            return Err(parse_err(path, n, format!("expected {} fields", METRICS_COLUMNS.len())));
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|e| parse_err(path, n, format!("{}: {e}", METRICS_COLUMNS[j])));
        let int = |j: usize| f[j].parse::<u64>().map_err(|e| parse_err(path, n, format!("{}: {e}", METRICS_COLUMNS[j])));
        out.push(MetricsRecord {
            t: int(0)? as usize,
            em: num(1)?,
            bwt: num(2)?,
            fwt: num(3)?,
            kar: num(4)?,
            kg_alignment: num(5)?,
            kg_forgetting: num(6)?,
            kg_updating: num(7)?,
            tokens_trained: int(8)?,
            train_time_s: num(9)?,
            discarded_items: int(10)? as usize,
        });
    }
    Ok(out)
}

fn column(r: &MetricsRecord, name: &str) -> String {
    match name {
        "t" => r.t.to_string(),
        "em" => r.em.to_string(),
        "bwt" => r.bwt.to_string(),
        "fwt" => r.fwt.to_string(),
        "kar" => r.kar.to_string(),
        "kg_alignment" => r.kg_alignment.to_string(),
        "kg_forgetting" => r.kg_forgetting.to_string(),
        "kg_updating" => r.kg_updating.to_string(),
        "tokens_trained" => r.tokens_trained.to_string(),
        "train_time_s" => r.train_time_s.to_string(),
        "discarded_items" => r.discarded_items.to_string(),
        other => unreachable!("unknown column {other}"),
    }
}

/// Writes one `t,<metric>` series per metric under `dir/plotdata`.
pub fn write_plotdata(records: &[MetricsRecord], dir: &Path) -> Result<(), ReportError> {
    let plot = dir.join("plotdata");
    mkdir(&plot)?;
    for name in &METRICS_COLUMNS[1..] {
        let mut s = format!("t,{name}\n");
        for r in records {
            let _ = writeln!(s, "{},{}", r.t, column(r, name));
        }
        write(&plot.join(format!("{name}.csv")), &s)?;
    }
    Ok(())
}

fn matrix_csv(r: &RunResult) -> String {
    let mut s = String::from("model_step,task,em\n");
    for ((i, j), v) in r.matrix.iter() {
        let _ = writeln!(s, "{i},{j},{v}");
    }
    s
}

fn steps_csv(r: &RunResult) -> String {
    let mut s = String::from(
        "t,items_arrived,items_selected_out,items_discarded,items_trained,tokens_arrived,tokens_selected_out,\
         tokens_discarded,tokens_trained,tokens_replayed,budget_s,selection_cost_s,time_s\n",
    );
    for a in &r.steps {
        let budget = a.budget_s.map(|b| b.to_string()).unwrap_or_else(|| "inf".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.t,
            a.items_arrived,
            a.items_selected_out,
            a.items_discarded,
            a.items_trained,
            a.tokens_arrived,
            a.tokens_selected_out,
            a.tokens_discarded,
            a.tokens_trained,
            a.tokens_replayed,
            budget,
            a.selection_cost_s,
            a.time_s
        );
    }
    s
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Writes all run artifacts into `dir` and returns the summary.
pub fn summarize_run(result: &RunResult, dir: &Path) -> Result<Summary, ReportError> {
    mkdir(dir)?;
    let summary = Summary::from_result(result);
    write(&dir.join("metrics.csv"), &metrics_csv(&result.records))?;
    write(&dir.join("summary.json"), &to_pretty_json(&summary))?;
    write(&dir.join("manifest.json"), &to_pretty_json(&Manifest::for_config(&result.config)))?;
    write(&dir.join("matrix.csv"), &matrix_csv(result))?;
    write(&dir.join("steps.csv"), &steps_csv(result))?;
    write_plotdata(&result.records, dir)?;
    Ok(summary)
}

/// One sweep cell's outcome.
pub struct SweepCell {
    pub label: String,
    pub outcome: Result<Summary, String>,
}

/// CSV comparison of EM, BWT, FWT and KAR across sweep cells.
pub fn comparison_table(axis: &str, cells: &[SweepCell]) -> String {
    let mut s = format!("{axis},em,last_task_em,mean_task_em,bwt,fwt,kar,status\n");
    for c in cells {
        match &c.outcome {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},ok",
                    c.label, m.em, m.last_task_em, m.mean_task_em, m.bwt, m.fwt, m.kar
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{},,,,,,,\"error: {}\"", c.label, e.replace('"', "'"));
            }
        }
    }
    s
}

/// Human-readable table of per-step metrics.
pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut s = format!(
        "{:>4} {:>8} {:>8} {:>8} {:>10} {:>8} {:>8} {:>8} {:>8}\n",
        "t", "em", "bwt", "fwt", "kar", "kg_al", "kg_fo", "kg_up", "discard"
    );
    for r in records {
        let _ = writeln!(
            s,
            "{:>4} {:>8.4} {:>8.4} {:>8.4} {:>10.3} {:>8.4} {:>8.4} {:>8.4} {:>8}",
            r.t, r.em, r.bwt, r.fwt, r.kar, r.kg_alignment, r.kg_forgetting, r.kg_updating, r.discarded_items
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize) -> MetricsRecord {
        MetricsRecord {
            t,
            em: 0.1 * t as f64,
            bwt: -0.0,
            fwt: 1.0 / 3.0,
            kar: 12.5,
            kg_alignment: 0.5,
            kg_forgetting: 0.0,
            kg_updating: 1e-17,
            tokens_trained: 40 * t as u64,
            train_time_s: 0.1 + 0.2,
            discarded_items: 3,
        }
    }

    #[test]
    fn metrics_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<MetricsRecord> = (1..=5).map(rec).collect();
        let csv = metrics_csv(&records);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("t,em,bwt,fwt,kar,kg_alignment,kg_forgetting,kg_updating,tokens_trained,train_time_s,discarded_items\n"));
        let path = dir.path().join("metrics.csv");
        fs::write(&path, &csv).unwrap();
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(a.fwt.to_bits(), b.fwt.to_bits());
            assert_eq!(a.train_time_s.to_bits(), b.train_time_s.to_bits());
        }
    }

    #[test]
    fn plotdata_has_one_file_per_metric() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<MetricsRecord> = (1..=3).map(rec).collect();
        write_plotdata(&records, dir.path()).unwrap();
        for name in &METRICS_COLUMNS[1..] {
            let s = fs::read_to_string(dir.path().join("plotdata").join(format!("{name}.csv"))).unwrap();
            assert_eq!(s.lines().count(), 4, "{name}");
            assert!(s.starts_with(&format!("t,{name}\n")));
        }
    }

    #[test]
    fn bad_metrics_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(ReportError::Parse { line: 1, .. })));
    }

    #[test]
    fn comparison_table_reports_failures() {
        let cells = vec![SweepCell {
            label: "0.5".into(),
            outcome: Err("boom \"x\"".into()),
        }];
        let t = comparison_table("ratio", &cells);
        assert_eq!(t.lines().nth(1).unwrap(), "0.5,,,,,,,\"error: boom 'x'\"");
    }
}
