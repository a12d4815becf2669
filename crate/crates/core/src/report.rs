//! Plot-ready tables over a directory of run reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costing::Dollars;
use crate::orchestrator::{RunReport, REPORT_FORMAT};

pub const TABLE_VERSION: u32 = 1;
pub const REPORT_SUFFIX: &str = ".report.json";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no run reports found in {0}")]
    NoReports(PathBuf),
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Reads every `*.report.json` in `dir`, sorted by file name.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>, ReportError> {
    let io = |source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(REPORT_SUFFIX)))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|source| ReportError::Io {
            path: path.clone(),
            source,
        })?;
        let report: RunReport = serde_json::from_str(&text).map_err(|e| ReportError::Invalid {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if report.format != REPORT_FORMAT {
            return Err(ReportError::Invalid {
                path,
                reason: format!("unexpected format `{}`", report.format),
            });
        }
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(ReportError::NoReports(dir.to_path_buf()));
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub mode: String,
    pub symptom: String,
    pub step: usize,
    pub epoch: u32,
    pub round: u32,
    pub action: String,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub best_score: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: String,
    pub measure: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcrRow {
    pub mode: String,
    /// A symptom name, or `mean` for the per-mode average.
    pub symptom: String,
    pub score: Option<f64>,
    pub cost_per_note: Option<Dollars>,
    pub pcr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub version: u32,
    pub trajectories: Vec<TrajectoryRow>,
    pub summary: Vec<SummaryRow>,
    pub pcr: Vec<PcrRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type Measure = (&'static str, fn(&RunReport) -> f64);

const MEASURES: [Measure; 12] = [
    ("train_initial_accuracy", |r| r.baseline.accuracy),
    ("train_best_accuracy", |r| r.best.train_score.accuracy),
    ("train_initial_macro_f1", |r| r.baseline.macro_f1),
    ("train_best_macro_f1", |r| r.best.train_score.macro_f1),
    ("test_initial_accuracy", |r| r.test.initial.score.accuracy),
    ("test_refined_accuracy", |r| r.test.refined.score.accuracy),
    ("test_initial_macro_f1", |r| r.test.initial.score.macro_f1),
    ("test_refined_macro_f1", |r| r.test.refined.score.macro_f1),
    ("test_initial_cost_per_note", |r| r.test.initial.cost_per_note.to_f64()),
    ("test_refined_cost_per_note", |r| r.test.refined.cost_per_note.to_f64()),
    ("run_dollars", |r| r.cost.total.dollars.to_f64()),
    ("rounds", |r| (r.rounds.len() - 1) as f64),
];

/// Groups by mode (in first-seen order), symptoms sorted within a mode.
pub fn build_tables(reports: &[RunReport]) -> Tables {
    let mut modes: Vec<String> = Vec::new();
    for r in reports {
        let m = r.config.mode.to_string();
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    modes.sort();
    let mut trajectories = Vec::new();
    let mut summary = Vec::new();
    let mut pcr = Vec::new();
    for mode in &modes {
        let mut group: Vec<&RunReport> = reports.iter().filter(|r| r.config.mode.to_string() == *mode).collect();
        group.sort_by(|a, b| a.config.symptom.cmp(&b.config.symptom));
        for r in &group {
            for (step, round) in r.rounds.iter().enumerate() {
                trajectories.push(TrajectoryRow {
                    mode: mode.clone(),
                    symptom: r.config.symptom.clone(),
                    step,
                    epoch: round.epoch,
                    round: round.round,
                    action: round
                        .action
                        .map(|a| a.token().trim_start_matches('@').to_string())
                        .unwrap_or_else(|| "baseline".into()),
                    accuracy: round.score.map(|s| s.accuracy),
                    macro_f1: round.score.map(|s| s.macro_f1),
                    best_score: round.best_score,
                    improved: round.improved,
                });
            }
        }
        for (name, f) in MEASURES {
            let values: Vec<f64> = group.iter().map(|r| f(r)).collect();
            let (mean, std) = mean_std(&values);
            summary.push(SummaryRow {
                mode: mode.clone(),
                measure: name.to_string(),
                mean,
                std,
                n: values.len(),
            });
        }
        let mut ratios = Vec::new();
        for r in &group {
            let refined = &r.test.refined;
            pcr.push(PcrRow {
                mode: mode.clone(),
                symptom: r.config.symptom.clone(),
                score: Some(refined.score.metric(r.config.primary_metric)),
                cost_per_note: Some(refined.cost_per_note),
                pcr: r.pcr,
            });
            ratios.extend(r.pcr);
        }
        pcr.push(PcrRow {
            mode: mode.clone(),
            symptom: "mean".into(),
            score: None,
            cost_per_note: None,
            pcr: (!ratios.is_empty()).then(|| mean_std(&ratios).0),
        });
    }
    Tables {
        version: TABLE_VERSION,
        trajectories,
        summary,
        pcr,
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn write_csv<T, F>(out: &mut String, name: &str, header: &[&str], rows: &[T], cells: F)
where
    F: Fn(&T) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(cells(row)).expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    let _ = writeln!(out, "# {name} v{TABLE_VERSION}");
    out.push_str(&String::from_utf8(bytes).expect("utf-8 csv"));
}

pub fn trajectories_csv(tables: &Tables) -> String {
    let mut out = String::new();
    write_csv(
        &mut out,
        "trajectories",
        &["mode", "symptom", "step", "epoch", "round", "action", "accuracy", "macro_f1", "best_score", "improved"],
        &tables.trajectories,
        |r| {
            vec![
                r.mode.clone(),
                r.symptom.clone(),
                r.step.to_string(),
                r.epoch.to_string(),
                r.round.to_string(),
                r.action.clone(),
                opt(&r.accuracy),
                opt(&r.macro_f1),
                r.best_score.to_string(),
                r.improved.to_string(),
            ]
        },
    );
    out
}

pub fn summary_csv(tables: &Tables) -> String {
    let mut out = String::new();
    write_csv(&mut out, "summary", &["mode", "measure", "mean", "std", "n"], &tables.summary, |r| {
        vec![r.mode.clone(), r.measure.clone(), r.mean.to_string(), r.std.to_string(), r.n.to_string()]
    });
    out
}

pub fn pcr_csv(tables: &Tables) -> String {
    let mut out = String::new();
    write_csv(&mut out, "pcr", &["mode", "symptom", "score", "cost_per_note", "pcr"], &tables.pcr, |r| {
        vec![r.mode.clone(), r.symptom.clone(), opt(&r.score), opt(&r.cost_per_note), opt(&r.pcr)]
    });
    out
}

/// All three tables, each preceded by a `# name vN` line and separated by
/// a blank line.
pub fn tables_csv(tables: &Tables) -> String {
    [trajectories_csv(tables), summary_csv(tables), pcr_csv(tables)].join("\n")
}
