//! Run reports recomputed from logs, plus the USR-vs-round plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::metrics::{answer_report, faithfulness_metrics, AnswerReport, FaithfulnessReport, TrajectorySummary};
use crate::eval::pipeline::{AuditLogEntry, Mode, RunRecord, TaskStatus, MAX_FAILED_SHARE};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Decode {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} holds no records")]
    Empty(String),
    #[error("records mix modes {0} and {1}")]
    MixedModes(Mode, Mode),
}

pub const POST_RES_UNIT: &str = "mean residual violations per trajectory that ran at least one repair round";

/// Aggregate report of one run. Faithfulness metrics cover the committed
/// trajectory of each successful task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub n_tasks: usize,
    pub n_failed: usize,
    /// More than the tolerated share of tasks failed.
    pub run_failed: bool,
    /// Over successful tasks with gold answers.
    pub answers: Option<AnswerReport>,
    /// Absent when no task produced an audited trajectory.
    pub faithfulness: Option<FaithfulnessReport>,
    pub post_res_unit: String,
}

pub fn report_from_records(mode: Mode, records: &[RunRecord]) -> RunReport {
    let n_failed = records.iter().filter(|r| r.status == TaskStatus::Failed).count();
    let ok = records.iter().filter(|r| r.status == TaskStatus::Ok);
    let scores: Vec<(u8, f64)> = ok.clone().filter_map(|r| Some((r.em?, r.f1?))).collect();
    let summaries: Vec<TrajectorySummary> = ok.filter_map(|r| r.summary).collect();
    RunReport {
        mode,
        n_tasks: records.len(),
        n_failed,
        run_failed: !records.is_empty() && n_failed as f64 / records.len() as f64 > MAX_FAILED_SHARE,
        answers: (!scores.is_empty()).then(|| answer_report(&scores)),
        faithfulness: faithfulness_metrics(&summaries).ok(),
        post_res_unit: POST_RES_UNIT.to_string(),
    }
}

/// Two-column `metric,value` table; absent metrics are left empty.
pub fn write_report_csv(out: impl io::Write, report: &RunReport) -> csv::Result<()> {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let a = report.answers;
    let f = report.faithfulness;
    let rows: [(&str, String); 10] = [
        ("mode", report.mode.to_string()),
        ("n_tasks", report.n_tasks.to_string()),
        ("n_failed", report.n_failed.to_string()),
        ("em", opt(a.map(|a| a.em))),
        ("f1", opt(a.map(|a| a.f1))),
        ("avg_viol", opt(f.map(|f| f.avg_viol))),
        ("vfr", opt(f.map(|f| f.vfr))),
        ("usr", opt(f.map(|f| f.usr))),
        ("post_res", opt(f.and_then(|f| f.post_res))),
        ("n_trajectories", f.map(|f| f.n_trajectories.to_string()).unwrap_or_default()),
    ];
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = fs::File::open(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ReportError::Decode {
            path: path.display().to_string(),
            line: n + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Report of a finished run directory, from its `runs.jsonl`.
pub fn report_from_run_dir(dir: &Path) -> Result<RunReport, ReportError> {
    let path = dir.join(crate::eval::pipeline::RUNS_FILE);
    let records: Vec<RunRecord> = read_jsonl(&path)?;
    let mode = records
        .first()
        .map(|r| r.mode)
        .ok_or_else(|| ReportError::Empty(path.display().to_string()))?;
    if let Some(r) = records.iter().find(|r| r.mode != mode) {
        return Err(ReportError::MixedModes(mode, r.mode));
    }
    Ok(report_from_records(mode, &records))
}

/// Mean USR per audit round across all logged beliefs. A belief whose loop
/// ended early keeps its last value for the later rounds.
pub fn usr_by_round(entries: &[AuditLogEntry]) -> Vec<f64> {
    let mut curves: BTreeMap<(&str, &str), BTreeMap<usize, f64>> = BTreeMap::new();
    for e in entries {
        curves
            .entry((e.task_id.as_str(), e.belief.as_str()))
            .or_default()
            .insert(e.trace.round, e.trace.usr);
    }
    let rounds = curves
        .values()
        .filter_map(|c| c.keys().next_back().copied())
        .max()
        .unwrap_or(0);
    if curves.is_empty() {
        return vec![];
    }
    (1..=rounds)
        .map(|r| {
            let total: f64 = curves
                .values()
                .map(|c| c.range(..=r).next_back().map(|(_, &u)| u).unwrap_or(0.0))
                .sum();
            total / curves.len() as f64
        })
        .collect()
}

/// Line chart of `usr[r-1]` against round `r`.
pub fn usr_svg(usr: &[f64], title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let n = usr.len().max(1);
    let top = usr.iter().copied().fold(0.0f64, f64::max).max(1e-9);
    let x = |i: usize| {
        if n == 1 {
            PAD + (W - 2.0 * PAD) / 2.0
        } else {
            PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64
        }
    };
    let y = |u: f64| H - PAD - (H - 2.0 * PAD) * u / top;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">round</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">USR</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{top:.3}</text>"#,
        PAD - 4.0,
        y1 + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">0</text>"#,
        PAD - 4.0,
        y0 + 4.0
    );
    let points: Vec<String> = usr
        .iter()
        .enumerate()
        .map(|(i, &u)| format!("{:.2},{:.2}", x(i), y(u)))
        .collect();
    if !points.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
    }
    for (i, &u) in usr.iter().enumerate() {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, x(i), y(u));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{}</text>"#,
            x(i),
            y0 + 16.0,
            i + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
