//! Answer accuracy and faithfulness metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower-case, drop ASCII punctuation, drop articles, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_one(prediction: &str, gold: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Exact match (0 or 1) and the best token F1 over the gold answers.
pub fn em_f1(prediction: &str, golds: &[String]) -> (u8, f64) {
    let pred = normalize_answer(prediction);
    let mut em = 0;
    let mut f1: f64 = 0.0;
    for g in golds {
        let g = normalize_answer(g);
        if pred == g {
            em = 1;
        }
        f1 = f1.max(f1_one(&pred, &g));
    }
    (em, f1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerReport {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

pub fn answer_report(scores: &[(u8, f64)]) -> AnswerReport {
    if scores.is_empty() {
        return AnswerReport::default();
    }
    let n = scores.len() as f64;
    AnswerReport {
        em: scores.iter().map(|s| s.0 as f64).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.1).sum::<f64>() / n,
        n: scores.len(),
    }
}

/// Final audit of one committed trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub violations: usize,
    pub flagged_steps: usize,
    pub steps: usize,
    pub repair_rounds: usize,
    /// Whether the run mode repairs at all.
    pub repair_enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub avg_viol: f64,
    pub vfr: f64,
    pub usr: f64,
    /// Mean residual violation count over trajectories that went through
    /// at least one repair round; 0 when none needed one. Absent for modes
    /// that never repair.
    pub post_res: Option<f64>,
    pub n_trajectories: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no trajectories to score")]
    Empty,
    #[error("trajectory {0} has no steps")]
    EmptyTrajectory(usize),
}

pub fn faithfulness_metrics(entries: &[TrajectorySummary]) -> Result<FaithfulnessReport, MetricsError> {
    if entries.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = entries.iter().position(|e| e.steps == 0) {
        return Err(MetricsError::EmptyTrajectory(i));
    }
    let n = entries.len() as f64;
    let avg_viol = entries.iter().map(|e| e.violations as f64).sum::<f64>() / n;
    let vfr = entries.iter().filter(|e| e.violations == 0).count() as f64 / n;
    let usr = entries
        .iter()
        .map(|e| e.flagged_steps as f64 / e.steps as f64)
        .sum::<f64>()
        / n;
    let post_res = entries.iter().any(|e| e.repair_enabled).then(|| {
        let repaired: Vec<&TrajectorySummary> = entries.iter().filter(|e| e.repair_rounds >= 1).collect();
        if repaired.is_empty() {
            0.0
        } else {
            repaired.iter().map(|e| e.violations as f64).sum::<f64>() / repaired.len() as f64
        }
    });
    Ok(FaithfulnessReport {
        avg_viol,
        vfr,
        usr,
        post_res,
        n_trajectories: entries.len(),
    })
}
