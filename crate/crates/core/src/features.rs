//! Structural embedding of a trajectory and the rubric quality score.
//!
//! The embedding has four blocks: granularity, assumption handling,
//! verification behaviour and global shape. Every feature is computed from
//! the structured schema alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::text::{token_set, word_count};
use crate::trajectory::{validate_trajectory, Belief, StepKind, Task, Trajectory};

/// Global shape of the premise DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// No step cites more than one premise and none is cited twice.
    Chain,
    /// Some step has several premises but each step is cited at most once.
    Tree,
    /// Some step is shared by several dependants.
    Mixed,
}

impl Shape {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Shape::Chain => [1.0, 0.0, 0.0],
            Shape::Tree => [0.0, 1.0, 0.0],
            Shape::Mixed => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// `[L, mean step length in tokens, max premise gap]`
    pub granularity: [f64; 3],
    /// `[assumption share, scoped-assumption share, unsupported-step share]`
    pub assumptive: [f64; 3],
    /// `[verification share, evidenced-inference share]`
    pub verification: [f64; 2],
    /// `[DAG depth / L, mean branching, chain, tree, mixed]`
    pub structural: [f64; 5],
}

impl FeatureVector {
    pub const DIM: usize = 13;

    pub const NAMES: [&'static str; Self::DIM] = [
        "g_length",
        "g_mean_tokens",
        "g_max_premise_gap",
        "p_assumption_share",
        "p_scoped_assumption_share",
        "p_unsupported_share",
        "v_verification_share",
        "v_evidenced_inference_share",
        "s_depth_ratio",
        "s_branching",
        "s_chain",
        "s_tree",
        "s_mixed",
    ];

    /// Positions of the unnormalized count features.
    pub const COUNT_FEATURES: [usize; 4] = [0, 1, 2, 9];

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::DIM);
        v.extend_from_slice(&self.granularity);
        v.extend_from_slice(&self.assumptive);
        v.extend_from_slice(&self.verification);
        v.extend_from_slice(&self.structural);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Backward in-range premise edges only, which always form a DAG.
fn dag_edges(t: &Trajectory) -> Vec<(usize, usize)> {
    t.steps()
        .iter()
        .flat_map(|s| {
            s.premise_refs
                .iter()
                .filter(move |&&p| p < s.index && t.contains_index(p))
                .map(move |&p| (s.index, p))
        })
        .collect()
}

/// Longest path, in edges, of the backward premise DAG.
fn dag_depth(t: &Trajectory, edges: &[(usize, usize)]) -> usize {
    let mut depth: BTreeMap<usize, usize> = BTreeMap::new();
    // steps visited in ascending index so every premise is done first
    let mut idx: Vec<usize> = t.steps().iter().map(|s| s.index).collect();
    idx.sort_unstable();
    for i in idx {
        let d = edges
            .iter()
            .filter(|(u, _)| *u == i)
            .map(|(_, v)| depth.get(v).copied().unwrap_or(0) + 1)
            .max()
            .unwrap_or(0);
        depth.insert(i, d);
    }
    depth.values().copied().max().unwrap_or(0)
}

fn shape(edges: &[(usize, usize)]) -> Shape {
    let mut out_deg: BTreeMap<usize, usize> = BTreeMap::new();
    let mut in_deg: BTreeMap<usize, usize> = BTreeMap::new();
    for &(u, v) in edges {
        *out_deg.entry(u).or_default() += 1;
        *in_deg.entry(v).or_default() += 1;
    }
    if in_deg.values().any(|&d| d > 1) {
        Shape::Mixed
    } else if out_deg.values().any(|&d| d > 1) {
        Shape::Tree
    } else {
        Shape::Chain
    }
}

pub fn extract_features(belief: &Belief) -> FeatureVector {
    trajectory_features(&belief.trajectory)
}

pub fn trajectory_features(t: &Trajectory) -> FeatureVector {
    let steps = t.steps();
    let len = steps.len();
    let mean_tokens = steps.iter().map(|s| word_count(&s.text)).sum::<usize>() as f64 / len as f64;
    let max_gap = steps
        .iter()
        .filter_map(|s| s.premise_refs.iter().max().map(|&m| s.index as f64 - m as f64))
        .fold(0.0_f64, f64::max);

    let assumptions: Vec<_> = steps.iter().filter(|s| s.kind == StepKind::Assumption).collect();
    let scoped = assumptions.iter().filter(|s| s.has_scope()).count();
    let unsupported = steps.iter().filter(|s| s.is_unsupported()).count();

    let verifications = steps.iter().filter(|s| s.kind == StepKind::Verification).count();
    let inferences: Vec<_> = steps.iter().filter(|s| s.kind == StepKind::Inference).collect();
    let evidenced = inferences.iter().filter(|s| !s.evidence_refs.is_empty()).count();

    let edges = dag_edges(t);
    let depth = dag_depth(t, &edges);
    let with_premises: Vec<usize> = steps
        .iter()
        .map(|s| edges.iter().filter(|(u, _)| *u == s.index).count())
        .filter(|&n| n > 0)
        .collect();
    let branching = if with_premises.is_empty() {
        0.0
    } else {
        with_premises.iter().sum::<usize>() as f64 / with_premises.len() as f64
    };
    let hot = shape(&edges).one_hot();

    FeatureVector {
        granularity: [len as f64, mean_tokens, max_gap],
        assumptive: [
            ratio(assumptions.len(), len),
            ratio(scoped, assumptions.len()),
            ratio(unsupported, len),
        ],
        verification: [ratio(verifications, len), ratio(evidenced, inferences.len())],
        structural: [ratio(depth, len), branching, hot[0], hot[1], hot[2]],
    }
}

/// Z-normalizes the count features across the candidates of one task.
/// A feature with zero spread becomes 0 everywhere.
pub fn normalize_counts(features: &[FeatureVector]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = features.iter().map(FeatureVector::to_vec).collect();
    let n = rows.len() as f64;
    if rows.is_empty() {
        return rows;
    }
    for &col in &FeatureVector::COUNT_FEATURES {
        let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in &mut rows {
            r[col] = if sd > 1e-12 { (r[col] - mean) / sd } else { 0.0 };
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub raw: f64,
    pub normalized: f64,
}

/// Per-check outcome of the quality rubric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub has_conclusion: bool,
    pub claim_matches_conclusion: bool,
    pub schema_valid: bool,
    pub cites_evidence: bool,
    pub not_degraded: bool,
}

impl Rubric {
    pub const CHECKS: f64 = 5.0;

    pub fn evaluate(belief: &Belief) -> Self {
        let t = &belief.trajectory;
        let conclusion = t.conclusion();
        let claim_matches = conclusion.is_some_and(|c| {
            let claim = token_set(&belief.claim);
            if claim.is_empty() {
                return false;
            }
            let concl = token_set(&c.text);
            let shared = claim.iter().filter(|w| concl.contains(*w)).count();
            shared as f64 / claim.len() as f64 >= 0.5
        });
        Self {
            has_conclusion: conclusion.is_some(),
            claim_matches_conclusion: claim_matches,
            schema_valid: validate_trajectory(t).is_empty(),
            cites_evidence: t.steps().iter().any(|s| !s.evidence_refs.is_empty()),
            not_degraded: !belief.degraded,
        }
    }

    pub fn passed(&self) -> usize {
        [
            self.has_conclusion,
            self.claim_matches_conclusion,
            self.schema_valid,
            self.cites_evidence,
            self.not_degraded,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// Deterministic five-check rubric, `q̃ = q / 5`, capped at 0.4 for
/// degraded beliefs.
pub fn quality_score(belief: &Belief, _task: &Task) -> QualityScore {
    let raw = Rubric::evaluate(belief).passed() as f64;
    let mut normalized = raw / Rubric::CHECKS;
    if belief.degraded {
        normalized = normalized.min(0.4);
    }
    QualityScore { raw, normalized }
}

/// Indices of beliefs with `q̃ >= q_min`. When fewer than `k` survive, the
/// best of the dropped are restored (ties by lowest index) until `k` remain.
pub fn usability_filter(q_tilde: &[f64], q_min: f64, k: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..q_tilde.len()).filter(|&i| q_tilde[i] >= q_min).collect();
    if keep.len() < k {
        let mut dropped: Vec<usize> = (0..q_tilde.len()).filter(|&i| q_tilde[i] < q_min).collect();
        dropped.sort_by(|&a, &b| q_tilde[b].total_cmp(&q_tilde[a]).then(a.cmp(&b)));
        let need = k - keep.len();
        keep.extend(dropped.into_iter().take(need));
        keep.sort_unstable();
    }
    keep
}

/// Debug dump: one CSV row per belief.
pub fn write_feature_csv(
    out: impl std::io::Write,
    beliefs: &[Belief],
    features: &[FeatureVector],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["persona_id"];
    header.extend(FeatureVector::NAMES);
    w.write_record(&header)?;
    for (b, f) in beliefs.iter().zip(features) {
        let mut row = vec![b.persona_id.clone()];
        row.extend(f.to_vec().iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::degraded_belief;
    use crate::trajectory::{EvidenceDoc, EvidenceRef, ReasoningStep};

    fn belief(steps: Vec<ReasoningStep>, claim: &str) -> Belief {
        Belief {
            persona_id: "p".into(),
            claim: claim.into(),
            trajectory: Trajectory::new(steps).unwrap(),
            degraded: false,
        }
    }

    fn task() -> Task {
        Task {
            id: "t".into(),
            question: "q".into(),
            contexts: vec![EvidenceDoc {
                doc_id: "d1".into(),
                title: String::new(),
                sentences: vec!["s".into(); 4],
            }],
            gold_answers: vec![],
        }
    }

    #[test]
    fn single_step_features() {
        let f = extract_features(&belief(
            vec![ReasoningStep::new(1, StepKind::Claim, "three word text")],
            "x",
        ));
        assert_eq!(f.granularity, [1.0, 3.0, 0.0]);
        assert_eq!(f.assumptive, [0.0, 0.0, 1.0]);
        assert_eq!(f.verification, [0.0, 0.0]);
        assert_eq!(f.structural, [0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn chain_of_four_inferences() {
        let steps = (1..=4)
            .map(|i| {
                let s = ReasoningStep::new(i, StepKind::Inference, "t")
                    .with_evidence([EvidenceRef::new("d1", i - 1)]);
                if i > 1 {
                    s.with_premises([i - 1])
                } else {
                    s
                }
            })
            .collect();
        let f = extract_features(&belief(steps, "x"));
        assert_eq!(f.verification, [0.0, 1.0]);
        assert_eq!(f.structural[0], 0.75);
        assert_eq!(f.structural[1], 1.0);
        assert_eq!(Shape::Chain.one_hot(), [f.structural[2], f.structural[3], f.structural[4]]);
        assert_eq!(f.granularity[2], 1.0);
    }

    #[test]
    fn two_scoped_assumptions() {
        let steps = vec![
            ReasoningStep::new(1, StepKind::Assumption, "assume a").with_scope([3]),
            ReasoningStep::new(2, StepKind::Assumption, "assume b").with_scope([3]),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([1, 2]),
            ReasoningStep::new(4, StepKind::Conclusion, "d").with_premises([3]),
        ];
        let f = extract_features(&belief(steps, "d"));
        assert_eq!(f.assumptive[0], 0.5);
        assert_eq!(f.assumptive[1], 1.0);
        assert_eq!(f.assumptive[2], 0.5);
        assert_eq!(f.structural[3], 1.0, "converging premises form a tree");
        assert_eq!(f.structural[1], 1.5);
    }

    #[test]
    fn shared_premise_is_mixed() {
        let steps = vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1]),
            ReasoningStep::new(3, StepKind::Conclusion, "c").with_premises([1, 2]),
        ];
        let f = extract_features(&belief(steps, "c"));
        assert_eq!(f.structural[4], 1.0);
    }

    #[test]
    fn z_normalization_of_counts() {
        let a = extract_features(&belief(vec![ReasoningStep::new(1, StepKind::Claim, "a")], "a"));
        let b = extract_features(&belief(
            vec![
                ReasoningStep::new(1, StepKind::Claim, "a"),
                ReasoningStep::new(2, StepKind::Claim, "a"),
                ReasoningStep::new(3, StepKind::Claim, "a"),
            ],
            "a",
        ));
        let rows = normalize_counts(&[a, b]);
        assert_eq!(rows[0][0], -1.0);
        assert_eq!(rows[1][0], 1.0);
        // constant column collapses to 0
        assert_eq!(rows[0][1], 0.0);
        // ratio columns untouched
        assert_eq!(rows[0][5], 1.0);
    }

    #[test]
    fn degraded_belief_scores_low() {
        let b = degraded_belief("p", "some raw reply");
        let q = quality_score(&b, &task());
        // only the schema check passes
        assert_eq!(q.raw, 1.0);
        assert_eq!(q.normalized, 0.2);
        assert!(q.normalized <= 0.4);
    }

    fn compliant(with_evidence: bool) -> Belief {
        let ev = if with_evidence {
            vec![EvidenceRef::new("d1", 0)]
        } else {
            vec![]
        };
        belief(
            vec![
                ReasoningStep::new(1, StepKind::Claim, "The series is Animorphs").with_evidence(ev),
                ReasoningStep::new(2, StepKind::Conclusion, "The answer is Animorphs").with_premises([1]),
            ],
            "Animorphs",
        )
    }

    #[test]
    fn compliant_belief_scores_one() {
        assert_eq!(quality_score(&compliant(true), &task()).normalized, 1.0);
    }

    #[test]
    fn no_evidence_scores_four_fifths() {
        assert_eq!(quality_score(&compliant(false), &task()).normalized, 0.8);
    }

    #[test]
    fn filter_threshold() {
        assert_eq!(usability_filter(&[1.0, 0.2, 0.8, 0.9], 0.4, 2), vec![0, 2, 3]);
    }

    #[test]
    fn filter_all_survive() {
        assert_eq!(usability_filter(&[1.0; 4], 0.4, 2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn filter_restores_to_k() {
        assert_eq!(usability_filter(&[0.0; 4], 0.4, 2), vec![0, 1]);
        assert_eq!(usability_filter(&[0.1, 0.3, 0.9, 0.2], 0.5, 3), vec![1, 2, 3]);
    }

    #[test]
    fn feature_csv_has_header_and_rows() {
        let b = compliant(true);
        let f = extract_features(&b);
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &[b], &[f]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("persona_id,g_length"));
        assert_eq!(s.lines().count(), 2);
    }
}
