//! Structured belief trajectories.
//!
//! A [`Trajectory`] is an ordered list of typed [`ReasoningStep`]s. Each step
//! may cite earlier steps (premises) and context sentences (evidence). Forward
//! and self references are stored verbatim; detecting them is the auditor's
//! job, not the constructor's.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("support scores ({scores}) do not match trajectory length ({steps})")]
    LengthMismatch { scores: usize, steps: usize },
    #[error("support threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
}

/// One context document available to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    /// Sentence id is the position in this list.
    pub sentences: Vec<String>,
}

/// An input task: a question plus the evidence the agent may cite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub contexts: Vec<EvidenceDoc>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
}

impl Task {
    pub fn doc(&self, doc_id: &str) -> Option<&EvidenceDoc> {
        self.contexts.iter().find(|d| d.doc_id == doc_id)
    }

    /// Text of a cited sentence, if the reference resolves.
    pub fn sentence(&self, r: &EvidenceRef) -> Option<&str> {
        self.doc(&r.doc)
            .and_then(|d| d.sentences.get(r.sent))
            .map(String::as_str)
    }

    pub fn resolves(&self, r: &EvidenceRef) -> bool {
        self.sentence(r).is_some()
    }

    /// Every `(doc, sentence)` pair in context order.
    pub fn all_sentences(&self) -> impl Iterator<Item = (EvidenceRef, &str)> {
        self.contexts.iter().flat_map(|d| {
            d.sentences
                .iter()
                .enumerate()
                .map(move |(i, s)| (EvidenceRef::new(&d.doc_id, i), s.as_str()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StepKind {
    Claim,
    Assumption,
    Inference,
    Verification,
    Conclusion,
}

impl StepKind {
    pub const ALL: [StepKind; 5] = [
        StepKind::Claim,
        StepKind::Assumption,
        StepKind::Inference,
        StepKind::Verification,
        StepKind::Conclusion,
    ];

    /// Upper-case keyword used by the line-oriented step format.
    pub fn keyword(self) -> &'static str {
        match self {
            StepKind::Claim => "CLAIM",
            StepKind::Assumption => "ASSUMPTION",
            StepKind::Inference => "INFERENCE",
            StepKind::Verification => "VERIFICATION",
            StepKind::Conclusion => "CONCLUSION",
        }
    }

    pub fn from_keyword(word: &str) -> Option<StepKind> {
        StepKind::ALL
            .into_iter()
            .find(|k| k.keyword().eq_ignore_ascii_case(word))
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// A `(doc_id, sentence id)` citation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub doc: String,
    pub sent: usize,
}

impl EvidenceRef {
    pub fn new(doc: impl Into<String>, sent: usize) -> Self {
        Self {
            doc: doc.into(),
            sent,
        }
    }
}

impl fmt::Display for EvidenceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.doc, self.sent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// 1-based position, stored as given so gaps can be reported.
    pub index: usize,
    pub kind: StepKind,
    pub text: String,
    #[serde(rename = "premises", default)]
    pub premise_refs: BTreeSet<usize>,
    #[serde(rename = "evidence", default)]
    pub evidence_refs: BTreeSet<EvidenceRef>,
    /// Steps an assumption licenses. Only meaningful on `Assumption` steps.
    #[serde(rename = "scope", default, skip_serializing_if = "Option::is_none")]
    pub assumption_scope: Option<BTreeSet<usize>>,
}

impl ReasoningStep {
    pub fn new(index: usize, kind: StepKind, text: impl Into<String>) -> Self {
        Self {
            index,
            kind,
            text: text.into(),
            premise_refs: BTreeSet::new(),
            evidence_refs: BTreeSet::new(),
            assumption_scope: None,
        }
    }

    pub fn with_premises(mut self, refs: impl IntoIterator<Item = usize>) -> Self {
        self.premise_refs.extend(refs);
        self
    }

    pub fn with_evidence(mut self, refs: impl IntoIterator<Item = EvidenceRef>) -> Self {
        self.evidence_refs.extend(refs);
        self
    }

    pub fn with_scope(mut self, scope: impl IntoIterator<Item = usize>) -> Self {
        self.assumption_scope = Some(scope.into_iter().collect());
        self
    }

    pub fn is_unsupported(&self) -> bool {
        self.premise_refs.is_empty() && self.evidence_refs.is_empty()
    }

    pub fn has_scope(&self) -> bool {
        self.assumption_scope.as_ref().is_some_and(|s| !s.is_empty())
    }
}

/// Ordered reasoning steps. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    steps: Vec<ReasoningStep>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    steps: Vec<ReasoningStep>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = TrajectoryError;

    fn try_from(raw: RawTrajectory) -> Result<Self, Self::Error> {
        Trajectory::new(raw.steps)
    }
}

impl Trajectory {
    pub fn new(steps: Vec<ReasoningStep>) -> Result<Self, TrajectoryError> {
        if steps.is_empty() {
            return Err(TrajectoryError::EmptyTrajectory);
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[ReasoningStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step with the given 1-based index.
    pub fn step(&self, index: usize) -> Option<&ReasoningStep> {
        self.steps.iter().find(|s| s.index == index)
    }

    pub fn conclusion(&self) -> Option<&ReasoningStep> {
        self.steps.iter().rev().find(|s| s.kind == StepKind::Conclusion)
    }

    pub fn contains_index(&self, index: usize) -> bool {
        self.step(index).is_some()
    }

    pub fn into_steps(self) -> Vec<ReasoningStep> {
        self.steps
    }

    /// Premise closure of `from` (inclusive), following only refs that
    /// resolve to existing steps.
    pub fn premise_closure(&self, from: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if !seen.insert(i) {
                continue;
            }
            if let Some(step) = self.step(i) {
                stack.extend(
                    step.premise_refs
                        .iter()
                        .copied()
                        .filter(|&p| self.contains_index(p)),
                );
            }
        }
        seen.retain(|&i| self.contains_index(i));
        seen
    }
}

/// Per-step support scores plus the faithfulness threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportAssessment {
    pub scores: Vec<f64>,
    pub threshold: f64,
}

impl SupportAssessment {
    pub fn new(scores: Vec<f64>, threshold: f64) -> Result<Self, TrajectoryError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(TrajectoryError::InvalidThreshold(threshold));
        }
        Ok(Self { scores, threshold })
    }

    /// Binary assessment: flagged steps score 0, all others 1.
    pub fn from_flags(
        trajectory: &Trajectory,
        flagged: &BTreeSet<usize>,
        threshold: f64,
    ) -> Result<Self, TrajectoryError> {
        let scores = trajectory
            .steps()
            .iter()
            .map(|s| if flagged.contains(&s.index) { 0.0 } else { 1.0 })
            .collect();
        Self::new(scores, threshold)
    }

    pub fn check_length(&self, trajectory: &Trajectory) -> Result<(), TrajectoryError> {
        if self.scores.len() != trajectory.len() {
            return Err(TrajectoryError::LengthMismatch {
                scores: self.scores.len(),
                steps: trajectory.len(),
            });
        }
        Ok(())
    }
}

/// Fraction of steps whose support falls strictly below the threshold.
pub fn unfaithfulness_rate(assessment: &SupportAssessment) -> Result<f64, TrajectoryError> {
    let total = assessment.scores.len();
    if total == 0 {
        return Err(TrajectoryError::EmptyTrajectory);
    }
    let below = assessment
        .scores
        .iter()
        .filter(|&&s| s < assessment.threshold)
        .count();
    Ok(below as f64 / total as f64)
}

/// Directed premise graph: edge `u -> v` iff step `u` cites `v`.
///
/// Targets are kept verbatim, including forward, self and dangling refs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PremiseGraph {
    adjacency: BTreeMap<usize, BTreeSet<usize>>,
}

impl PremiseGraph {
    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency.get(&node).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency.get(&from).is_some_and(|s| s.contains(&to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .flat_map(|(&u, vs)| vs.iter().map(move |&v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum()
    }

    /// Premise refs recovered from the edges, keyed by step.
    pub fn to_refs(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        self.adjacency.clone()
    }

    /// Nodes reachable from `start` using only nodes `<= bound`.
    fn reach_bounded(&self, start: usize, bound: usize) -> BTreeMap<usize, usize> {
        // node -> predecessor on a BFS tree
        let mut parent = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for v in self.successors(u) {
                if v > bound || !self.adjacency.contains_key(&v) || parent.contains_key(&v) {
                    continue;
                }
                parent.insert(v, u);
                queue.push_back(v);
            }
        }
        parent
    }

    /// For each node `m` that is the maximum of some directed cycle, one such
    /// cycle as a closed edge list starting at `m`.
    ///
    /// A cycle whose maximum is `m` exists iff `m` can reach itself inside
    /// the subgraph induced by nodes `<= m`.
    pub fn cycles_by_max(&self) -> Vec<(usize, Vec<(usize, usize)>)> {
        let mut out = Vec::new();
        for m in self.nodes() {
            let parent = self.reach_bounded(m, m);
            if !parent.contains_key(&m) {
                continue;
            }
            let mut path = vec![m];
            let mut cur = parent[&m];
            while cur != m {
                path.push(cur);
                cur = parent[&cur];
            }
            path.push(m);
            path.reverse();
            let edges = path.windows(2).map(|w| (w[0], w[1])).collect();
            out.push((m, edges));
        }
        out
    }

    /// True iff the given edges are all present, i.e. the cycle they describe
    /// still closes.
    pub fn closes(&self, cycle: &[(usize, usize)]) -> bool {
        !cycle.is_empty() && cycle.iter().all(|&(u, v)| self.has_edge(u, v))
    }
}

pub fn premise_graph(trajectory: &Trajectory) -> PremiseGraph {
    let adjacency = trajectory
        .steps()
        .iter()
        .map(|s| (s.index, s.premise_refs.clone()))
        .collect();
    PremiseGraph { adjacency }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum SchemaFault {
    IndexGap {
        position: usize,
        expected: usize,
        found: usize,
    },
    EmptyText {
        index: usize,
    },
    DuplicateConclusion {
        index: usize,
    },
    ConclusionNotFinal {
        index: usize,
    },
}

impl fmt::Display for SchemaFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaFault::IndexGap {
                position,
                expected,
                found,
            } => write!(
                f,
                "step at position {position} has index {found}, expected {expected}"
            ),
            SchemaFault::EmptyText { index } => write!(f, "step {index} has empty text"),
            SchemaFault::DuplicateConclusion { index } => {
                write!(f, "step {index} is a second CONCLUSION")
            }
            SchemaFault::ConclusionNotFinal { index } => {
                write!(f, "CONCLUSION at step {index} is not the final step")
            }
        }
    }
}

/// Schema faults only; an empty result says nothing about faithfulness.
pub fn validate_trajectory(trajectory: &Trajectory) -> Vec<SchemaFault> {
    let mut faults = Vec::new();
    let last = trajectory.len();
    let mut seen_conclusion = false;
    for (pos, step) in trajectory.steps().iter().enumerate() {
        let expected = pos + 1;
        if step.index != expected {
            faults.push(SchemaFault::IndexGap {
                position: expected,
                expected,
                found: step.index,
            });
        }
        if step.text.trim().is_empty() {
            faults.push(SchemaFault::EmptyText { index: step.index });
        }
        if step.kind == StepKind::Conclusion {
            if seen_conclusion {
                faults.push(SchemaFault::DuplicateConclusion { index: step.index });
            } else if expected != last {
                faults.push(SchemaFault::ConclusionNotFinal { index: step.index });
            }
            seen_conclusion = true;
        }
    }
    faults
}

/// Claim plus the trajectory that produced it, as generated by one persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Belief {
    pub persona_id: String,
    pub claim: String,
    pub trajectory: Trajectory,
    /// Set when the persona's output could not be parsed and a single-step
    /// fallback was substituted.
    #[serde(default)]
    pub degraded: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(len: usize) -> Trajectory {
        let steps = (1..=len)
            .map(|i| {
                let kind = if i == len {
                    StepKind::Conclusion
                } else {
                    StepKind::Inference
                };
                let s = ReasoningStep::new(i, kind, format!("step {i}"));
                if i > 1 {
                    s.with_premises([i - 1])
                } else {
                    s
                }
            })
            .collect();
        Trajectory::new(steps).unwrap()
    }

    fn assessment(scores: &[f64], eps: f64) -> SupportAssessment {
        SupportAssessment::new(scores.to_vec(), eps).unwrap()
    }

    #[test]
    fn rate_all_supported() {
        assert_eq!(unfaithfulness_rate(&assessment(&[1.0, 1.0, 1.0], 0.5)).unwrap(), 0.0);
    }

    #[test]
    fn rate_none_supported() {
        assert_eq!(unfaithfulness_rate(&assessment(&[0.0, 0.0], 0.5)).unwrap(), 1.0);
    }

    #[test]
    fn rate_mixed_counts_strictly_below() {
        assert_eq!(
            unfaithfulness_rate(&assessment(&[0.9, 0.4, 0.6, 0.2], 0.5)).unwrap(),
            0.5
        );
        // exactly at the threshold counts as supported
        assert_eq!(unfaithfulness_rate(&assessment(&[0.5, 0.49], 0.5)).unwrap(), 0.5);
    }

    #[test]
    fn rate_empty_is_error() {
        let a = assessment(&[], 0.5);
        assert_eq!(unfaithfulness_rate(&a), Err(TrajectoryError::EmptyTrajectory));
        assert_eq!(TrajectoryError::EmptyTrajectory.to_string(), "empty trajectory");
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(SupportAssessment::new(vec![1.0], 0.0).is_err());
        assert!(SupportAssessment::new(vec![1.0], 1.0).is_err());
    }

    #[test]
    fn from_flags_and_length_check() {
        let t = chain(4);
        let a = SupportAssessment::from_flags(&t, &BTreeSet::from([2, 4]), 0.5).unwrap();
        assert_eq!(a.scores, vec![1.0, 0.0, 1.0, 0.0]);
        assert!(a.check_length(&t).is_ok());
        assert!(assessment(&[1.0], 0.5).check_length(&t).is_err());
    }

    #[test]
    fn graph_without_refs_is_edgeless() {
        let steps = (1..=3)
            .map(|i| ReasoningStep::new(i, StepKind::Claim, "x"))
            .collect();
        let g = premise_graph(&Trajectory::new(steps).unwrap());
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn graph_transcribes_refs() {
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Claim, "b"),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([1, 2]),
        ])
        .unwrap();
        let g = premise_graph(&t);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(3, 1), (3, 2)]);
    }

    #[test]
    fn graph_keeps_self_loops() {
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([2]),
        ])
        .unwrap();
        let g = premise_graph(&t);
        assert!(g.has_edge(2, 2));
        assert_eq!(g.cycles_by_max(), vec![(2, vec![(2, 2)])]);
    }

    #[test]
    fn cycle_max_is_reported_once() {
        // 5 -> 3 -> 5, plus a DAG part
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1]),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([5]),
            ReasoningStep::new(4, StepKind::Inference, "d").with_premises([2]),
            ReasoningStep::new(5, StepKind::Conclusion, "e").with_premises([3]),
        ])
        .unwrap();
        let cycles = premise_graph(&t).cycles_by_max();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].0, 5);
        assert_eq!(cycles[0].1, vec![(5, 3), (3, 5)]);
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate_trajectory(&chain(3)).is_empty());
    }

    #[test]
    fn validate_reports_gap() {
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(3, StepKind::Claim, "b"),
        ])
        .unwrap();
        assert_eq!(
            validate_trajectory(&t),
            vec![SchemaFault::IndexGap {
                position: 2,
                expected: 2,
                found: 3
            }]
        );
    }

    #[test]
    fn validate_reports_duplicate_conclusion() {
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Conclusion, "a"),
            ReasoningStep::new(2, StepKind::Conclusion, "b"),
        ])
        .unwrap();
        let faults = validate_trajectory(&t);
        assert!(faults.contains(&SchemaFault::DuplicateConclusion { index: 2 }));
    }

    #[test]
    fn validate_reports_empty_text() {
        let t = Trajectory::new(vec![ReasoningStep::new(1, StepKind::Claim, "  ")]).unwrap();
        assert_eq!(validate_trajectory(&t), vec![SchemaFault::EmptyText { index: 1 }]);
    }

    #[test]
    fn empty_trajectory_rejected_on_deserialize() {
        let err = serde_json::from_str::<Trajectory>(r#"{"steps":[]}"#).unwrap_err();
        assert!(err.to_string().contains("empty trajectory"));
    }

    #[test]
    fn json_field_names_are_stable() {
        let t = Trajectory::new(vec![ReasoningStep::new(1, StepKind::Assumption, "a")
            .with_premises([3])
            .with_evidence([EvidenceRef::new("d1", 2)])
            .with_scope([2])])
        .unwrap();
        let v = serde_json::to_value(&t).unwrap();
        let step = &v["steps"][0];
        assert_eq!(step["index"], 1);
        assert_eq!(step["kind"], "Assumption");
        assert_eq!(step["premises"], serde_json::json!([3]));
        assert_eq!(step["evidence"], serde_json::json!([{"doc": "d1", "sent": 2}]));
        assert_eq!(step["scope"], serde_json::json!([2]));
        let back: Trajectory = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn closure_follows_existing_refs_only() {
        let t = Trajectory::new(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1, 9]),
            ReasoningStep::new(3, StepKind::Conclusion, "c").with_premises([2]),
        ])
        .unwrap();
        assert_eq!(t.premise_closure(3), BTreeSet::from([1, 2, 3]));
    }
}
