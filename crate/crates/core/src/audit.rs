//! Adversarial audit of a single trajectory.
//!
//! Each detector emits step-localized [`ViolationInstance`]s carrying the
//! evidence that triggered them and the [`AcceptanceCriterion`] a repair
//! must satisfy. Rule detectors are deterministic; the optional LLM judge can
//! only add instances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backend, GenRequest};
use crate::templates::PromptTemplates;
use crate::text::{contains_any, tokens};
use crate::trajectory::{
    premise_graph, unfaithfulness_rate, EvidenceRef, StepKind, SupportAssessment, Task, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationType {
    #[serde(rename = "Missing_Assumption")]
    MissingAssumption,
    #[serde(rename = "Invalid_Precondition")]
    InvalidPrecondition,
    #[serde(rename = "Unjustified_Inference")]
    UnjustifiedInference,
    #[serde(rename = "Circular_Reasoning")]
    CircularReasoning,
    #[serde(rename = "Contradiction")]
    Contradiction,
    #[serde(rename = "Overgeneralization")]
    Overgeneralization,
}

impl ViolationType {
    /// Taxonomy order used by profiles and severity weights.
    pub const ALL: [ViolationType; 6] = [
        ViolationType::MissingAssumption,
        ViolationType::InvalidPrecondition,
        ViolationType::UnjustifiedInference,
        ViolationType::CircularReasoning,
        ViolationType::Contradiction,
        ViolationType::Overgeneralization,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ViolationType::MissingAssumption => "Missing_Assumption",
            ViolationType::InvalidPrecondition => "Invalid_Precondition",
            ViolationType::UnjustifiedInference => "Unjustified_Inference",
            ViolationType::CircularReasoning => "Circular_Reasoning",
            ViolationType::Contradiction => "Contradiction",
            ViolationType::Overgeneralization => "Overgeneralization",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for ViolationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "ref", rename_all = "snake_case")]
pub enum OffendingRef {
    Step { step: usize },
    Premise { from: usize, to: usize },
    Evidence { step: usize, doc: String, sent: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvidence {
    #[serde(rename = "detector")]
    pub detector_id: String,
    pub offending_refs: Vec<OffendingRef>,
    pub explanation: String,
}

/// Wire form of an acceptance criterion: `{"id": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCriterion {
    #[serde(rename = "id")]
    pub criterion_id: String,
    #[serde(rename = "params", default)]
    pub parameters: BTreeMap<String, Value>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriterionError {
    #[error("unknown criterion id `{0}`")]
    UnknownCriterion(String),
    #[error("bad parameters for criterion `{id}`: {message}")]
    BadParameters { id: String, message: String },
}

/// Typed acceptance criteria, one schema per violation type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", content = "params")]
pub enum Criterion {
    /// The step cites at least one resolving context sentence. When the task
    /// has no evidence at all, citing an upstream scoped assumption also
    /// counts.
    AttachEvidence { step: usize, allow_assumption: bool },
    /// An upstream scoped, hedged assumption covers the step and the step
    /// cites it.
    InsertAssumption { step: usize },
    /// Every dependent of `assumption` is covered by an upstream scoped,
    /// hedged assumption, and `assumption` itself is no longer flagged.
    ScopeAssumption { assumption: usize, dependents: Vec<usize> },
    /// At least one edge of `cycle` is gone.
    RemoveCycleEdge { step: usize, cycle: Vec<(usize, usize)> },
    /// Every premise and evidence ref of the step resolves.
    FixReference { step: usize },
    /// The conclusion has no universal quantifier, or its premise closure
    /// cites at least two evidence sentences.
    HedgeConclusion { step: usize },
    /// The step text changed and the rule detector for `violation` no longer
    /// fires at the step.
    ReviseStepText {
        violation: ViolationType,
        step: usize,
        original_text: String,
    },
}

impl Criterion {
    pub fn id(&self) -> &'static str {
        match self {
            Criterion::AttachEvidence { .. } => "AttachEvidence",
            Criterion::InsertAssumption { .. } => "InsertAssumption",
            Criterion::ScopeAssumption { .. } => "ScopeAssumption",
            Criterion::RemoveCycleEdge { .. } => "RemoveCycleEdge",
            Criterion::FixReference { .. } => "FixReference",
            Criterion::HedgeConclusion { .. } => "HedgeConclusion",
            Criterion::ReviseStepText { .. } => "ReviseStepText",
        }
    }

    /// The step the criterion is anchored to.
    pub fn step(&self) -> usize {
        match self {
            Criterion::AttachEvidence { step, .. }
            | Criterion::InsertAssumption { step }
            | Criterion::RemoveCycleEdge { step, .. }
            | Criterion::FixReference { step }
            | Criterion::HedgeConclusion { step }
            | Criterion::ReviseStepText { step, .. } => *step,
            Criterion::ScopeAssumption { assumption, .. } => *assumption,
        }
    }

    /// Renumbers step indices; `None` from `map` drops a reference.
    pub fn remap(&self, map: &dyn Fn(usize) -> Option<usize>) -> Option<Criterion> {
        Some(match self {
            Criterion::AttachEvidence {
                step,
                allow_assumption,
            } => Criterion::AttachEvidence {
                step: map(*step)?,
                allow_assumption: *allow_assumption,
            },
            Criterion::InsertAssumption { step } => Criterion::InsertAssumption { step: map(*step)? },
            Criterion::ScopeAssumption {
                assumption,
                dependents,
            } => Criterion::ScopeAssumption {
                assumption: map(*assumption)?,
                dependents: dependents.iter().filter_map(|&d| map(d)).collect(),
            },
            Criterion::RemoveCycleEdge { step, cycle } => {
                // a cycle through a deleted step is already broken
                let edges: Option<Vec<_>> = cycle.iter().map(|&(u, v)| Some((map(u)?, map(v)?))).collect();
                Criterion::RemoveCycleEdge {
                    step: map(*step)?,
                    cycle: edges.unwrap_or_default(),
                }
            }
            Criterion::FixReference { step } => Criterion::FixReference { step: map(*step)? },
            Criterion::HedgeConclusion { step } => Criterion::HedgeConclusion { step: map(*step)? },
            Criterion::ReviseStepText {
                violation,
                step,
                original_text,
            } => Criterion::ReviseStepText {
                violation: *violation,
                step: map(*step)?,
                original_text: original_text.clone(),
            },
        })
    }
}

impl From<&Criterion> for AcceptanceCriterion {
    fn from(c: &Criterion) -> Self {
        let v = serde_json::to_value(c).expect("criterion serializes");
        let parameters = match v.get("params") {
            Some(Value::Object(m)) => m.clone().into_iter().collect(),
            _ => BTreeMap::new(),
        };
        AcceptanceCriterion {
            criterion_id: c.id().to_string(),
            parameters,
        }
    }
}

impl TryFrom<&AcceptanceCriterion> for Criterion {
    type Error = CriterionError;

    fn try_from(a: &AcceptanceCriterion) -> Result<Self, Self::Error> {
        const KNOWN: [&str; 7] = [
            "AttachEvidence",
            "InsertAssumption",
            "ScopeAssumption",
            "RemoveCycleEdge",
            "FixReference",
            "HedgeConclusion",
            "ReviseStepText",
        ];
        if !KNOWN.contains(&a.criterion_id.as_str()) {
            return Err(CriterionError::UnknownCriterion(a.criterion_id.clone()));
        }
        let v = serde_json::json!({
            "id": a.criterion_id,
            "params": a.parameters,
        });
        serde_json::from_value(v).map_err(|e| CriterionError::BadParameters {
            id: a.criterion_id.clone(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationInstance {
    #[serde(rename = "type")]
    pub kind: ViolationType,
    pub step: usize,
    #[serde(flatten)]
    pub evidence: AuditEvidence,
    pub acceptance: AcceptanceCriterion,
}

impl ViolationInstance {
    fn new(
        kind: ViolationType,
        step: usize,
        detector: &str,
        offending_refs: Vec<OffendingRef>,
        explanation: String,
        criterion: Criterion,
    ) -> Self {
        Self {
            kind,
            step,
            evidence: AuditEvidence {
                detector_id: detector.to_string(),
                offending_refs,
                explanation,
            },
            acceptance: AcceptanceCriterion::from(&criterion),
        }
    }

    pub fn criterion(&self) -> Result<Criterion, CriterionError> {
        Criterion::try_from(&self.acceptance)
    }

    /// `(type, step, offending_refs)` identity used by the regression check.
    pub fn signature(&self) -> (ViolationType, usize, Vec<OffendingRef>) {
        (self.kind, self.step, self.evidence.offending_refs.clone())
    }
}

/// Word lists the rule detectors key on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicons {
    pub universal: Vec<String>,
    pub negation: Vec<String>,
    pub hedge: Vec<String>,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Self {
            universal: words(&["all", "always", "every", "never"]),
            negation: words(&["not", "no", "never"]),
            hedge: words(&[
                "assume",
                "assumed",
                "assuming",
                "suppose",
                "supposing",
                "presumably",
                "hypothetically",
                "if",
                "likely",
                "perhaps",
                "possibly",
            ]),
        }
    }
}

impl Lexicons {
    pub fn is_hedged(&self, text: &str) -> bool {
        contains_any(text, &self.hedge)
    }

    pub fn is_universal(&self, text: &str) -> bool {
        contains_any(text, &self.universal)
    }

    /// True when one token list equals the other with one negation token
    /// inserted.
    pub fn negation_pair(&self, a: &str, b: &str) -> bool {
        let (ta, tb) = (tokens(a), tokens(b));
        let (short, long) = match ta.len().cmp(&tb.len()) {
            std::cmp::Ordering::Less => (ta, tb),
            std::cmp::Ordering::Greater => (tb, ta),
            std::cmp::Ordering::Equal => return false,
        };
        if long.len() != short.len() + 1 {
            return false;
        }
        (0..long.len()).any(|i| {
            self.negation.iter().any(|n| n == &long[i])
                && long[..i] == short[..i]
                && long[i + 1..] == short[i..]
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditMode {
    #[default]
    Rule,
    RuleLlm,
}

pub const DETECTOR_CYCLE: &str = "premise_cycle";
pub const DETECTOR_UNSUPPORTED: &str = "unsupported_inference";
pub const DETECTOR_ASSUMPTION: &str = "unscoped_assumption";
pub const DETECTOR_REFERENCE: &str = "dangling_reference";
pub const DETECTOR_UNIVERSAL: &str = "universal_conclusion";
pub const DETECTOR_NEGATION: &str = "negation_conflict";
pub const DETECTOR_JUDGE: &str = "llm_judge";

pub fn detect_circular(trajectory: &Trajectory) -> Vec<ViolationInstance> {
    premise_graph(trajectory)
        .cycles_by_max()
        .into_iter()
        .map(|(max, cycle)| {
            let path: Vec<String> = std::iter::once(cycle[0].0)
                .chain(cycle.iter().map(|e| e.1))
                .map(|s| s.to_string())
                .collect();
            ViolationInstance::new(
                ViolationType::CircularReasoning,
                max,
                DETECTOR_CYCLE,
                cycle.iter().map(|&(from, to)| OffendingRef::Premise { from, to }).collect(),
                format!("premise cycle {} closes at step {max}", path.join(" -> ")),
                Criterion::RemoveCycleEdge { step: max, cycle },
            )
        })
        .collect()
}

/// Steps citing `assumption` that are inferences.
fn dependents_of(trajectory: &Trajectory, assumption: usize) -> Vec<usize> {
    trajectory
        .steps()
        .iter()
        .filter(|s| s.kind == StepKind::Inference && s.premise_refs.contains(&assumption))
        .map(|s| s.index)
        .collect()
}

/// Distinct evidence sentences cited in the premise closure of `step`.
pub fn closure_evidence(trajectory: &Trajectory, step: usize) -> BTreeSet<EvidenceRef> {
    trajectory
        .premise_closure(step)
        .into_iter()
        .filter_map(|i| trajectory.step(i))
        .flat_map(|s| s.evidence_refs.iter().cloned())
        .collect()
}

pub fn unresolved_refs(trajectory: &Trajectory, task: &Task, step: usize) -> Vec<OffendingRef> {
    let Some(s) = trajectory.step(step) else {
        return vec![];
    };
    let mut out: Vec<OffendingRef> = s
        .premise_refs
        .iter()
        .filter(|&&p| !trajectory.contains_index(p))
        .map(|&p| OffendingRef::Premise { from: step, to: p })
        .collect();
    out.extend(
        s.evidence_refs
            .iter()
            .filter(|r| !task.resolves(r))
            .map(|r| OffendingRef::Evidence {
                step,
                doc: r.doc.clone(),
                sent: r.sent,
            }),
    );
    out
}

pub fn detect_support(trajectory: &Trajectory, task: &Task, lexicons: &Lexicons) -> Vec<ViolationInstance> {
    let mut out = Vec::new();
    let has_evidence = task.all_sentences().next().is_some();
    for s in trajectory.steps() {
        if s.kind == StepKind::Inference && s.is_unsupported() {
            out.push(ViolationInstance::new(
                ViolationType::UnjustifiedInference,
                s.index,
                DETECTOR_UNSUPPORTED,
                vec![OffendingRef::Step { step: s.index }],
                format!("inference at step {} cites neither premises nor evidence", s.index),
                Criterion::AttachEvidence {
                    step: s.index,
                    allow_assumption: !has_evidence,
                },
            ));
        }

        if s.kind == StepKind::Assumption {
            let deps = dependents_of(trajectory, s.index);
            let scoped = s.has_scope();
            let hedged = lexicons.is_hedged(&s.text);
            if !deps.is_empty() && (!scoped || !hedged) {
                let why = match (scoped, hedged) {
                    (false, false) => "is neither scoped nor marked as assumed",
                    (false, true) => "has no scope",
                    _ => "is not marked as assumed",
                };
                out.push(ViolationInstance::new(
                    ViolationType::MissingAssumption,
                    s.index,
                    DETECTOR_ASSUMPTION,
                    deps.iter().map(|&d| OffendingRef::Premise { from: d, to: s.index }).collect(),
                    format!("assumption at step {} {why} but steps {:?} rely on it", s.index, deps),
                    Criterion::ScopeAssumption {
                        assumption: s.index,
                        dependents: deps,
                    },
                ));
            }
        }

        let dangling = unresolved_refs(trajectory, task, s.index);
        if !dangling.is_empty() {
            out.push(ViolationInstance::new(
                ViolationType::InvalidPrecondition,
                s.index,
                DETECTOR_REFERENCE,
                dangling,
                format!("step {} cites references that do not resolve", s.index),
                Criterion::FixReference { step: s.index },
            ));
        }

        if s.kind == StepKind::Conclusion && lexicons.is_universal(&s.text) {
            let cited = closure_evidence(trajectory, s.index);
            if cited.len() <= 1 {
                out.push(ViolationInstance::new(
                    ViolationType::Overgeneralization,
                    s.index,
                    DETECTOR_UNIVERSAL,
                    cited
                        .iter()
                        .map(|r| OffendingRef::Evidence {
                            step: s.index,
                            doc: r.doc.clone(),
                            sent: r.sent,
                        })
                        .collect(),
                    format!(
                        "universal conclusion at step {} rests on {} evidence sentence(s)",
                        s.index,
                        cited.len()
                    ),
                    Criterion::HedgeConclusion { step: s.index },
                ));
            }
        }
    }
    out
}

pub fn detect_contradiction(trajectory: &Trajectory, lexicons: &Lexicons) -> Vec<ViolationInstance> {
    let candidates: Vec<_> = trajectory
        .steps()
        .iter()
        .filter(|s| matches!(s.kind, StepKind::Claim | StepKind::Inference))
        .collect();
    let mut out = Vec::new();
    for (i, later) in candidates.iter().enumerate() {
        if let Some(earlier) = candidates[..i]
            .iter()
            .find(|e| lexicons.negation_pair(&e.text, &later.text))
        {
            out.push(ViolationInstance::new(
                ViolationType::Contradiction,
                later.index,
                DETECTOR_NEGATION,
                vec![OffendingRef::Step { step: earlier.index }],
                format!("step {} negates step {}", later.index, earlier.index),
                Criterion::ReviseStepText {
                    violation: ViolationType::Contradiction,
                    step: later.index,
                    original_text: later.text.clone(),
                },
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct JudgeVerdict {
    conflict: bool,
    #[serde(default)]
    steps: Vec<usize>,
}

/// Request sent to the contradiction judge, or `None` with fewer than two
/// claim steps.
pub fn judge_request(trajectory: &Trajectory, templates: &PromptTemplates) -> Option<GenRequest> {
    let claims: Vec<String> = trajectory
        .steps()
        .iter()
        .filter(|s| s.kind == StepKind::Claim)
        .map(|s| format!("[{}] {}", s.index, s.text))
        .collect();
    if claims.len() < 2 {
        return None;
    }
    let prompt = templates
        .judge_contradiction
        .render(&[("steps", claims.join("\n").as_str())]);
    Some(GenRequest::new(templates.system.body.clone(), prompt).with_seed(Some(0)))
}

/// Parses `{"conflict", "steps"}` objects (single or list) from the judge's
/// reply.
pub fn parse_judge_reply(text: &str) -> Option<Vec<(usize, usize)>> {
    let start = text.find(['{', '['])?;
    let end = text.rfind(['}', ']'])?;
    let body = text.get(start..=end)?;
    let verdicts: Vec<JudgeVerdict> = match serde_json::from_str::<Value>(body).ok()? {
        Value::Array(items) => items
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<_, _>>()
            .ok()?,
        obj @ Value::Object(_) => vec![serde_json::from_value(obj).ok()?],
        _ => return None,
    };
    let mut pairs = Vec::new();
    for v in verdicts {
        if !v.conflict {
            continue;
        }
        if v.steps.len() != 2 {
            return None;
        }
        pairs.push((v.steps[0], v.steps[1]));
    }
    Some(pairs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditFlag {
    JudgeUnavailable,
    JudgeParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub instances: Vec<ViolationInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<AuditFlag>,
}

/// Backend plus templates for the optional LLM judge.
#[derive(Clone, Copy)]
pub struct Llm<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
}

fn judge_contradictions(
    trajectory: &Trajectory,
    judge: Llm<'_>,
    flags: &mut Vec<AuditFlag>,
) -> Vec<ViolationInstance> {
    let Some(req) = judge_request(trajectory, judge.templates) else {
        return vec![];
    };
    let reply = match judge.backend.generate(&req) {
        Ok(r) => r.text,
        Err(_) => {
            flags.push(AuditFlag::JudgeUnavailable);
            return vec![];
        }
    };
    let Some(pairs) = parse_judge_reply(&reply) else {
        flags.push(AuditFlag::JudgeParseFailure);
        return vec![];
    };
    let claim_steps: BTreeSet<usize> = trajectory
        .steps()
        .iter()
        .filter(|s| s.kind == StepKind::Claim)
        .map(|s| s.index)
        .collect();
    pairs
        .into_iter()
        .filter(|(a, b)| a != b && claim_steps.contains(a) && claim_steps.contains(b))
        .map(|(a, b)| {
            let (earlier, later) = (a.min(b), a.max(b));
            let text = trajectory.step(later).map(|s| s.text.clone()).unwrap_or_default();
            ViolationInstance::new(
                ViolationType::Contradiction,
                later,
                DETECTOR_JUDGE,
                vec![OffendingRef::Step { step: earlier }],
                format!("judge reports step {later} conflicts with step {earlier}"),
                Criterion::ReviseStepText {
                    violation: ViolationType::Contradiction,
                    step: later,
                    original_text: text,
                },
            )
        })
        .collect()
}

/// Keeps the first instance per `(type, step)` and orders by step, then type.
pub fn dedup_instances(instances: Vec<ViolationInstance>) -> Vec<ViolationInstance> {
    let mut seen = BTreeSet::new();
    let mut out: Vec<ViolationInstance> = instances
        .into_iter()
        .filter(|v| seen.insert((v.kind, v.step)))
        .collect();
    out.sort_by_key(|v| (v.step, v.kind));
    out
}

/// Runs every rule detector over the full rule set.
pub fn rule_audit(trajectory: &Trajectory, task: &Task, lexicons: &Lexicons) -> Vec<ViolationInstance> {
    let mut all = detect_circular(trajectory);
    all.extend(detect_support(trajectory, task, lexicons));
    all.extend(detect_contradiction(trajectory, lexicons));
    dedup_instances(all)
}

pub fn audit(
    trajectory: &Trajectory,
    task: &Task,
    mode: AuditMode,
    lexicons: &Lexicons,
    judge: Option<Llm<'_>>,
) -> AuditOutcome {
    let mut all = detect_circular(trajectory);
    all.extend(detect_support(trajectory, task, lexicons));
    all.extend(detect_contradiction(trajectory, lexicons));
    let mut flags = Vec::new();
    if mode == AuditMode::RuleLlm {
        match judge {
            Some(j) => all.extend(judge_contradictions(trajectory, j, &mut flags)),
            None => flags.push(AuditFlag::JudgeUnavailable),
        }
    }
    AuditOutcome {
        instances: dedup_instances(all),
        flags,
    }
}

/// Per-type violation counts in taxonomy order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnfaithfulnessProfile {
    pub counts: [usize; 6],
}

impl UnfaithfulnessProfile {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn get(&self, t: ViolationType) -> usize {
        self.counts[t.ordinal()]
    }
}

pub fn profile(instances: &[ViolationInstance]) -> UnfaithfulnessProfile {
    let mut counts = [0; 6];
    let unique: BTreeSet<(ViolationType, usize)> = instances.iter().map(|v| (v.kind, v.step)).collect();
    for (t, _) in unique {
        counts[t.ordinal()] += 1;
    }
    UnfaithfulnessProfile { counts }
}

pub fn flagged_steps(instances: &[ViolationInstance]) -> BTreeSet<usize> {
    instances.iter().map(|v| v.step).collect()
}

/// Share of steps flagged by at least one instance. A step with several
/// violation types counts once.
pub fn unfaithful_step_rate(trajectory: &Trajectory, instances: &[ViolationInstance]) -> f64 {
    let flagged = flagged_steps(instances);
    SupportAssessment::from_flags(trajectory, &flagged, SUPPORT_THRESHOLD)
        .and_then(|a| unfaithfulness_rate(&a))
        .expect("trajectory is nonempty and the threshold is valid")
}

/// Support threshold applied to binary audit scores.
pub const SUPPORT_THRESHOLD: f64 = 0.5;

/// One audit pass over one belief, as appended to the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub task_id: String,
    pub belief: String,
    pub round: usize,
    pub steps: usize,
    pub instances: Vec<ViolationInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<AuditFlag>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FallbackPolicy, MockBackend, ScriptedFixture};
    use crate::trajectory::{EvidenceDoc, ReasoningStep};

    fn task() -> Task {
        Task {
            id: "t".into(),
            question: "q".into(),
            contexts: vec![EvidenceDoc {
                doc_id: "d1".into(),
                title: String::new(),
                sentences: vec!["alpha beta".into(), "gamma delta".into(), "epsilon".into()],
            }],
            gold_answers: vec![],
        }
    }

    fn traj(steps: Vec<ReasoningStep>) -> Trajectory {
        Trajectory::new(steps).unwrap()
    }

    fn ev(s: usize) -> EvidenceRef {
        EvidenceRef::new("d1", s)
    }

    fn kinds(v: &[ViolationInstance]) -> Vec<(ViolationType, usize)> {
        v.iter().map(|i| (i.kind, i.step)).collect()
    }

    fn grounded() -> Trajectory {
        traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "alpha beta").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "gamma follows")
                .with_premises([1])
                .with_evidence([ev(1)]),
            ReasoningStep::new(3, StepKind::Conclusion, "answer is gamma").with_premises([2]),
        ])
    }

    #[test]
    fn grounded_chain_is_clean() {
        let lex = Lexicons::default();
        assert!(rule_audit(&grounded(), &task(), &lex).is_empty());
    }

    #[test]
    fn unjustified_inference() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "alpha").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "out of thin air"),
        ]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        assert_eq!(kinds(&v), vec![(ViolationType::UnjustifiedInference, 2)]);
        assert_eq!(
            v[0].criterion().unwrap(),
            Criterion::AttachEvidence {
                step: 2,
                allow_assumption: false
            }
        );
    }

    #[test]
    fn figure_one_pattern() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "The question mentions a book series")
                .with_evidence([ev(0)]),
            ReasoningStep::new(
                2,
                StepKind::Assumption,
                "The phrase reminds me of The Hork-Bajir Chronicles, so the series is Animorphs",
            )
            .with_premises([4]),
            ReasoningStep::new(3, StepKind::Inference, "The Hork-Bajir Chronicles belong to Animorphs")
                .with_premises([2]),
            ReasoningStep::new(4, StepKind::Conclusion, "The series is Animorphs").with_premises([3]),
        ]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        assert_eq!(
            kinds(&v),
            vec![
                (ViolationType::MissingAssumption, 2),
                (ViolationType::CircularReasoning, 4)
            ]
        );
    }

    #[test]
    fn dag_has_no_cycle() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1]),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([1, 2]),
        ]);
        assert!(detect_circular(&t).is_empty());
    }

    #[test]
    fn two_step_cycle_flags_max() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Claim, "b"),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([5]),
            ReasoningStep::new(4, StepKind::Claim, "d"),
            ReasoningStep::new(5, StepKind::Inference, "e").with_premises([3]),
        ]);
        let v = detect_circular(&t);
        assert_eq!(kinds(&v), vec![(ViolationType::CircularReasoning, 5)]);
        assert_eq!(
            v[0].evidence.offending_refs,
            vec![
                OffendingRef::Premise { from: 5, to: 3 },
                OffendingRef::Premise { from: 3, to: 5 }
            ]
        );
    }

    #[test]
    fn self_loop_cycle() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([2]),
        ]);
        assert_eq!(kinds(&detect_circular(&t)), vec![(ViolationType::CircularReasoning, 2)]);
    }

    #[test]
    fn dangling_evidence_is_invalid_precondition() {
        let t = traj(vec![ReasoningStep::new(1, StepKind::Claim, "a")
            .with_evidence([EvidenceRef::new("d9", 4)])]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        assert_eq!(kinds(&v), vec![(ViolationType::InvalidPrecondition, 1)]);
        // sentence id out of range on an existing doc
        let t = traj(vec![ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(7)])]);
        assert_eq!(kinds(&rule_audit(&t, &task(), &Lexicons::default())).len(), 1);
    }

    #[test]
    fn dangling_premise_is_invalid_precondition() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1, 7]),
        ]);
        assert_eq!(
            kinds(&rule_audit(&t, &task(), &Lexicons::default())),
            vec![(ViolationType::InvalidPrecondition, 2)]
        );
    }

    #[test]
    fn universal_conclusion_with_one_sentence() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "some x are y").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Conclusion, "all X are Y").with_premises([1]),
        ]);
        assert_eq!(
            kinds(&rule_audit(&t, &task(), &Lexicons::default())),
            vec![(ViolationType::Overgeneralization, 2)]
        );
        // two distinct sentences in the closure make it acceptable
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "some x are y").with_evidence([ev(0), ev(1)]),
            ReasoningStep::new(2, StepKind::Conclusion, "all X are Y").with_premises([1]),
        ]);
        assert!(rule_audit(&t, &task(), &Lexicons::default()).is_empty());
    }

    #[test]
    fn scoped_assumption_is_fine() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Assumption, "Assume the author is Smith").with_scope([2]),
            ReasoningStep::new(2, StepKind::Inference, "Smith wrote it").with_premises([1]),
        ]);
        assert!(rule_audit(&t, &task(), &Lexicons::default()).is_empty());
    }

    #[test]
    fn unscoped_assumption_is_missing() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Assumption, "Assume the author is Smith"),
            ReasoningStep::new(2, StepKind::Inference, "Smith wrote it").with_premises([1]),
        ]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        assert_eq!(kinds(&v), vec![(ViolationType::MissingAssumption, 1)]);
        assert_eq!(
            v[0].criterion().unwrap(),
            Criterion::ScopeAssumption {
                assumption: 1,
                dependents: vec![2]
            }
        );
    }

    #[test]
    fn negation_contradiction() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "X was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Claim, "X was not born in 1990").with_evidence([ev(1)]),
        ]);
        let v = detect_contradiction(&t, &Lexicons::default());
        assert_eq!(kinds(&v), vec![(ViolationType::Contradiction, 2)]);
        assert_eq!(v[0].evidence.offending_refs, vec![OffendingRef::Step { step: 1 }]);
    }

    #[test]
    fn unrelated_steps_do_not_contradict() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "X was born in 1990"),
            ReasoningStep::new(2, StepKind::Claim, "Y is not a painter"),
        ]);
        assert!(detect_contradiction(&t, &Lexicons::default()).is_empty());
    }

    #[test]
    fn judge_adds_contradiction() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Claim, "b").with_evidence([ev(0)]),
            ReasoningStep::new(3, StepKind::Claim, "c").with_evidence([ev(0)]),
            ReasoningStep::new(4, StepKind::Claim, "d").with_evidence([ev(0)]),
        ]);
        let templates = PromptTemplates::builtin();
        let mut f = ScriptedFixture::new(FallbackPolicy::Error);
        f.insert(
            &judge_request(&t, &templates).unwrap(),
            r#"Here you go: {"conflict": true, "steps": [2, 4]}"#,
        );
        let backend = MockBackend::new(f);
        let judge = Llm {
            backend: &backend,
            templates: &templates,
        };
        let out = audit(&t, &task(), AuditMode::RuleLlm, &Lexicons::default(), Some(judge));
        assert_eq!(kinds(&out.instances), vec![(ViolationType::Contradiction, 4)]);
        assert_eq!(out.instances[0].evidence.detector_id, DETECTOR_JUDGE);
        assert!(out.flags.is_empty());
        // rule mode ignores the judge
        let out = audit(&t, &task(), AuditMode::Rule, &Lexicons::default(), Some(judge));
        assert!(out.instances.is_empty());
    }

    #[test]
    fn judge_garbage_is_flagged_not_fatal() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Claim, "b"),
            ReasoningStep::new(3, StepKind::Inference, "c"),
        ]);
        let templates = PromptTemplates::builtin();
        let mut f = ScriptedFixture::new(FallbackPolicy::Error);
        f.insert(&judge_request(&t, &templates).unwrap(), "no json here");
        let backend = MockBackend::new(f);
        let judge = Llm {
            backend: &backend,
            templates: &templates,
        };
        let out = audit(&t, &task(), AuditMode::RuleLlm, &Lexicons::default(), Some(judge));
        assert_eq!(out.flags, vec![AuditFlag::JudgeParseFailure]);
        // rule-mode findings survive
        assert_eq!(kinds(&out.instances), vec![(ViolationType::UnjustifiedInference, 3)]);
    }

    #[test]
    fn judge_reply_parsing() {
        assert_eq!(parse_judge_reply(r#"[{"conflict":false,"steps":[]}]"#), Some(vec![]));
        assert_eq!(
            parse_judge_reply(r#"[{"conflict":true,"steps":[1,3]},{"conflict":true,"steps":[2,4]}]"#),
            Some(vec![(1, 3), (2, 4)])
        );
        assert_eq!(parse_judge_reply(r#"{"conflict":true,"steps":[1]}"#), None);
        assert_eq!(parse_judge_reply("nothing"), None);
    }

    #[test]
    fn profile_counts_in_taxonomy_order() {
        assert_eq!(profile(&[]).counts, [0; 6]);
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "X was born in 1990").with_premises([3]),
            ReasoningStep::new(2, StepKind::Claim, "X was not born in 1990").with_premises([2]),
            ReasoningStep::new(3, StepKind::Claim, "c").with_premises([1]),
        ]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        assert_eq!(profile(&v).counts, [0, 0, 0, 2, 1, 0]);
        assert_eq!(profile(&v).total(), v.len());
    }

    #[test]
    fn profile_counts_duplicates_once() {
        let t = traj(vec![ReasoningStep::new(1, StepKind::Inference, "a").with_premises([1])]);
        let mut v = detect_circular(&t);
        v.extend(detect_circular(&t));
        assert_eq!(v.len(), 2);
        assert_eq!(profile(&v).counts, [0, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn acceptance_wire_format() {
        let c = Criterion::RemoveCycleEdge {
            step: 5,
            cycle: vec![(5, 3), (3, 5)],
        };
        let a = AcceptanceCriterion::from(&c);
        let v = serde_json::to_value(&a).unwrap();
        assert_eq!(v["id"], "RemoveCycleEdge");
        assert_eq!(v["params"]["step"], 5);
        assert_eq!(Criterion::try_from(&a).unwrap(), c);
        let bogus = AcceptanceCriterion {
            criterion_id: "Nope".into(),
            parameters: BTreeMap::new(),
        };
        assert_eq!(
            Criterion::try_from(&bogus),
            Err(CriterionError::UnknownCriterion("Nope".into()))
        );
    }

    #[test]
    fn instance_json_shape() {
        let t = traj(vec![ReasoningStep::new(1, StepKind::Inference, "a")]);
        let v = rule_audit(&t, &task(), &Lexicons::default());
        let j = serde_json::to_value(&v[0]).unwrap();
        for key in ["type", "step", "detector", "offending_refs", "explanation", "acceptance"] {
            assert!(j.get(key).is_some(), "missing {key}");
        }
        assert_eq!(j["type"], "Unjustified_Inference");
        let back: ViolationInstance = serde_json::from_value(j).unwrap();
        assert_eq!(back, v[0]);
    }

    #[test]
    fn negation_pair_rule() {
        let lex = Lexicons::default();
        assert!(lex.negation_pair("X was born in 1990", "X was not born in 1990"));
        assert!(lex.negation_pair("X was never here", "X was here"));
        assert!(!lex.negation_pair("X was born", "X was born"));
        assert!(!lex.negation_pair("X was born", "X was also born"));
    }
}
