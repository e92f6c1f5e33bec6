//! Constraint-guided minimal repair and belief commitment.
//!
//! Each audit instance becomes a [`RepairConstraint`]. A round walks the
//! constraints in step order, proposes local edits for each, and keeps the
//! candidate minimizing `unsatisfied + lambda * delta`. Rounds alternate with
//! re-audits until nothing is flagged, the round budget runs out, or a round
//! makes no edit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{
    audit, closure_evidence, detect_circular, detect_contradiction, detect_support, profile,
    unfaithful_step_rate, unresolved_refs, AcceptanceCriterion, AuditFlag, AuditMode, Criterion,
    CriterionError, Lexicons, Llm, OffendingRef, UnfaithfulnessProfile, ViolationInstance,
    ViolationType,
};
use crate::backend::GenRequest;
use crate::generation::{parse_step_lines, render_step};
use crate::templates::render_contexts;
use crate::text::{overlap, rewrite_words};
use crate::trajectory::{
    premise_graph, validate_trajectory, Belief, EvidenceRef, ReasoningStep, StepKind, Task, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EditKind {
    AttachEvidence,
    InsertAssumption,
    ScopeAssumption,
    RemoveCycleEdge,
    ReviseStepText,
    FixReference,
    HedgeConclusion,
}

impl EditKind {
    pub fn for_criterion(c: &Criterion) -> Self {
        match c {
            Criterion::AttachEvidence {
                allow_assumption: true,
                ..
            }
            | Criterion::InsertAssumption { .. } => EditKind::InsertAssumption,
            Criterion::AttachEvidence { .. } => EditKind::AttachEvidence,
            Criterion::ScopeAssumption { .. } => EditKind::ScopeAssumption,
            Criterion::RemoveCycleEdge { .. } => EditKind::RemoveCycleEdge,
            Criterion::FixReference { .. } => EditKind::FixReference,
            Criterion::HedgeConclusion { .. } => EditKind::HedgeConclusion,
            Criterion::ReviseStepText { .. } => EditKind::ReviseStepText,
        }
    }
}

/// One violation instance turned into a checkable repair target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairConstraint {
    pub source: ViolationInstance,
    pub prescribed_edit_kind: EditKind,
    #[serde(rename = "sat_params")]
    pub criterion: Criterion,
}

impl RepairConstraint {
    pub fn from_instance(source: &ViolationInstance) -> Result<Self, CriterionError> {
        let criterion = source.criterion()?;
        Ok(Self {
            source: source.clone(),
            prescribed_edit_kind: EditKind::for_criterion(&criterion),
            criterion,
        })
    }

    /// Steps an edit for this constraint may touch, in the coordinates of
    /// the audited trajectory.
    pub fn failure_slice(&self) -> BTreeSet<usize> {
        let mut slice = BTreeSet::from([self.source.step]);
        match &self.criterion {
            Criterion::RemoveCycleEdge { cycle, .. } => {
                slice.extend(cycle.iter().flat_map(|&(u, v)| [u, v]));
            }
            Criterion::ScopeAssumption { assumption, .. } => {
                slice.insert(*assumption);
            }
            _ => {}
        }
        slice
    }
}

pub fn constraints_for(instances: &[ViolationInstance]) -> Result<Vec<RepairConstraint>, CriterionError> {
    instances.iter().map(RepairConstraint::from_instance).collect()
}

/// Rule-mode detector output of one type, used to re-check text revisions.
fn rule_instances_of(
    kind: ViolationType,
    trajectory: &Trajectory,
    task: &Task,
    lexicons: &Lexicons,
) -> Vec<ViolationInstance> {
    let found = match kind {
        ViolationType::CircularReasoning => detect_circular(trajectory),
        ViolationType::Contradiction => detect_contradiction(trajectory, lexicons),
        _ => detect_support(trajectory, task, lexicons),
    };
    found.into_iter().filter(|v| v.kind == kind).collect()
}

/// True when an upstream, scoped and hedged assumption cited by `step`
/// covers it.
fn covered_by_assumption(trajectory: &Trajectory, step: usize, lexicons: &Lexicons) -> bool {
    let Some(s) = trajectory.step(step) else {
        return false;
    };
    s.premise_refs.iter().any(|&a| {
        a < step
            && trajectory.step(a).is_some_and(|a_step| {
                a_step.kind == StepKind::Assumption
                    && a_step.assumption_scope.as_ref().is_some_and(|sc| sc.contains(&step))
                    && lexicons.is_hedged(&a_step.text)
            })
    })
}

/// Whether `trajectory` satisfies `criterion`.
pub fn sat(trajectory: &Trajectory, task: &Task, criterion: &Criterion, lexicons: &Lexicons) -> bool {
    match criterion {
        Criterion::AttachEvidence {
            step,
            allow_assumption,
        } => trajectory.step(*step).is_some_and(|s| {
            s.evidence_refs.iter().any(|r| task.resolves(r))
                || (*allow_assumption && covered_by_assumption(trajectory, *step, lexicons))
        }),
        Criterion::InsertAssumption { step } => covered_by_assumption(trajectory, *step, lexicons),
        Criterion::ScopeAssumption {
            assumption,
            dependents,
        } => trajectory.step(*assumption).is_some_and(|a| {
            a.kind == StepKind::Assumption
                && a.has_scope()
                && a.assumption_scope
                    .as_ref()
                    .is_some_and(|sc| dependents.iter().all(|d| sc.contains(d)))
                && lexicons.is_hedged(&a.text)
        }),
        Criterion::RemoveCycleEdge { cycle, .. } => !premise_graph(trajectory).closes(cycle),
        Criterion::FixReference { step } => {
            trajectory.contains_index(*step) && unresolved_refs(trajectory, task, *step).is_empty()
        }
        Criterion::HedgeConclusion { step } => trajectory.step(*step).is_some_and(|s| {
            !lexicons.is_universal(&s.text) || closure_evidence(trajectory, *step).len() >= 2
        }),
        Criterion::ReviseStepText {
            violation,
            step,
            original_text,
        } => trajectory.step(*step).is_some_and(|s| {
            s.text != *original_text
                && !rule_instances_of(*violation, trajectory, task, lexicons)
                    .iter()
                    .any(|v| v.step == *step)
        }),
    }
}

/// [`sat`] on the wire form; unknown criterion ids are an error.
pub fn sat_acceptance(
    trajectory: &Trajectory,
    task: &Task,
    acceptance: &AcceptanceCriterion,
    lexicons: &Lexicons,
) -> Result<bool, CriterionError> {
    Ok(sat(trajectory, task, &Criterion::try_from(acceptance)?, lexicons))
}

/// Unit-cost step edit, indexed against the trajectory the round started
/// from (`Insert.at` is the position in the edited trajectory).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Insert { at: usize, step: ReasoningStep },
    Delete { index: usize },
    Modify { index: usize, step: ReasoningStep },
}

#[derive(Debug, Clone, PartialEq)]
struct Row {
    origin: Option<usize>,
    dirty: bool,
    step: ReasoningStep,
}

/// A trajectory under edit that remembers where each step came from, so the
/// accumulated edit distance is always measured against the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    base_len: usize,
    rows: Vec<Row>,
    deleted: Vec<usize>,
}

fn shift_refs(set: &mut BTreeSet<usize>, f: impl Fn(usize) -> Option<usize>) {
    *set = set.iter().filter_map(|&r| f(r)).collect();
}

impl EditSession {
    pub fn new(base: &Trajectory) -> Self {
        Self {
            base_len: base.len(),
            rows: base
                .steps()
                .iter()
                .map(|s| Row {
                    origin: Some(s.index),
                    dirty: false,
                    step: s.clone(),
                })
                .collect(),
            deleted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn step(&self, index: usize) -> Option<&ReasoningStep> {
        index.checked_sub(1).and_then(|i| self.rows.get(i)).map(|r| &r.step)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.rows.iter().map(|r| r.step.clone()).collect()).expect("sessions never empty")
    }

    /// Current index of a step of the starting trajectory.
    pub fn current_index(&self, original: usize) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| r.origin == Some(original))
            .map(|p| p + 1)
    }

    pub fn modify(&mut self, index: usize, f: impl FnOnce(&mut ReasoningStep)) {
        let row = &mut self.rows[index - 1];
        let before = row.step.clone();
        f(&mut row.step);
        row.step.index = index;
        if row.step != before {
            row.dirty = true;
        }
    }

    /// Inserts `step` so that it gets index `at`; later steps and every ref
    /// at or past `at` shift up by one.
    pub fn insert(&mut self, at: usize, mut step: ReasoningStep) {
        assert!(at >= 1 && at <= self.rows.len() + 1, "insert position out of range");
        let bump = |r: usize| Some(if r >= at { r + 1 } else { r });
        for row in &mut self.rows {
            shift_refs(&mut row.step.premise_refs, bump);
            if let Some(sc) = row.step.assumption_scope.as_mut() {
                shift_refs(sc, bump);
            }
        }
        step.index = at;
        self.rows.insert(
            at - 1,
            Row {
                origin: None,
                dirty: true,
                step,
            },
        );
        self.reindex();
    }

    /// Removes step `index`; refs to it are dropped and in-range refs past it
    /// shift down. Dangling refs stay dangling.
    pub fn delete(&mut self, index: usize) {
        let old_len = self.rows.len();
        let row = self.rows.remove(index - 1);
        if let Some(o) = row.origin {
            self.deleted.push(o);
        }
        let drop_shift = |r: usize| match r {
            r if r == index => None,
            r if r > index && r <= old_len => Some(r - 1),
            r => Some(r),
        };
        for row in &mut self.rows {
            shift_refs(&mut row.step.premise_refs, drop_shift);
            if let Some(sc) = row.step.assumption_scope.as_mut() {
                shift_refs(sc, drop_shift);
            }
        }
        self.reindex();
    }

    fn reindex(&mut self) {
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.step.index = i + 1;
        }
    }

    pub fn ops(&self) -> Vec<EditOp> {
        let mut ops: Vec<EditOp> = self.deleted.iter().map(|&index| EditOp::Delete { index }).collect();
        for (pos, row) in self.rows.iter().enumerate() {
            match row.origin {
                None => ops.push(EditOp::Insert {
                    at: pos + 1,
                    step: row.step.clone(),
                }),
                Some(index) if row.dirty => ops.push(EditOp::Modify {
                    index,
                    step: row.step.clone(),
                }),
                Some(_) => {}
            }
        }
        ops
    }

    /// Unit-cost edit distance from the starting trajectory.
    pub fn delta(&self) -> usize {
        self.deleted.len() + self.rows.iter().filter(|r| r.origin.is_none() || r.dirty).count()
    }

    /// Original indices of every touched step, plus current indices of
    /// inserted steps (reported as `base_len + position`, so they never
    /// collide with original indices).
    pub fn touched(&self) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self.deleted.iter().copied().collect();
        for (pos, row) in self.rows.iter().enumerate() {
            match row.origin {
                Some(o) if row.dirty => {
                    out.insert(o);
                }
                None => {
                    out.insert(self.base_len + pos + 1);
                }
                _ => {}
            }
        }
        out
    }

    fn remap(&self, c: &Criterion) -> Option<Criterion> {
        c.remap(&|i| self.current_index(i))
    }
}

/// A proposed edit, with the accumulated cost against the round's start.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairCandidate {
    pub description: String,
    pub session: EditSession,
}

impl RepairCandidate {
    pub fn trajectory(&self) -> Trajectory {
        self.session.trajectory()
    }

    pub fn edit_ops(&self) -> Vec<EditOp> {
        self.session.ops()
    }

    pub fn delta(&self) -> usize {
        self.session.delta()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairMode {
    #[default]
    Rule,
    Llm,
}

/// Severity weight per violation type, in taxonomy order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct SeverityWeights(pub [f64; 6]);

impl Default for SeverityWeights {
    fn default() -> Self {
        let mut w = [0.5; 6];
        w[ViolationType::CircularReasoning.ordinal()] = 1.0;
        w[ViolationType::Contradiction.ordinal()] = 1.0;
        Self(w)
    }
}

impl SeverityWeights {
    pub fn get(&self, t: ViolationType) -> f64 {
        self.0[t.ordinal()]
    }

    pub fn weighted(&self, p: &UnfaithfulnessProfile) -> f64 {
        ViolationType::ALL
            .iter()
            .map(|&t| self.get(t) * p.get(t) as f64)
            .sum()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("unknown violation type `{0}`")]
    UnknownType(String),
    #[error("weight for {0} must be finite and non-negative")]
    Negative(String),
}

impl TryFrom<BTreeMap<String, f64>> for SeverityWeights {
    type Error = WeightError;

    /// Missing types keep their default weight.
    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        let mut w = Self::default();
        for (name, value) in map {
            let t = ViolationType::from_name(&name).ok_or_else(|| WeightError::UnknownType(name.clone()))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(WeightError::Negative(name));
            }
            w.0[t.ordinal()] = value;
        }
        Ok(w)
    }
}

impl From<SeverityWeights> for BTreeMap<String, f64> {
    fn from(w: SeverityWeights) -> Self {
        ViolationType::ALL
            .iter()
            .map(|t| (t.name().to_string(), w.get(*t)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub lambda: f64,
    pub r_max: usize,
    /// Upper bound on model-proposed rewrites per constraint.
    pub n_candidates: usize,
    pub mode: RepairMode,
    pub audit_mode: AuditMode,
    pub lexicons: Lexicons,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            r_max: 10,
            n_candidates: 3,
            mode: RepairMode::Rule,
            audit_mode: AuditMode::Rule,
            lexicons: Lexicons::default(),
        }
    }
}

/// Everything candidate generation needs besides the constraint.
#[derive(Clone, Copy)]
pub struct RepairContext<'a> {
    pub task: &'a Task,
    pub config: &'a RepairConfig,
    pub llm: Option<Llm<'a>>,
}

/// Resolving sentences ranked by token overlap with `text`, best first; ties
/// keep context order.
fn ranked_sentences(task: &Task, text: &str, exclude: &BTreeSet<EvidenceRef>) -> Vec<EvidenceRef> {
    let mut scored: Vec<(usize, usize, EvidenceRef)> = task
        .all_sentences()
        .enumerate()
        .filter(|(_, (r, _))| !exclude.contains(r))
        .map(|(order, (r, sent))| (overlap(text, sent), order, r))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, _, r)| r).collect()
}

fn best_sentence(task: &Task, step: &ReasoningStep) -> Option<EvidenceRef> {
    ranked_sentences(task, &step.text, &step.evidence_refs).into_iter().next()
}

/// Prefixes the first hedge word unless the text already carries one.
fn hedge_text(text: &str, lexicons: &Lexicons) -> String {
    if lexicons.is_hedged(text) {
        return text.to_string();
    }
    let hedge = lexicons.hedge.first().map(String::as_str).unwrap_or("assume");
    let mut cs = hedge.chars();
    let cap: String = cs
        .next()
        .map(|c| c.to_uppercase().chain(cs).collect())
        .unwrap_or_default();
    let mut body = text.chars();
    let lowered: String = body
        .next()
        .map(|c| c.to_lowercase().chain(body).collect())
        .unwrap_or_default();
    format!("{cap} that {lowered}")
}

fn soften_word(word: &str, lexicons: &Lexicons) -> Option<String> {
    if !lexicons.universal.iter().any(|u| u == word) {
        return None;
    }
    Some(
        match word {
            "all" | "every" => "some",
            "always" => "often",
            "never" => "rarely",
            _ => "",
        }
        .to_string(),
    )
}

/// If `step` would be left as an unsupported inference, cite the best
/// sentence instead.
fn keep_supported(step: &mut ReasoningStep, task: &Task) {
    if step.kind == StepKind::Inference && step.is_unsupported() {
        if let Some(r) = best_sentence(task, step) {
            step.evidence_refs.insert(r);
        }
    }
}

fn templated_candidates(
    session: &EditSession,
    criterion: &Criterion,
    constraint: &RepairConstraint,
    ctx: &RepairContext<'_>,
) -> Vec<RepairCandidate> {
    let task = ctx.task;
    let lex = &ctx.config.lexicons;
    let mut out = Vec::new();
    let mut push = |description: String, edit: &dyn Fn(&mut EditSession)| {
        let mut s = session.clone();
        edit(&mut s);
        out.push(RepairCandidate { description, session: s });
    };
    match criterion {
        Criterion::AttachEvidence {
            step,
            allow_assumption,
        } => {
            let Some(current) = session.step(*step) else {
                return vec![];
            };
            if let Some(r) = best_sentence(task, current) {
                push(format!("attach-evidence step {step} {r}"), &|s| {
                    s.modify(*step, |st| {
                        st.evidence_refs.insert(r.clone());
                    })
                });
            } else if *allow_assumption {
                push(format!("insert-assumption before step {step}"), &|s| {
                    insert_assumption(s, *step, lex)
                });
            }
        }
        Criterion::InsertAssumption { step } => {
            if session.step(*step).is_some() {
                push(format!("insert-assumption before step {step}"), &|s| {
                    insert_assumption(s, *step, lex)
                });
            }
        }
        Criterion::ScopeAssumption {
            assumption,
            dependents,
        } => {
            if session.step(*assumption).is_some() {
                push(format!("scope-assumption step {assumption}"), &|s| {
                    s.modify(*assumption, |st| {
                        st.assumption_scope
                            .get_or_insert_with(BTreeSet::new)
                            .extend(dependents.iter().copied());
                        st.text = hedge_text(&st.text, lex);
                    })
                });
            }
        }
        Criterion::RemoveCycleEdge { cycle, .. } => {
            for &(u, v) in cycle.iter().filter(|(u, v)| v >= u) {
                push(format!("remove-edge {u}->{v}"), &|s| {
                    s.modify(u, |st| {
                        st.premise_refs.remove(&v);
                        keep_supported(st, task);
                    })
                });
            }
        }
        Criterion::FixReference { step } => {
            let Some(current) = session.step(*step) else {
                return vec![];
            };
            let trajectory = session.trajectory();
            let dangling_premises: BTreeSet<usize> = current
                .premise_refs
                .iter()
                .copied()
                .filter(|&p| !trajectory.contains_index(p))
                .collect();
            let dangling_evidence: BTreeSet<EvidenceRef> = current
                .evidence_refs
                .iter()
                .filter(|r| !task.resolves(r))
                .cloned()
                .collect();
            let rebind = |st: &mut ReasoningStep| {
                st.premise_refs.retain(|p| !dangling_premises.contains(p));
                for bad in &dangling_evidence {
                    st.evidence_refs.remove(bad);
                    let valid: BTreeSet<EvidenceRef> =
                        st.evidence_refs.iter().filter(|r| task.resolves(r)).cloned().collect();
                    if let Some(r) = ranked_sentences(task, &st.text, &valid).into_iter().next() {
                        st.evidence_refs.insert(r);
                    }
                }
                keep_supported(st, task);
            };
            let strip = |st: &mut ReasoningStep| {
                st.premise_refs.retain(|p| !dangling_premises.contains(p));
                st.evidence_refs.retain(|r| !dangling_evidence.contains(r));
                keep_supported(st, task);
            };
            push(format!("fix-reference step {step} rebind"), &|s| s.modify(*step, rebind));
            push(format!("fix-reference step {step} strip"), &|s| s.modify(*step, strip));
        }
        Criterion::HedgeConclusion { step } => {
            if session.step(*step).is_none() {
                return vec![];
            }
            push(format!("hedge-conclusion step {step} replace universal"), &|s| {
                s.modify(*step, |st| st.text = rewrite_words(&st.text, |w| soften_word(w, lex)))
            });
            let trajectory = session.trajectory();
            let cited = closure_evidence(&trajectory, *step);
            let need = 2usize.saturating_sub(cited.len());
            let text = session.step(*step).map(|s| s.text.clone()).unwrap_or_default();
            let extra: Vec<EvidenceRef> = ranked_sentences(task, &text, &cited).into_iter().take(need).collect();
            if need > 0 && extra.len() == need {
                push(format!("hedge-conclusion step {step} second evidence"), &|s| {
                    s.modify(*step, |st| st.evidence_refs.extend(extra.iter().cloned()))
                });
            }
        }
        Criterion::ReviseStepText { step, .. } => {
            let Some(current) = session.step(*step) else {
                return vec![];
            };
            let against = constraint.source.evidence.offending_refs.iter().find_map(|r| match r {
                OffendingRef::Step { step } => session.current_index(*step),
                _ => None,
            });
            if let Some(text) = against.and_then(|j| session.step(j)).map(|s| s.text.clone()) {
                if text != current.text {
                    push(format!("revise step {step} align"), &|s| {
                        s.modify(*step, |st| st.text = text.clone())
                    });
                }
            }
            let stripped = rewrite_words(&current.text, |w| {
                lex.negation.iter().any(|n| n == w).then(String::new)
            });
            if !stripped.is_empty() && stripped != current.text {
                push(format!("revise step {step} drop negation"), &|s| {
                    s.modify(*step, |st| st.text = stripped.clone())
                });
            }
        }
    }
    out
}

/// Inserts a scoped, hedged assumption right before `step` and makes `step`
/// cite it.
fn insert_assumption(session: &mut EditSession, step: usize, lexicons: &Lexicons) {
    let text = session.step(step).map(|s| s.text.clone()).unwrap_or_default();
    let assumption = ReasoningStep::new(step, StepKind::Assumption, hedge_text(&text, lexicons)).with_scope([step + 1]);
    session.insert(step, assumption);
    session.modify(step + 1, |st| {
        st.premise_refs.insert(step);
    });
}

/// Prompt asking the model for rewrites of the constraint's anchor step.
pub fn repair_request(
    trajectory: &Trajectory,
    task: &Task,
    constraint: &RepairConstraint,
    anchor: usize,
    llm: Llm<'_>,
    n: usize,
) -> Option<GenRequest> {
    let step = trajectory.step(anchor)?;
    let trace: Vec<String> = trajectory.steps().iter().map(render_step).collect();
    let criterion = serde_json::to_string(&constraint.source.acceptance).expect("criterion serializes");
    let prompt = llm.templates.repair_step.render(&[
        ("question", task.question.as_str()),
        ("contexts", render_contexts(task).as_str()),
        ("trace", trace.join("\n").as_str()),
        ("index", anchor.to_string().as_str()),
        ("step", render_step(step).as_str()),
        ("violation", constraint.source.kind.name()),
        ("explanation", constraint.source.evidence.explanation.as_str()),
        ("criterion", criterion.as_str()),
        ("n", n.to_string().as_str()),
    ]);
    Some(
        GenRequest::new(llm.templates.system.body.clone(), prompt)
            .with_temperature(0.0)
            .with_seed(Some(0)),
    )
}

fn model_candidates(
    session: &EditSession,
    criterion: &Criterion,
    constraint: &RepairConstraint,
    ctx: &RepairContext<'_>,
    llm: Llm<'_>,
) -> Vec<RepairCandidate> {
    let anchor = criterion.step();
    let trajectory = session.trajectory();
    let n = ctx.config.n_candidates.max(1);
    let Some(req) = repair_request(&trajectory, ctx.task, constraint, anchor, llm, n) else {
        return vec![];
    };
    let Ok(reply) = llm.backend.generate(&req) else {
        return vec![];
    };
    parse_step_lines(&reply.text)
        .into_iter()
        .filter_map(Result::ok)
        .take(n)
        .enumerate()
        .filter_map(|(i, rewrite)| {
            let mut s = session.clone();
            s.modify(anchor, |st| {
                st.kind = rewrite.kind;
                st.text = rewrite.text.clone();
                st.premise_refs = rewrite.premise_refs.clone();
                st.evidence_refs = rewrite.evidence_refs.clone();
                st.assumption_scope = rewrite.assumption_scope.clone();
            });
            validate_trajectory(&s.trajectory()).is_empty().then(|| RepairCandidate {
                description: format!("rewrite step {anchor} #{}", i + 1),
                session: s,
            })
        })
        .collect()
}

/// Candidate edits for one constraint, starting from `session`. In model
/// mode the model's rewrites are used when any survive validation, with
/// the templated edits as fallback.
pub fn propose_in_session(
    session: &EditSession,
    constraint: &RepairConstraint,
    ctx: &RepairContext<'_>,
) -> Vec<RepairCandidate> {
    let Some(criterion) = session.remap(&constraint.criterion) else {
        return vec![];
    };
    if let (RepairMode::Llm, Some(llm)) = (ctx.config.mode, ctx.llm) {
        let found = model_candidates(session, &criterion, constraint, ctx, llm);
        if !found.is_empty() {
            return found;
        }
    }
    templated_candidates(session, &criterion, constraint, ctx)
        .into_iter()
        .filter(|c| validate_trajectory(&c.trajectory()).is_empty())
        .collect()
}

pub fn propose_repairs(
    trajectory: &Trajectory,
    constraint: &RepairConstraint,
    ctx: &RepairContext<'_>,
) -> Vec<RepairCandidate> {
    propose_in_session(&EditSession::new(trajectory), constraint, ctx)
}

/// Scored candidate as seen by the greedy chooser.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub unsatisfied: usize,
    pub delta: usize,
    pub description: String,
}

impl CandidateScore {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.unsatisfied as f64 + lambda * self.delta as f64
    }
}

/// Minimizer of `unsatisfied + lambda * delta`, ties by smaller delta then
/// description.
pub fn pick_candidate(options: &[CandidateScore], lambda: f64) -> Option<usize> {
    (0..options.len()).min_by(|&a, &b| {
        let (x, y) = (&options[a], &options[b]);
        x.objective(lambda)
            .total_cmp(&y.objective(lambda))
            .then(x.delta.cmp(&y.delta))
            .then(x.description.cmp(&y.description))
    })
}

fn unsatisfied(session: &EditSession, constraints: &[RepairConstraint], ctx: &RepairContext<'_>) -> Vec<usize> {
    let trajectory = session.trajectory();
    constraints
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            session
                .remap(&c.criterion)
                .is_some_and(|crit| !sat(&trajectory, ctx.task, &crit, &ctx.config.lexicons))
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEdit {
    pub kind: ViolationType,
    pub step: usize,
    pub description: String,
    pub delta: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRepair {
    pub constraints: usize,
    /// Unsatisfied constraint count before the first and after each applied
    /// edit.
    pub loss_trace: Vec<usize>,
    pub applied: Vec<AppliedEdit>,
    pub edit_ops: Vec<EditOp>,
    pub delta: usize,
    /// `(type, step)` of constraints still unsatisfied after the round.
    pub unsatisfied: Vec<(ViolationType, usize)>,
    /// Touched original indices all lie in some constraint's failure slice.
    pub local: bool,
}

/// One greedy pass over `constraints`; returns the edited trajectory.
pub fn repair_round(
    trajectory: &Trajectory,
    constraints: &[RepairConstraint],
    ctx: &RepairContext<'_>,
) -> (Trajectory, RoundRepair) {
    let lambda = ctx.config.lambda;
    let mut session = EditSession::new(trajectory);
    let mut order: Vec<usize> = (0..constraints.len()).collect();
    order.sort_by_key(|&i| (constraints[i].source.step, constraints[i].source.kind, i));

    let mut open = unsatisfied(&session, constraints, ctx);
    let mut loss_trace = vec![open.len()];
    let mut applied = Vec::new();
    for ci in order {
        if !open.contains(&ci) {
            continue;
        }
        let candidates = propose_in_session(&session, &constraints[ci], ctx);
        let scored: Vec<(CandidateScore, Vec<usize>)> = candidates
            .iter()
            .map(|c| {
                let left = unsatisfied(&c.session, constraints, ctx);
                (
                    CandidateScore {
                        unsatisfied: left.len(),
                        delta: c.delta(),
                        description: c.description.clone(),
                    },
                    left,
                )
            })
            .collect();
        let scores: Vec<CandidateScore> = scored.iter().map(|(s, _)| s.clone()).collect();
        let Some(best) = pick_candidate(&scores, lambda) else {
            continue;
        };
        if scores[best].unsatisfied >= open.len() {
            continue;
        }
        session = candidates[best].session.clone();
        open = scored[best].1.clone();
        loss_trace.push(open.len());
        applied.push(AppliedEdit {
            kind: constraints[ci].source.kind,
            step: constraints[ci].source.step,
            description: scores[best].description.clone(),
            delta: scores[best].delta,
        });
    }

    let slice: BTreeSet<usize> = constraints.iter().flat_map(|c| c.failure_slice()).collect();
    let base_len = trajectory.len();
    let local = session.touched().iter().all(|&i| i > base_len || slice.contains(&i));
    let report = RoundRepair {
        constraints: constraints.len(),
        loss_trace,
        applied,
        edit_ops: session.ops(),
        delta: session.delta(),
        unsatisfied: open
            .iter()
            .map(|&i| (constraints[i].source.kind, constraints[i].source.step))
            .collect(),
        local,
    };
    (session.trajectory(), report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub instances: Vec<ViolationInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<AuditFlag>,
    pub steps: usize,
    pub usr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RoundRepair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub trajectory: Trajectory,
    /// Repair rounds run, at least 1.
    pub rounds_used: usize,
    /// Rounds in which the repair step actually ran (0 for clean input).
    pub repair_rounds: usize,
    pub residual: Vec<ViolationInstance>,
    pub converged: bool,
    pub stalled: bool,
    pub initial_violations: usize,
    pub trace: Vec<RoundTrace>,
}

impl RepairOutcome {
    pub fn profile(&self) -> UnfaithfulnessProfile {
        profile(&self.residual)
    }

    /// Per-audit unfaithful step rate, in round order.
    pub fn usr_curve(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.usr).collect()
    }
}

/// Audit, repair, re-audit until clean, stalled or out of rounds.
pub fn audit_repair_loop(belief: &Belief, task: &Task, ctx: &RepairContext<'_>) -> RepairOutcome {
    let cfg = ctx.config;
    let r_max = cfg.r_max.max(1);
    let mut current = belief.trajectory.clone();
    let mut trace: Vec<RoundTrace> = Vec::new();
    let mut repair_rounds = 0;
    let mut stalled = false;
    loop {
        let found = audit(&current, task, cfg.audit_mode, &cfg.lexicons, ctx.llm);
        let mut entry = RoundTrace {
            round: trace.len() + 1,
            usr: unfaithful_step_rate(&current, &found.instances),
            steps: current.len(),
            instances: found.instances,
            flags: found.flags,
            repair: None,
        };
        if entry.instances.is_empty() || repair_rounds == r_max || stalled {
            trace.push(entry);
            break;
        }
        let constraints = match constraints_for(&entry.instances) {
            Ok(c) => c,
            Err(_) => {
                // auditor output is always well-formed; treat as a stall
                stalled = true;
                trace.push(entry);
                break;
            }
        };
        let (next, report) = repair_round(&current, &constraints, ctx);
        repair_rounds += 1;
        if report.applied.is_empty() {
            stalled = true;
        }
        entry.repair = Some(report);
        trace.push(entry);
        if stalled {
            break;
        }
        current = next;
    }
    let last = trace.last().expect("at least one audit");
    let residual = last.instances.clone();
    RepairOutcome {
        trajectory: current,
        rounds_used: repair_rounds.max(1),
        repair_rounds,
        converged: residual.is_empty(),
        stalled,
        initial_violations: trace[0].instances.len(),
        residual,
        trace,
    }
}

/// Repaired belief competing for commitment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitCandidate {
    pub q_tilde: f64,
    pub profile: UnfaithfulnessProfile,
}

pub fn commit_score(c: &CommitCandidate, alpha: f64, weights: &SeverityWeights) -> f64 {
    c.q_tilde - alpha * weights.weighted(&c.profile)
}

/// Scores closer than this are ties.
const SCORE_TIE: f64 = 1e-9;

/// Index of the belief to commit; `None` only for an empty list.
pub fn commit(candidates: &[CommitCandidate], alpha: f64, weights: &SeverityWeights) -> Option<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| commit_score(c, alpha, weights)).collect();
    let mut best: Option<usize> = None;
    for i in 0..candidates.len() {
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        let better = if (scores[i] - scores[b]).abs() > SCORE_TIE {
            scores[i] > scores[b]
        } else {
            candidates[i].profile.total() < candidates[b].profile.total()
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Entry of the append-only memory commit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub task_id: String,
    pub belief_id: String,
    pub claim: String,
    pub trajectory: Trajectory,
    pub rounds_used: usize,
    pub profile: UnfaithfulnessProfile,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::rule_audit;
    use crate::backend::{FallbackPolicy, MockBackend, ScriptedFixture};
    use crate::templates::PromptTemplates;
    use crate::trajectory::EvidenceDoc;

    fn task() -> Task {
        Task {
            id: "t".into(),
            question: "Where was Smith born?".into(),
            contexts: vec![EvidenceDoc {
                doc_id: "d1".into(),
                title: String::new(),
                sentences: vec![
                    "Smith was born in 1990".into(),
                    "The city of Leeds hosted the birth registry of Smith".into(),
                    "Leeds is in England".into(),
                ],
            }],
            gold_answers: vec!["Leeds".into()],
        }
    }

    fn ev(s: usize) -> EvidenceRef {
        EvidenceRef::new("d1", s)
    }

    fn traj(steps: Vec<ReasoningStep>) -> Trajectory {
        Trajectory::new(steps).unwrap()
    }

    fn cfg() -> RepairConfig {
        RepairConfig::default()
    }

    fn ctx<'a>(task: &'a Task, cfg: &'a RepairConfig) -> RepairContext<'a> {
        RepairContext { task, config: cfg, llm: None }
    }

    fn only_constraint(t: &Trajectory, task: &Task) -> RepairConstraint {
        let v = rule_audit(t, task, &Lexicons::default());
        assert_eq!(v.len(), 1, "{v:?}");
        RepairConstraint::from_instance(&v[0]).unwrap()
    }

    fn belief(t: Trajectory) -> Belief {
        Belief {
            persona_id: "p".into(),
            claim: "Leeds".into(),
            trajectory: t,
            degraded: false,
        }
    }

    #[test]
    fn fix_reference_sat() {
        let task = task();
        let lex = Lexicons::default();
        let c = Criterion::FixReference { step: 1 };
        let bad = traj(vec![ReasoningStep::new(1, StepKind::Claim, "x").with_evidence([EvidenceRef::new("d9", 4)])]);
        let good = traj(vec![ReasoningStep::new(1, StepKind::Claim, "x").with_evidence([ev(2)])]);
        assert!(!sat(&bad, &task, &c, &lex));
        assert!(sat(&good, &task, &c, &lex));
    }

    #[test]
    fn cycle_sat_after_edge_removed() {
        let task = task();
        let lex = Lexicons::default();
        let c = Criterion::RemoveCycleEdge {
            step: 5,
            cycle: vec![(5, 3), (3, 5)],
        };
        let mk = |three: &[usize]| {
            traj(vec![
                ReasoningStep::new(1, StepKind::Claim, "a"),
                ReasoningStep::new(2, StepKind::Claim, "b"),
                ReasoningStep::new(3, StepKind::Inference, "c").with_premises(three.to_vec()),
                ReasoningStep::new(4, StepKind::Claim, "d"),
                ReasoningStep::new(5, StepKind::Inference, "e").with_premises([3]),
            ])
        };
        assert!(!sat(&mk(&[5]), &task, &c, &lex));
        assert!(sat(&mk(&[1]), &task, &c, &lex));
    }

    #[test]
    fn hedge_conclusion_unsat_with_one_sentence() {
        let task = task();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "x").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Conclusion, "all births are in Leeds").with_premises([1]),
        ]);
        assert!(!sat(&t, &task, &Criterion::HedgeConclusion { step: 2 }, &Lexicons::default()));
    }

    #[test]
    fn unknown_criterion_is_error() {
        let a = AcceptanceCriterion {
            criterion_id: "MakeItBetter".into(),
            parameters: BTreeMap::new(),
        };
        let t = traj(vec![ReasoningStep::new(1, StepKind::Claim, "x")]);
        assert!(sat_acceptance(&t, &task(), &a, &Lexicons::default()).is_err());
    }

    #[test]
    fn attach_evidence_picks_max_overlap() {
        let task = task();
        let cfg = cfg();
        // shares city, leeds, registry, smith with sentence 1
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith exists").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "the registry of Smith sits in the city of Leeds"),
        ]);
        let c = only_constraint(&t, &task);
        assert_eq!(c.prescribed_edit_kind, EditKind::AttachEvidence);
        let cands = propose_repairs(&t, &c, &ctx(&task, &cfg));
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].delta(), 1);
        assert!(cands[0].trajectory().step(2).unwrap().evidence_refs.contains(&ev(1)));
    }

    #[test]
    fn cycle_candidate_deletes_forward_ref() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Claim, "b").with_evidence([ev(0)]),
            ReasoningStep::new(3, StepKind::Inference, "c").with_premises([1, 5]),
            ReasoningStep::new(4, StepKind::Claim, "d").with_evidence([ev(0)]),
            ReasoningStep::new(5, StepKind::Inference, "e").with_premises([3]),
        ]);
        let c = only_constraint(&t, &task);
        let cands = propose_repairs(&t, &c, &ctx(&task, &cfg));
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].description, "remove-edge 3->5");
        assert_eq!(cands[0].delta(), 1);
        assert_eq!(cands[0].trajectory().step(3).unwrap().premise_refs, BTreeSet::from([1]));
    }

    #[test]
    fn same_step_constraints_merge_into_one_modify() {
        let task = task();
        let cfg = cfg();
        // step 2: unscoped assumption that also cites a missing sentence
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Assumption, "Smith lived in Leeds")
                .with_evidence([EvidenceRef::new("d1", 9)]),
            ReasoningStep::new(3, StepKind::Inference, "Smith was born in Leeds").with_premises([2]),
        ]);
        let v = rule_audit(&t, &task, &Lexicons::default());
        assert_eq!(v.len(), 2);
        let cs = constraints_for(&v).unwrap();
        let (out, report) = repair_round(&t, &cs, &ctx(&task, &cfg));
        assert_eq!(report.delta, 1);
        assert_eq!(report.loss_trace, vec![2, 1, 0]);
        assert!(matches!(report.edit_ops.as_slice(), [EditOp::Modify { index: 2, .. }]));
        assert!(rule_audit(&out, &task, &Lexicons::default()).is_empty());
    }

    #[test]
    fn fix_reference_round_objective() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Leeds is in England").with_evidence([EvidenceRef::new("d9", 4)]),
        ]);
        let c = only_constraint(&t, &task);
        let (out, report) = repair_round(&t, &[c], &ctx(&task, &cfg));
        assert_eq!(report.loss_trace, vec![1, 0]);
        assert_eq!(report.delta, 1);
        assert_eq!(report.applied[0].description, "fix-reference step 1 rebind");
        assert_eq!(out.step(1).unwrap().evidence_refs, BTreeSet::from([ev(2)]));
    }

    #[test]
    fn zero_constraints_is_identity() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![ReasoningStep::new(1, StepKind::Claim, "x")]);
        let (out, report) = repair_round(&t, &[], &ctx(&task, &cfg));
        assert_eq!(out, t);
        assert_eq!(report.delta, 0);
    }

    #[test]
    fn objective_prefers_cheaper_candidate() {
        let options = vec![
            CandidateScore {
                unsatisfied: 1,
                delta: 1,
                description: "b".into(),
            },
            CandidateScore {
                unsatisfied: 0,
                delta: 3,
                description: "a".into(),
            },
        ];
        assert_eq!(options[0].objective(1.0), 2.0);
        assert_eq!(options[1].objective(1.0), 3.0);
        assert_eq!(pick_candidate(&options, 1.0), Some(0));
        // with a small lambda the complete fix wins
        assert_eq!(pick_candidate(&options, 0.1), Some(1));
        assert_eq!(pick_candidate(&[], 0.1), None);
    }

    #[test]
    fn single_unjustified_converges_in_one_round() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "the birth registry of Smith was in Leeds"),
            ReasoningStep::new(3, StepKind::Conclusion, "Smith was born in Leeds").with_premises([1, 2]),
        ]);
        let out = audit_repair_loop(&belief(t), &task, &ctx(&task, &cfg));
        assert!(out.converged);
        assert_eq!(out.rounds_used, 1);
        assert!(out.residual.is_empty());
        assert_eq!(out.trace.len(), 2);
    }

    #[test]
    fn clean_input_passes_through() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Conclusion, "Smith was born in 1990").with_premises([1]),
        ]);
        let out = audit_repair_loop(&belief(t.clone()), &task, &ctx(&task, &cfg));
        assert!(out.converged);
        assert_eq!(out.rounds_used, 1);
        assert_eq!(out.repair_rounds, 0);
        assert_eq!(out.trajectory, t);
    }

    #[test]
    fn figure_one_pattern_is_repaired() {
        let task = task();
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "The question mentions a registry").with_evidence([ev(1)]),
            ReasoningStep::new(2, StepKind::Assumption, "The registry means Smith was born in Leeds").with_premises([4]),
            ReasoningStep::new(3, StepKind::Inference, "Smith was born in Leeds").with_premises([2]),
            ReasoningStep::new(4, StepKind::Conclusion, "The answer is Leeds").with_premises([3]),
        ]);
        let out = audit_repair_loop(&belief(t), &task, &ctx(&task, &cfg));
        assert!(out.converged, "{:#?}", out.trace);
        let step2 = out.trajectory.step(2).unwrap();
        assert!(step2.premise_refs.is_empty());
        assert_eq!(step2.assumption_scope, Some(BTreeSet::from([3])));
        assert!(step2.text.starts_with("Assume that"));
        let r = out.trace[0].repair.as_ref().unwrap();
        assert_eq!(r.delta, 1);
        assert!(r.local);
    }

    #[test]
    fn insert_assumption_without_context() {
        let task = Task {
            contexts: vec![],
            ..task()
        };
        let cfg = cfg();
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith is a person"),
            ReasoningStep::new(2, StepKind::Inference, "Smith was born somewhere"),
            ReasoningStep::new(3, StepKind::Conclusion, "Smith was born").with_premises([2]),
        ]);
        let c = only_constraint(&t, &task);
        assert_eq!(c.prescribed_edit_kind, EditKind::InsertAssumption);
        let out = audit_repair_loop(&belief(t), &task, &ctx(&task, &cfg));
        assert!(out.converged);
        assert_eq!(out.trajectory.len(), 4);
        let inserted = out.trajectory.step(2).unwrap();
        assert_eq!(inserted.kind, StepKind::Assumption);
        assert_eq!(out.trajectory.step(3).unwrap().premise_refs, BTreeSet::from([2]));
        // conclusion's ref followed the shift
        assert_eq!(out.trajectory.step(4).unwrap().premise_refs, BTreeSet::from([3]));
        assert_eq!(out.trace[0].repair.as_ref().unwrap().delta, 2);
    }

    #[test]
    fn model_repair_exposes_then_fixes_contradiction() {
        let task = task();
        let cfg = RepairConfig {
            mode: RepairMode::Llm,
            ..cfg()
        };
        let templates = PromptTemplates::builtin();
        let start = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "Smith was born in Leeds"),
        ]);
        let after_one = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "Smith was born in 1990").with_evidence([ev(0)]),
            ReasoningStep::new(2, StepKind::Inference, "Smith was not born in 1990").with_evidence([ev(1)]),
        ]);
        let mut fixture = ScriptedFixture::new(FallbackPolicy::Error);
        let dummy = MockBackend::new(ScriptedFixture::new(FallbackPolicy::Error));
        let probe = Llm {
            backend: &dummy,
            templates: &templates,
        };
        let c1 = only_constraint(&start, &task);
        fixture.insert(
            &repair_request(&start, &task, &c1, 2, probe, 3).unwrap(),
            "[2] INFERENCE (evidence: d1:1) Smith was not born in 1990",
        );
        let c2 = only_constraint(&after_one, &task);
        assert_eq!(c2.source.kind, ViolationType::Contradiction);
        fixture.insert(
            &repair_request(&after_one, &task, &c2, 2, probe, 3).unwrap(),
            "Sure.\n[2] INFERENCE (premises: 1) (evidence: d1:1) Smith was born in Leeds",
        );
        let backend = MockBackend::new(fixture);
        let llm = Llm {
            backend: &backend,
            templates: &templates,
        };
        let ctx = RepairContext {
            task: &task,
            config: &cfg,
            llm: Some(llm),
        };
        let out = audit_repair_loop(&belief(start), &task, &ctx);
        assert!(out.converged);
        assert_eq!(out.rounds_used, 2);
        assert_eq!(out.trace[1].instances[0].kind, ViolationType::Contradiction);
        assert_eq!(out.trajectory.step(2).unwrap().text, "Smith was born in Leeds");
    }

    #[test]
    fn stall_stops_early() {
        // a revision whose only templated edit would empty the step
        let task = task();
        let cfg = cfg();
        let t = traj(vec![ReasoningStep::new(1, StepKind::Claim, "no")]);
        let v = ViolationInstance {
            kind: ViolationType::Contradiction,
            step: 1,
            evidence: crate::audit::AuditEvidence {
                detector_id: "test".into(),
                offending_refs: vec![],
                explanation: String::new(),
            },
            acceptance: AcceptanceCriterion::from(&Criterion::ReviseStepText {
                violation: ViolationType::Contradiction,
                step: 1,
                original_text: "no".into(),
            }),
        };
        let c = RepairConstraint::from_instance(&v).unwrap();
        assert!(propose_repairs(&t, &c, &ctx(&task, &cfg)).is_empty());
        let (_, report) = repair_round(&t, &[c], &ctx(&task, &cfg));
        assert!(report.applied.is_empty());
        assert_eq!(report.loss_trace, vec![1]);
    }

    #[test]
    fn commit_examples() {
        let w = SeverityWeights::default();
        let clean = UnfaithfulnessProfile::default();
        let one = CommitCandidate {
            q_tilde: 0.4,
            profile: clean,
        };
        assert_eq!(commit(&[one], 1.0, &w), Some(0));
        assert_eq!(commit(&[], 1.0, &w), None);

        // one Missing_Assumption (w = 0.5) scaled to a weighted 0.2 via alpha
        let mut h = UnfaithfulnessProfile::default();
        h.counts[ViolationType::MissingAssumption.ordinal()] = 1;
        let a = CommitCandidate { q_tilde: 0.8, profile: h };
        let b = CommitCandidate {
            q_tilde: 0.7,
            profile: clean,
        };
        let weights = SeverityWeights([0.2; 6]);
        assert!((commit_score(&a, 1.0, &weights) - 0.6).abs() < 1e-12);
        assert!((commit_score(&b, 1.0, &weights) - 0.7).abs() < 1e-12);
        assert_eq!(commit(&[a, b], 1.0, &weights), Some(1));

        assert_eq!(commit(&[b, b, b], 1.0, &w), Some(0));
    }

    #[test]
    fn commit_ties_prefer_fewer_residuals() {
        let w = SeverityWeights([0.0; 6]);
        let mut h = UnfaithfulnessProfile::default();
        h.counts[0] = 2;
        let noisy = CommitCandidate { q_tilde: 0.6, profile: h };
        let clean = CommitCandidate {
            q_tilde: 0.6,
            profile: UnfaithfulnessProfile::default(),
        };
        assert_eq!(commit(&[noisy, clean], 1.0, &w), Some(1));
    }

    #[test]
    fn weights_round_trip_through_names() {
        let w = SeverityWeights::default();
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"Circular_Reasoning\":1.0"));
        let back: SeverityWeights = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
        let partial: SeverityWeights = serde_json::from_str(r#"{"Contradiction": 2.0}"#).unwrap();
        assert_eq!(partial.get(ViolationType::Contradiction), 2.0);
        assert_eq!(partial.get(ViolationType::Overgeneralization), 0.5);
        assert!(serde_json::from_str::<SeverityWeights>(r#"{"Bogus": 1.0}"#).is_err());
        assert!(serde_json::from_str::<SeverityWeights>(r#"{"Contradiction": -1.0}"#).is_err());
    }

    #[test]
    fn session_tracks_inserts_and_deletes() {
        let t = traj(vec![
            ReasoningStep::new(1, StepKind::Claim, "a"),
            ReasoningStep::new(2, StepKind::Inference, "b").with_premises([1, 9]),
            ReasoningStep::new(3, StepKind::Conclusion, "c").with_premises([2]),
        ]);
        let mut s = EditSession::new(&t);
        s.insert(2, ReasoningStep::new(0, StepKind::Assumption, "Assume z").with_scope([3]));
        assert_eq!(s.step(3).unwrap().premise_refs, BTreeSet::from([1, 10]));
        assert_eq!(s.step(4).unwrap().premise_refs, BTreeSet::from([3]));
        assert_eq!(s.current_index(2), Some(3));
        assert_eq!(s.delta(), 1);
        s.delete(1);
        assert_eq!(s.step(2).unwrap().premise_refs, BTreeSet::from([10]));
        assert_eq!(s.delta(), 2);
        assert_eq!(s.current_index(1), None);
        assert!(validate_trajectory(&s.trajectory()).is_empty());
    }
}
