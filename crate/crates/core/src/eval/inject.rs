//! Synthetic corpus of grounded trajectories with injected violations.
//!
//! Every entry is built from a random base that passes a rule-mode audit,
//! then mutated by one or more injection operators whose ground-truth
//! instance is known by construction. Clean controls are interleaved 1:1.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::ViolationType;
use crate::trajectory::{EvidenceDoc, EvidenceRef, ReasoningStep, StepKind, Task, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InjectError {
    #[error("injection specs do not cover {0:?}")]
    MissingTypes(Vec<ViolationType>),
    #[error("no base trajectory admits spec `{0}` after {1} attempts")]
    Unsatisfiable(String, usize),
    #[error("bad corpus shape: {0}")]
    BadShape(String),
}

/// One operator to apply, optionally pinned to a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionTarget {
    pub kind: ViolationType,
    #[serde(default)]
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub inject: Vec<InjectionTarget>,
}

impl InjectionSpec {
    pub fn single(kind: ViolationType) -> Self {
        Self {
            inject: vec![InjectionTarget { kind, step: None }],
        }
    }

    pub fn pair(a: ViolationType, b: ViolationType) -> Self {
        Self {
            inject: vec![InjectionTarget { kind: a, step: None }, InjectionTarget { kind: b, step: None }],
        }
    }

    /// Slice label: type names joined by `+`.
    pub fn slice(&self) -> String {
        self.inject
            .iter()
            .map(|t| match t.step {
                Some(s) => format!("{}@{s}", t.kind.name()),
                None => t.kind.name().to_string(),
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Length bounds for base trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseShape {
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Default for BaseShape {
    fn default() -> Self {
        Self {
            min_steps: 4,
            max_steps: 8,
        }
    }
}

/// Corpus description as read by `saver inject --spec`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(default)]
    pub shape: BaseShape,
    pub specs: Vec<InjectionSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            shape: BaseShape::default(),
            specs: default_specs(),
        }
    }
}

/// All six single-type specs plus four compatible pairs.
pub fn default_specs() -> Vec<InjectionSpec> {
    use ViolationType::*;
    let mut specs: Vec<InjectionSpec> = ViolationType::ALL.into_iter().map(InjectionSpec::single).collect();
    specs.push(InjectionSpec::pair(UnjustifiedInference, Contradiction));
    specs.push(InjectionSpec::pair(CircularReasoning, InvalidPrecondition));
    specs.push(InjectionSpec::pair(MissingAssumption, Overgeneralization));
    specs.push(InjectionSpec::pair(InvalidPrecondition, UnjustifiedInference));
    specs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedInjection {
    pub kind: ViolationType,
    pub step: usize,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpectedInstance {
    #[serde(rename = "type")]
    pub kind: ViolationType,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub slice: String,
    pub control: bool,
    pub task: Task,
    pub claim: String,
    pub trajectory: Trajectory,
    pub injections: Vec<AppliedInjection>,
    pub expected: Vec<ExpectedInstance>,
}

pub const CLEAN_SLICE: &str = "clean";

const NAMES: [&str; 16] = [
    "Arlen", "Brisa", "Corvin", "Delia", "Esker", "Fenna", "Galt", "Hollis", "Ilse", "Joran", "Kestrel", "Lumen",
    "Marek", "Nadia", "Orrin", "Pella",
];
const VERBS: [&str; 10] = [
    "founded", "visited", "painted", "studied", "designed", "managed", "recorded", "published", "mapped", "restored",
];
const OBJECTS: [&str; 10] = [
    "the harbor museum",
    "a river bridge",
    "the northern archive",
    "a glass tower",
    "the old observatory",
    "a coastal railway",
    "the city library",
    "a mountain lodge",
    "the summer festival",
    "a textile mill",
];

/// Hands out sentence texts with distinct years, so no two texts share all
/// their tokens.
struct TextSource {
    used_years: BTreeSet<u32>,
}

impl TextSource {
    fn new() -> Self {
        Self {
            used_years: BTreeSet::new(),
        }
    }

    fn year<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u32 {
        loop {
            let y = rng.gen_range(1700..2000);
            if self.used_years.insert(y) {
                return y;
            }
        }
    }

    fn sentence<R: Rng + ?Sized>(&mut self, rng: &mut R) -> String {
        let y = self.year(rng);
        format!(
            "{} {} {} in {y}",
            NAMES.choose(rng).expect("nonempty"),
            VERBS.choose(rng).expect("nonempty"),
            OBJECTS.choose(rng).expect("nonempty"),
        )
    }
}

fn lower_first(s: &str) -> String {
    let mut cs = s.chars();
    cs.next()
        .map(|c| c.to_lowercase().chain(cs).collect())
        .unwrap_or_default()
}

fn upper_first(s: &str) -> String {
    let mut cs = s.chars();
    cs.next()
        .map(|c| c.to_uppercase().chain(cs).collect())
        .unwrap_or_default()
}

const ASSUMPTION_PREFIX: &str = "Assume that ";

/// A clean, grounded task and trajectory of length within `shape`.
pub fn random_base<R: Rng + ?Sized>(rng: &mut R, id: &str, shape: BaseShape) -> (Task, Trajectory, String) {
    let mut texts = TextSource::new();
    let n_docs = rng.gen_range(2..=3);
    let contexts: Vec<EvidenceDoc> = (0..n_docs)
        .map(|d| EvidenceDoc {
            doc_id: format!("d{}", d + 1),
            title: format!("Record {}", d + 1),
            sentences: (0..rng.gen_range(3..=4)).map(|_| texts.sentence(rng)).collect(),
        })
        .collect();
    let all: Vec<(EvidenceRef, String)> = contexts
        .iter()
        .flat_map(|d| {
            d.sentences
                .iter()
                .enumerate()
                .map(|(i, s)| (EvidenceRef::new(&d.doc_id, i), s.clone()))
        })
        .collect();
    let pick = |rng: &mut R| all.choose(rng).expect("nonempty").clone();

    let len = rng.gen_range(shape.min_steps..=shape.max_steps);
    let mut steps: Vec<ReasoningStep> = Vec::with_capacity(len);
    let (r, s) = pick(rng);
    steps.push(ReasoningStep::new(1, StepKind::Claim, s).with_evidence([r]));
    let mut pending_assumption: Option<usize> = None;
    let mut has_inference = false;
    for i in 2..len {
        let kind = if let Some(_a) = pending_assumption {
            StepKind::Inference
        } else if i == len - 1 && !has_inference {
            StepKind::Inference
        } else {
            let roll: f64 = rng.gen();
            match roll {
                x if x < 0.25 => StepKind::Claim,
                x if x < 0.70 => StepKind::Inference,
                x if x < 0.85 && i <= len - 2 => StepKind::Assumption,
                _ => StepKind::Verification,
            }
        };
        let step = match kind {
            StepKind::Claim => {
                let (r, s) = pick(rng);
                ReasoningStep::new(i, kind, s).with_evidence([r])
            }
            StepKind::Inference => {
                has_inference = true;
                let mut premises = BTreeSet::new();
                if let Some(a) = pending_assumption.take() {
                    premises.insert(a);
                }
                let want = rng.gen_range(1..=2);
                while premises.len() < want.min(i - 1) {
                    premises.insert(rng.gen_range(1..i));
                }
                let mut st = ReasoningStep::new(i, kind, texts.sentence(rng)).with_premises(premises);
                if rng.gen_bool(0.5) {
                    st = st.with_evidence([pick(rng).0]);
                }
                st
            }
            StepKind::Assumption => {
                pending_assumption = Some(i);
                ReasoningStep::new(i, kind, format!("{ASSUMPTION_PREFIX}{}", lower_first(&texts.sentence(rng))))
                    .with_scope([i + 1])
            }
            _ => ReasoningStep::new(i, kind, texts.sentence(rng))
                .with_premises([rng.gen_range(1..i)])
                .with_evidence([pick(rng).0]),
        };
        steps.push(step);
    }
    let name = NAMES.choose(rng).expect("nonempty");
    let verb = VERBS.choose(rng).expect("nonempty");
    let object = OBJECTS.choose(rng).expect("nonempty");
    let mut premises = BTreeSet::from([len - 1]);
    if len > 2 && rng.gen_bool(0.3) {
        premises.insert(rng.gen_range(1..len - 1));
    }
    steps.push(ReasoningStep::new(len, StepKind::Conclusion, format!("{name} {verb} {object}")).with_premises(premises));
    let task = Task {
        id: id.to_string(),
        question: format!("What did {name} {verb}?"),
        contexts,
        gold_answers: vec![object.to_string()],
    };
    (task, Trajectory::new(steps).expect("nonempty"), object.to_string())
}

/// Working copy an operator mutates.
struct Draft {
    steps: Vec<ReasoningStep>,
    task: Task,
    reserved: BTreeSet<usize>,
}

impl Draft {
    fn step(&self, i: usize) -> &ReasoningStep {
        &self.steps[i - 1]
    }

    fn step_mut(&mut self, i: usize) -> &mut ReasoningStep {
        &mut self.steps[i - 1]
    }

    fn len(&self) -> usize {
        self.steps.len()
    }

    fn free(&self, i: usize) -> bool {
        !self.reserved.contains(&i)
    }

    fn dependents(&self, a: usize) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::Inference && s.premise_refs.contains(&a))
            .map(|s| s.index)
            .collect()
    }
}

fn params(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Applies one operator; `None` when the draft has no eligible site.
fn apply<R: Rng + ?Sized>(d: &mut Draft, target: &InjectionTarget, rng: &mut R) -> Option<AppliedInjection> {
    let pinned = |i: usize| target.step.map_or(true, |p| p == i);
    let kind = target.kind;
    match kind {
        ViolationType::CircularReasoning => {
            let sites: Vec<(usize, usize)> = (1..=d.len())
                .filter(|&m| pinned(m) && d.free(m))
                .flat_map(|m| {
                    d.step(m)
                        .premise_refs
                        .iter()
                        .copied()
                        .filter(|&p| p < m && d.free(p))
                        .map(move |p| (m, p))
                        .collect::<Vec<_>>()
                })
                .collect();
            let &(m, p) = sites.choose(rng)?;
            d.step_mut(p).premise_refs.insert(m);
            d.reserved.extend([m, p]);
            Some(AppliedInjection {
                kind,
                step: m,
                params: params(&[("back_edge_from", p.to_string())]),
            })
        }
        ViolationType::UnjustifiedInference => {
            let sites: Vec<usize> = (1..=d.len())
                .filter(|&s| pinned(s) && d.free(s) && d.step(s).kind == StepKind::Inference)
                .collect();
            let &s = sites.choose(rng)?;
            let st = d.step_mut(s);
            st.premise_refs.clear();
            st.evidence_refs.clear();
            d.reserved.insert(s);
            Some(AppliedInjection {
                kind,
                step: s,
                params: BTreeMap::new(),
            })
        }
        ViolationType::InvalidPrecondition => {
            let sites: Vec<usize> = (1..=d.len()).filter(|&s| pinned(s) && d.free(s)).collect();
            let &s = sites.choose(rng)?;
            let variant = *["doc", "sentence", "premise"].choose(rng).expect("nonempty");
            let len = d.len();
            let first_doc = d.task.contexts[0].clone();
            let st = d.step_mut(s);
            let detail = match variant {
                "doc" => {
                    let r = EvidenceRef::new("d9", rng.gen_range(0..5));
                    let out = r.to_string();
                    st.evidence_refs.insert(r);
                    out
                }
                "sentence" => {
                    let r = EvidenceRef::new(&first_doc.doc_id, first_doc.sentences.len() + rng.gen_range(0..5));
                    let out = r.to_string();
                    st.evidence_refs.insert(r);
                    out
                }
                _ => {
                    let p = len + rng.gen_range(1..4);
                    st.premise_refs.insert(p);
                    p.to_string()
                }
            };
            d.reserved.insert(s);
            Some(AppliedInjection {
                kind,
                step: s,
                params: params(&[("variant", variant.to_string()), ("ref", detail)]),
            })
        }
        ViolationType::Contradiction => {
            let eligible = |s: &ReasoningStep| matches!(s.kind, StepKind::Claim | StepKind::Inference);
            let sites: Vec<(usize, usize)> = (1..=d.len())
                .filter(|&l| pinned(l) && d.free(l) && eligible(d.step(l)))
                .flat_map(|l| {
                    (1..l)
                        .filter(|&j| d.free(j) && eligible(d.step(j)))
                        .map(move |j| (j, l))
                        .collect::<Vec<_>>()
                })
                .collect();
            let &(j, l) = sites.choose(rng)?;
            let negation = *["not", "never"].choose(rng).expect("nonempty");
            let words: Vec<&str> = d.step(j).text.split_whitespace().collect();
            let negated = format!("{} {negation} {}", words[0], words[1..].join(" "));
            d.step_mut(l).text = negated;
            d.reserved.extend([j, l]);
            Some(AppliedInjection {
                kind,
                step: l,
                params: params(&[("negates", j.to_string()), ("token", negation.to_string())]),
            })
        }
        ViolationType::MissingAssumption => {
            let mut sites: Vec<(usize, Vec<usize>, bool)> = Vec::new();
            for a in (1..=d.len()).filter(|&a| pinned(a) && d.free(a)) {
                let deps = d.dependents(a);
                if deps.is_empty() || !deps.iter().all(|&x| d.free(x)) {
                    continue;
                }
                match d.step(a).kind {
                    StepKind::Assumption => sites.push((a, deps, false)),
                    StepKind::Claim => sites.push((a, deps, true)),
                    _ => {}
                }
            }
            let (a, deps, convert) = sites.choose(rng)?.clone();
            let variant = if convert {
                "convert_claim"
            } else {
                *["unscope", "unhedge", "both"].choose(rng).expect("nonempty")
            };
            let st = d.step_mut(a);
            match variant {
                "convert_claim" => {
                    st.kind = StepKind::Assumption;
                    st.assumption_scope = None;
                }
                "unscope" => st.assumption_scope = None,
                "unhedge" => st.text = upper_first(st.text.trim_start_matches(ASSUMPTION_PREFIX)),
                _ => {
                    st.assumption_scope = None;
                    st.text = upper_first(st.text.trim_start_matches(ASSUMPTION_PREFIX));
                }
            }
            d.reserved.insert(a);
            d.reserved.extend(deps.iter().copied());
            Some(AppliedInjection {
                kind,
                step: a,
                params: params(&[("variant", variant.to_string())]),
            })
        }
        ViolationType::Overgeneralization => {
            let c = d.len();
            if !pinned(c) || !d.free(c) {
                return None;
            }
            let sites: Vec<usize> = (1..c)
                .filter(|&j| {
                    let s = d.step(j);
                    d.free(j) && s.kind == StepKind::Claim && s.premise_refs.is_empty() && s.evidence_refs.len() == 1
                })
                .collect();
            let &j = sites.choose(rng)?;
            let word = *["all", "always", "every"].choose(rng).expect("nonempty");
            let st = d.step_mut(c);
            st.text = match word {
                "all" => format!("All records agree that {}", lower_first(&st.text)),
                "always" => format!("{}, as always", st.text),
                _ => format!("Every record agrees that {}", lower_first(&st.text)),
            };
            st.premise_refs = BTreeSet::from([j]);
            st.evidence_refs.clear();
            d.reserved.extend([c, j]);
            Some(AppliedInjection {
                kind,
                step: c,
                params: params(&[("word", word.to_string()), ("only_premise", j.to_string())]),
            })
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

/// One entry for `spec`, or a clean control when `spec` is `None`.
pub fn build_entry<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    spec: Option<&InjectionSpec>,
    shape: BaseShape,
) -> Result<CorpusEntry, InjectError> {
    let Some(spec) = spec else {
        let (task, trajectory, claim) = random_base(rng, id, shape);
        return Ok(CorpusEntry {
            id: id.to_string(),
            slice: CLEAN_SLICE.to_string(),
            control: true,
            task,
            claim,
            trajectory,
            injections: vec![],
            expected: vec![],
        });
    };
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let (task, trajectory, claim) = random_base(rng, id, shape);
        let mut draft = Draft {
            steps: trajectory.into_steps(),
            task,
            reserved: BTreeSet::new(),
        };
        let mut applied = Vec::new();
        for target in &spec.inject {
            match apply(&mut draft, target, rng) {
                Some(a) => applied.push(a),
                None => continue 'attempt,
            }
        }
        let mut expected: Vec<ExpectedInstance> = applied
            .iter()
            .map(|a| ExpectedInstance {
                kind: a.kind,
                step: a.step,
            })
            .collect();
        expected.sort();
        return Ok(CorpusEntry {
            id: id.to_string(),
            slice: spec.slice(),
            control: false,
            task: draft.task,
            claim,
            trajectory: Trajectory::new(draft.steps).expect("nonempty"),
            injections: applied,
            expected,
        });
    }
    Err(InjectError::Unsatisfiable(spec.slice(), MAX_ATTEMPTS))
}

/// `n` entries alternating injected (specs round-robin) and clean controls.
pub fn build_injection_corpus<R: Rng + ?Sized>(
    specs: &[InjectionSpec],
    n: usize,
    rng: &mut R,
    shape: BaseShape,
) -> Result<Vec<CorpusEntry>, InjectError> {
    if shape.min_steps < 4 || shape.min_steps > shape.max_steps {
        return Err(InjectError::BadShape(format!(
            "need 4 <= min_steps <= max_steps, got {}..{}",
            shape.min_steps, shape.max_steps
        )));
    }
    let covered: BTreeSet<ViolationType> = specs.iter().flat_map(|s| s.inject.iter().map(|t| t.kind)).collect();
    let missing: Vec<ViolationType> = ViolationType::ALL.into_iter().filter(|t| !covered.contains(t)).collect();
    if !missing.is_empty() {
        return Err(InjectError::MissingTypes(missing));
    }
    (0..n)
        .map(|i| {
            let id = format!("inj-{i:05}");
            let spec = (i % 2 == 0).then(|| &specs[(i / 2) % specs.len()]);
            build_entry(rng, &id, spec, shape)
        })
        .collect()
}
