//! Persona coalition and structured belief elicitation.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{generate_batch, Backend, BackendError, GenRequest, GenResponse};
use crate::templates::{render_contexts, PromptTemplates, Template, TemplateError, BUILTIN_PERSONAS};
use crate::trajectory::{Belief, EvidenceRef, ReasoningStep, StepKind, Task, Trajectory};

#[derive(Debug, Error)]
pub enum CoalitionError {
    #[error("coalition needs at least one persona")]
    Empty,
    #[error("duplicate persona id `{0}`")]
    DuplicateId(String),
    #[error("duplicate bias label `{0}`")]
    DuplicateBias(String),
    #[error("persona file {path}: {message}")]
    BadPersonaFile { path: String, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub bias_label: String,
    pub instruction_template: String,
    pub step_format_contract: String,
}

impl Persona {
    /// Persona template, question, numbered contexts, then the step format.
    pub fn render_prompt(&self, task: &Task) -> String {
        let body = self
            .instruction_template
            .replace("{question}", &task.question)
            .replace("{contexts}", &render_contexts(task));
        format!("{}\n\n{}", body.trim_end(), self.step_format_contract.trim_end())
    }
}

/// Parses a persona file: header line, `bias: <label>`, blank line, body.
pub fn parse_persona(id: &str, raw: &str, step_format: &str) -> Result<Persona, CoalitionError> {
    let template = Template::parse(raw)?;
    let body = template.body.trim_start_matches('\n');
    let (first, rest) = body.split_once('\n').unwrap_or((body, ""));
    let bias = first
        .trim()
        .strip_prefix("bias:")
        .map(str::trim)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| CoalitionError::BadPersonaFile {
            path: id.to_string(),
            message: "expected `bias: <label>` after the header".into(),
        })?;
    Ok(Persona {
        id: id.to_string(),
        bias_label: bias.to_string(),
        instruction_template: rest.trim().to_string(),
        step_format_contract: step_format.to_string(),
    })
}

/// Where personas come from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoalitionConfig {
    /// Directory with one `<id>.txt` per persona. Built-ins when absent.
    pub persona_dir: Option<std::path::PathBuf>,
    /// Restrict to these ids, in this order. All available when absent.
    pub personas: Option<Vec<String>>,
}

pub fn build_coalition(
    config: &CoalitionConfig,
    templates: &PromptTemplates,
) -> Result<Vec<Persona>, CoalitionError> {
    let contract = &templates.step_format.body;
    let mut available = Vec::new();
    match &config.persona_dir {
        None => {
            for (id, raw) in BUILTIN_PERSONAS {
                available.push(parse_persona(id, raw, contract)?);
            }
        }
        Some(dir) => {
            let mut files: Vec<_> = fs::read_dir(dir)
                .map_err(|e| CoalitionError::BadPersonaFile {
                    path: dir.display().to_string(),
                    message: e.to_string(),
                })?
                .filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            files.sort();
            for path in files {
                available.push(load_persona_file(&path, contract)?);
            }
        }
    }
    let chosen = match &config.personas {
        None => available,
        Some(ids) => ids
            .iter()
            .map(|id| {
                available
                    .iter()
                    .find(|p| &p.id == id)
                    .cloned()
                    .ok_or_else(|| CoalitionError::BadPersonaFile {
                        path: id.clone(),
                        message: "no such persona".into(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    check_coalition(&chosen)?;
    Ok(chosen)
}

fn load_persona_file(path: &Path, contract: &str) -> Result<Persona, CoalitionError> {
    let raw = fs::read_to_string(path).map_err(|e| CoalitionError::BadPersonaFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    parse_persona(&id, &raw, contract)
}

/// Ids and bias labels must be distinct.
pub fn check_coalition(personas: &[Persona]) -> Result<(), CoalitionError> {
    if personas.is_empty() {
        return Err(CoalitionError::Empty);
    }
    let mut ids = HashSet::new();
    let mut biases = HashSet::new();
    for p in personas {
        if !ids.insert(p.id.as_str()) {
            return Err(CoalitionError::DuplicateId(p.id.clone()));
        }
        if !biases.insert(p.bias_label.as_str()) {
            return Err(CoalitionError::DuplicateBias(p.bias_label.clone()));
        }
    }
    Ok(())
}

/// Where and why a model reply failed the step format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFault {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseFault {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBelief {
    pub trajectory: Trajectory,
    pub claim: String,
}

fn fault(line: usize, message: impl Into<String>) -> ParseFault {
    ParseFault {
        line,
        message: message.into(),
    }
}

fn parse_index_list(body: &str, line: usize) -> Result<BTreeSet<usize>, ParseFault> {
    body.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| fault(line, format!("bad step number `{s}`")))
        })
        .collect()
}

fn parse_evidence_list(body: &str, line: usize) -> Result<BTreeSet<EvidenceRef>, ParseFault> {
    body.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (doc, sent) = s
                .rsplit_once(':')
                .ok_or_else(|| fault(line, format!("evidence `{s}` is not doc:sentence")))?;
            let sent = sent
                .trim()
                .parse::<usize>()
                .map_err(|_| fault(line, format!("bad sentence id in `{s}`")))?;
            Ok(EvidenceRef::new(doc.trim(), sent))
        })
        .collect()
}

fn parse_step_line(line_no: usize, line: &str) -> Result<ReasoningStep, ParseFault> {
    let rest = line.strip_prefix('[').expect("caller checked");
    let (num, rest) = rest
        .split_once(']')
        .ok_or_else(|| fault(line_no, "missing `]` after step number"))?;
    let index = num
        .trim()
        .parse::<usize>()
        .map_err(|_| fault(line_no, format!("bad step number `{num}`")))?;
    let rest = rest.trim_start();
    let kind_word: String = rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    let kind = StepKind::from_keyword(&kind_word)
        .ok_or_else(|| fault(line_no, format!("unknown step kind `{kind_word}`")))?;
    let mut rest = rest[kind_word.len()..].trim_start();
    let mut step = ReasoningStep::new(index, kind, "");
    loop {
        let Some(inner) = rest.strip_prefix('(') else {
            break;
        };
        let Some((label, after_label)) = inner.split_once(':') else {
            break;
        };
        let label = label.trim().to_ascii_lowercase();
        if !matches!(label.as_str(), "premises" | "evidence" | "scope") {
            break;
        }
        let (body, after) = after_label
            .split_once(')')
            .ok_or_else(|| fault(line_no, format!("unclosed ({label}: group")))?;
        match label.as_str() {
            "premises" => step.premise_refs.extend(parse_index_list(body, line_no)?),
            "evidence" => step.evidence_refs.extend(parse_evidence_list(body, line_no)?),
            _ => {
                let scope = parse_index_list(body, line_no)?;
                step.assumption_scope
                    .get_or_insert_with(BTreeSet::new)
                    .extend(scope);
            }
        }
        rest = after.trim_start();
    }
    step.text = rest.trim().to_string();
    Ok(step)
}

/// Parses the line-oriented step format plus a final `ANSWER:` line.
///
/// Lines that are neither steps nor the answer are ignored, so models may
/// wrap the steps in prose. A line that opens with `[<digits>]` must be a
/// well-formed step.
pub fn parse_structured(text: &str) -> Result<ParsedBelief, ParseFault> {
    let mut steps = Vec::new();
    let mut claim: Option<String> = None;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if let Some(answer) = strip_answer(line) {
            claim = Some(answer.trim().to_string());
            continue;
        }
        if is_step_line(line) {
            steps.push(parse_step_line(line_no, line)?);
        }
    }
    if steps.is_empty() {
        return Err(fault(last_line.max(1), "no reasoning steps"));
    }
    let claim = claim.ok_or_else(|| fault(last_line.max(1), "missing ANSWER: line"))?;
    if claim.is_empty() {
        return Err(fault(last_line.max(1), "empty ANSWER"));
    }
    let trajectory = Trajectory::new(steps).expect("nonempty");
    Ok(ParsedBelief { trajectory, claim })
}

/// Every step line in `text`, ignoring everything else. Used for
/// single-step rewrites, where no `ANSWER:` line is expected.
pub fn parse_step_lines(text: &str) -> Vec<Result<ReasoningStep, ParseFault>> {
    text.lines()
        .enumerate()
        .map(|(i, raw)| (i + 1, raw.trim()))
        .filter(|(_, line)| is_step_line(line))
        .map(|(n, line)| parse_step_line(n, line))
        .collect()
}

fn strip_answer(line: &str) -> Option<&str> {
    let upper = line.get(..7)?;
    upper.eq_ignore_ascii_case("ANSWER:").then(|| &line[7..])
}

fn is_step_line(line: &str) -> bool {
    line.strip_prefix('[')
        .and_then(|r| r.split_once(']'))
        .is_some_and(|(n, _)| !n.trim().is_empty() && n.trim().chars().all(|c| c.is_ascii_digit()))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render_step(step: &ReasoningStep) -> String {
    let mut out = format!("[{}] {}", step.index, step.kind.keyword());
    if !step.premise_refs.is_empty() {
        out.push_str(&format!(" (premises: {})", join(&step.premise_refs)));
    }
    if !step.evidence_refs.is_empty() {
        out.push_str(&format!(" (evidence: {})", join(&step.evidence_refs)));
    }
    if let Some(scope) = &step.assumption_scope {
        if scope.is_empty() {
            out.push_str(" (scope:)");
        } else {
            out.push_str(&format!(" (scope: {})", join(scope)));
        }
    }
    out.push(' ');
    out.push_str(&step.text);
    out
}

/// Inverse of [`parse_structured`].
pub fn render_structured(trajectory: &Trajectory, claim: &str) -> String {
    let mut out: Vec<String> = trajectory.steps().iter().map(render_step).collect();
    out.push(format!("ANSWER: {claim}"));
    out.join("\n")
}

/// Generation settings shared by all personas of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Reproducible mode: persona `i` uses seed `base_seed + i`.
    pub base_seed: Option<u64>,
    pub parallelism: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 1024,
            base_seed: Some(0),
            parallelism: 4,
        }
    }
}

/// Request for persona number `ordinal` on `task`.
pub fn persona_request(
    task: &Task,
    persona: &Persona,
    ordinal: usize,
    templates: &PromptTemplates,
    opts: &GenerationOptions,
) -> GenRequest {
    GenRequest::new(templates.system.body.clone(), persona.render_prompt(task))
        .with_temperature(opts.temperature)
        .with_max_tokens(opts.max_tokens)
        .with_seed(opts.base_seed.map(|s| s.wrapping_add(ordinal as u64)))
}

/// Follow-up request sent once when the first reply fails to parse.
pub fn reprompt_request(first: &GenRequest, err: &ParseFault, templates: &PromptTemplates) -> GenRequest {
    let user = templates.reprompt.render(&[
        ("prompt", first.user_prompt.as_str()),
        ("error", &err.to_string()),
    ]);
    GenRequest {
        user_prompt: user,
        ..first.clone()
    }
}

/// Single-step stand-in for an unparseable reply.
pub fn degraded_belief(persona_id: &str, raw: &str) -> Belief {
    let text = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let text = if text.is_empty() {
        "(empty response)".to_string()
    } else {
        text
    };
    let step = ReasoningStep::new(1, StepKind::Claim, text.clone());
    Belief {
        persona_id: persona_id.to_string(),
        claim: text,
        trajectory: Trajectory::new(vec![step]).expect("one step"),
        degraded: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedBelief {
    pub belief: Belief,
    /// Faults of each failed parse attempt, in order.
    pub parse_faults: Vec<ParseFault>,
    pub backend_calls: usize,
}

fn accept(persona: &Persona, parsed: ParsedBelief) -> Belief {
    Belief {
        persona_id: persona.id.clone(),
        claim: parsed.claim,
        trajectory: parsed.trajectory,
        degraded: false,
    }
}

pub fn generate_belief(
    task: &Task,
    persona: &Persona,
    ordinal: usize,
    backend: &dyn Backend,
    templates: &PromptTemplates,
    opts: &GenerationOptions,
) -> Result<GeneratedBelief, BackendError> {
    let req = persona_request(task, persona, ordinal, templates, opts);
    let first = backend.generate(&req)?;
    finish_belief(persona, &req, first, |r| backend.generate(r), templates)
}

fn finish_belief(
    persona: &Persona,
    req: &GenRequest,
    first: GenResponse,
    retry: impl FnOnce(&GenRequest) -> Result<GenResponse, BackendError>,
    templates: &PromptTemplates,
) -> Result<GeneratedBelief, BackendError> {
    let err = match parse_structured(&first.text) {
        Ok(parsed) => {
            return Ok(GeneratedBelief {
                belief: accept(persona, parsed),
                parse_faults: vec![],
                backend_calls: 1,
            })
        }
        Err(e) => e,
    };
    let second = retry(&reprompt_request(req, &err, templates))?;
    match parse_structured(&second.text) {
        Ok(parsed) => Ok(GeneratedBelief {
            belief: accept(persona, parsed),
            parse_faults: vec![err],
            backend_calls: 2,
        }),
        Err(err2) => Ok(GeneratedBelief {
            belief: degraded_belief(&persona.id, &second.text),
            parse_faults: vec![err, err2],
            backend_calls: 2,
        }),
    }
}

/// One belief per persona for a task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub task_id: String,
    pub beliefs: Vec<Belief>,
    pub parse_faults: Vec<Vec<ParseFault>>,
    pub backend_calls: usize,
}

/// Fans the persona calls out through [`generate_batch`]; reprompts go out as
/// a second batch. Any backend error fails the whole set.
pub fn generate_candidates(
    task: &Task,
    personas: &[Persona],
    backend: &dyn Backend,
    templates: &PromptTemplates,
    opts: &GenerationOptions,
) -> Result<CandidateSet, BackendError> {
    let reqs: Vec<GenRequest> = personas
        .iter()
        .enumerate()
        .map(|(i, p)| persona_request(task, p, i, templates, opts))
        .collect();
    let firsts = generate_batch(backend, &reqs, opts.parallelism);
    let mut parsed: Vec<Option<Result<ParsedBelief, ParseFault>>> = Vec::with_capacity(firsts.len());
    let mut firsts_ok = Vec::with_capacity(firsts.len());
    for r in firsts {
        let r = r?;
        parsed.push(Some(parse_structured(&r.text)));
        firsts_ok.push(r);
    }
    let retry_idx: Vec<usize> = parsed
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p, Some(Err(_))))
        .map(|(i, _)| i)
        .collect();
    let retry_reqs: Vec<GenRequest> = retry_idx
        .iter()
        .map(|&i| match &parsed[i] {
            Some(Err(e)) => reprompt_request(&reqs[i], e, templates),
            _ => unreachable!(),
        })
        .collect();
    let mut retries = generate_batch(backend, &retry_reqs, opts.parallelism).into_iter();
    let mut beliefs = Vec::with_capacity(personas.len());
    let mut faults = Vec::with_capacity(personas.len());
    let mut calls = reqs.len();
    for (i, persona) in personas.iter().enumerate() {
        match parsed[i].take().expect("filled") {
            Ok(p) => {
                beliefs.push(accept(persona, p));
                faults.push(vec![]);
            }
            Err(err) => {
                calls += 1;
                let second = retries.next().expect("one retry per failure")?;
                match parse_structured(&second.text) {
                    Ok(p) => {
                        beliefs.push(accept(persona, p));
                        faults.push(vec![err]);
                    }
                    Err(err2) => {
                        beliefs.push(degraded_belief(&persona.id, &second.text));
                        faults.push(vec![err, err2]);
                    }
                }
            }
        }
    }
    Ok(CandidateSet {
        task_id: task.id.clone(),
        beliefs,
        parse_faults: faults,
        backend_calls: calls,
    })
}
