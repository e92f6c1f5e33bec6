//! End-to-end runs over a dataset: generation, selection, audit, repair,
//! commitment and logging.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{audit, flagged_steps, unfaithful_step_rate, Llm};
use crate::backend::{Backend, GenRequest, ScriptedFixture};
use crate::config::SaverConfig;
use crate::eval::metrics::{em_f1, TrajectorySummary};
use crate::eval::report::{report_from_records, write_report_csv, RunReport};
use crate::features::{extract_features, quality_score, usability_filter};
use crate::generation::{
    build_coalition, generate_belief, generate_candidates, persona_request, CoalitionError, GenerationOptions,
    Persona,
};
use crate::repair::{
    audit_repair_loop, commit, commit_score, CommitCandidate, MemoryRecord, RepairConfig, RepairContext, RoundTrace,
};
use crate::selection::{build_kernel, kdpp_sample_seeded, SelectionDump};
use crate::templates::{render_contexts, PromptTemplates};
use crate::trajectory::{Belief, Task};

/// Share of failed tasks above which a run counts as failed.
pub const MAX_FAILED_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Saver,
    Vanilla,
    Cot,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Saver => "saver",
            Mode::Vanilla => "vanilla",
            Mode::Cot => "cot",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "saver" => Ok(Mode::Saver),
            "vanilla" => Ok(Mode::Vanilla),
            "cot" => Ok(Mode::Cot),
            other => Err(format!("unknown mode `{other}` (expected saver, vanilla or cot)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Coalition(#[from] CoalitionError),
    #[error("coalition has {have} personas but M = {want}")]
    CoalitionTooSmall { have: usize, want: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("encoding output: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub seed: u64,
    /// Task-level worker count.
    pub parallel: usize,
    pub dump_selection: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Saver,
            seed: 0,
            parallel: 1,
            dump_selection: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Ok,
    Failed,
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub mode: Mode,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub prediction: Option<String>,
    #[serde(default)]
    pub em: Option<u8>,
    #[serde(default)]
    pub f1: Option<f64>,
    /// Persona id of the committed belief.
    #[serde(default)]
    pub committed: Option<String>,
    /// Indices into the generated candidates that passed the filter.
    #[serde(default)]
    pub usable: Vec<usize>,
    /// Indices into the generated candidates chosen for audit.
    #[serde(default)]
    pub selected: Vec<usize>,
    #[serde(default)]
    pub score: Option<f64>,
    /// Final audit of the committed trajectory.
    #[serde(default)]
    pub summary: Option<TrajectorySummary>,
    #[serde(default)]
    pub backend_calls: usize,
}

impl RunRecord {
    fn failed(task_id: &str, mode: Mode, error: String) -> Self {
        Self {
            task_id: task_id.to_string(),
            mode,
            status: TaskStatus::Failed,
            error: Some(error),
            prediction: None,
            em: None,
            f1: None,
            committed: None,
            usable: vec![],
            selected: vec![],
            score: None,
            summary: None,
            backend_calls: 0,
        }
    }
}

/// One line of `audit_log.jsonl`: a single audit round of one belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    pub task_id: String,
    pub belief: String,
    #[serde(flatten)]
    pub trace: RoundTrace,
}

/// Everything a task contributes to the run's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutput {
    pub record: RunRecord,
    pub audits: Vec<AuditLogEntry>,
    pub memory: Option<MemoryRecord>,
    pub selection: Option<SelectionDump>,
}

/// Seed for a task's subset draw, independent of task order.
pub fn task_seed(seed: u64, task_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Answer after the last `ANSWER:` line, or the whole reply.
pub fn extract_answer(text: &str) -> String {
    text.lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix("ANSWER:"))
        .map(str::trim)
        .unwrap_or_else(|| text.trim())
        .to_string()
}

pub fn vanilla_request(task: &Task, templates: &PromptTemplates, opts: &GenerationOptions) -> GenRequest {
    let user = templates.vanilla.render(&[("question", &task.question), ("contexts", &render_contexts(task))]);
    GenRequest::new(templates.system.body.clone(), user)
        .with_temperature(opts.temperature)
        .with_max_tokens(opts.max_tokens)
        .with_seed(opts.base_seed)
}

/// Single reasoner used by `cot` mode.
pub fn cot_persona(templates: &PromptTemplates) -> Persona {
    Persona {
        id: "cot".to_string(),
        bias_label: "none".to_string(),
        instruction_template: templates.cot.body.clone(),
        step_format_contract: templates.step_format.body.clone(),
    }
}

fn score_answer(prediction: &str, task: &Task) -> (Option<u8>, Option<f64>) {
    if task.gold_answers.is_empty() {
        return (None, None);
    }
    let (em, f1) = em_f1(prediction, &task.gold_answers);
    (Some(em), Some(f1))
}

/// Shared state of a run.
pub struct Pipeline<'a> {
    pub config: &'a SaverConfig,
    pub templates: PromptTemplates,
    pub personas: Vec<Persona>,
    pub backend: &'a dyn Backend,
    pub options: RunOptions,
    repair: RepairConfig,
}

impl<'a> Pipeline<'a> {
    /// First `M` personas of the configured coalition.
    pub fn new(
        config: &'a SaverConfig,
        templates: PromptTemplates,
        backend: &'a dyn Backend,
        options: RunOptions,
    ) -> Result<Self, PipelineError> {
        let mut personas = build_coalition(&config.coalition(), &templates)?;
        if options.mode == Mode::Saver && personas.len() < config.m {
            return Err(PipelineError::CoalitionTooSmall {
                have: personas.len(),
                want: config.m,
            });
        }
        personas.truncate(config.m);
        Ok(Self {
            repair: config.repair(),
            config,
            templates,
            personas,
            backend,
            options,
        })
    }

    pub fn generation(&self) -> GenerationOptions {
        self.config.generation(self.options.seed, self.config.m.min(4))
    }

    fn llm(&self) -> Llm<'_> {
        Llm {
            backend: self.backend,
            templates: &self.templates,
        }
    }

    pub fn run_task(&self, task: &Task) -> Result<TaskOutput, String> {
        match self.options.mode {
            Mode::Saver => self.run_saver(task),
            Mode::Vanilla => self.run_vanilla(task),
            Mode::Cot => self.run_cot(task),
        }
    }

    fn run_vanilla(&self, task: &Task) -> Result<TaskOutput, String> {
        let req = vanilla_request(task, &self.templates, &self.generation());
        let resp = self.backend.generate(&req).map_err(|e| e.to_string())?;
        let prediction = extract_answer(&resp.text);
        let (em, f1) = score_answer(&prediction, task);
        Ok(TaskOutput {
            record: RunRecord {
                task_id: task.id.clone(),
                mode: Mode::Vanilla,
                status: TaskStatus::Ok,
                error: None,
                prediction: Some(prediction),
                em,
                f1,
                committed: None,
                usable: vec![],
                selected: vec![],
                score: None,
                summary: None,
                backend_calls: 1,
            },
            audits: vec![],
            memory: None,
            selection: None,
        })
    }

    fn run_cot(&self, task: &Task) -> Result<TaskOutput, String> {
        let persona = cot_persona(&self.templates);
        let generated = generate_belief(task, &persona, 0, self.backend, &self.templates, &self.generation())
            .map_err(|e| e.to_string())?;
        let belief = generated.belief;
        let found = audit(
            &belief.trajectory,
            task,
            self.config.audit_mode,
            &self.config.lexicons,
            Some(self.llm()),
        );
        let summary = TrajectorySummary {
            violations: found.instances.len(),
            flagged_steps: flagged_steps(&found.instances).len(),
            steps: belief.trajectory.len(),
            repair_rounds: 0,
            repair_enabled: false,
        };
        let trace = RoundTrace {
            round: 1,
            usr: unfaithful_step_rate(&belief.trajectory, &found.instances),
            steps: belief.trajectory.len(),
            instances: found.instances,
            flags: found.flags,
            repair: None,
        };
        let (em, f1) = score_answer(&belief.claim, task);
        Ok(TaskOutput {
            record: RunRecord {
                task_id: task.id.clone(),
                mode: Mode::Cot,
                status: TaskStatus::Ok,
                error: None,
                prediction: Some(belief.claim.clone()),
                em,
                f1,
                committed: Some(belief.persona_id.clone()),
                usable: vec![],
                selected: vec![],
                score: None,
                summary: Some(summary),
                backend_calls: generated.backend_calls,
            },
            audits: vec![AuditLogEntry {
                task_id: task.id.clone(),
                belief: belief.persona_id,
                trace,
            }],
            memory: None,
            selection: None,
        })
    }

    fn run_saver(&self, task: &Task) -> Result<TaskOutput, String> {
        let cfg = self.config;
        let set = generate_candidates(task, &self.personas, self.backend, &self.templates, &self.generation())
            .map_err(|e| e.to_string())?;
        let q: Vec<f64> = set.beliefs.iter().map(|b| quality_score(b, task).normalized).collect();
        let usable = usability_filter(&q, cfg.q_min, cfg.k);
        let pool: Vec<&Belief> = usable.iter().map(|&i| &set.beliefs[i]).collect();
        let features: Vec<_> = pool.iter().map(|b| extract_features(b)).collect();
        let pool_q: Vec<f64> = usable.iter().map(|&i| q[i]).collect();
        let kernel = build_kernel(&features, &pool_q, cfg.beta).map_err(|e| e.to_string())?;
        let k = cfg.k.min(pool.len());
        let sample = kdpp_sample_seeded(&kernel, k, task_seed(self.options.seed, &task.id)).map_err(|e| e.to_string())?;
        let selected: Vec<usize> = sample.indices.iter().map(|&i| usable[i]).collect();
        let selection = self
            .options
            .dump_selection
            .then(|| SelectionDump::new(&task.id, usable.clone(), &kernel, k, sample.clone()));

        let ctx = RepairContext {
            task,
            config: &self.repair,
            llm: Some(self.llm()),
        };
        let outcomes = thread::scope(|s| {
            let handles: Vec<_> = selected
                .iter()
                .map(|&i| {
                    let belief = &set.beliefs[i];
                    let ctx = &ctx;
                    s.spawn(move || audit_repair_loop(belief, task, ctx))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("repair worker panicked"))
                .collect::<Vec<_>>()
        });

        let repaired: Vec<Belief> = selected
            .iter()
            .zip(&outcomes)
            .map(|(&i, o)| Belief {
                trajectory: o.trajectory.clone(),
                ..set.beliefs[i].clone()
            })
            .collect();
        let candidates: Vec<CommitCandidate> = repaired
            .iter()
            .zip(&outcomes)
            .map(|(b, o)| CommitCandidate {
                q_tilde: quality_score(b, task).normalized,
                profile: o.profile(),
            })
            .collect();
        let best = commit(&candidates, cfg.alpha, &cfg.weights).ok_or("no belief to commit")?;
        let chosen = &repaired[best];
        let outcome = &outcomes[best];
        let score = commit_score(&candidates[best], cfg.alpha, &cfg.weights);

        let audits = selected
            .iter()
            .zip(&outcomes)
            .flat_map(|(&i, o)| {
                let belief = set.beliefs[i].persona_id.clone();
                o.trace.iter().map(move |t| AuditLogEntry {
                    task_id: task.id.clone(),
                    belief: belief.clone(),
                    trace: t.clone(),
                })
            })
            .collect();
        let memory = MemoryRecord {
            task_id: task.id.clone(),
            belief_id: chosen.persona_id.clone(),
            claim: chosen.claim.clone(),
            trajectory: chosen.trajectory.clone(),
            rounds_used: outcome.rounds_used,
            profile: outcome.profile(),
            score,
        };
        let summary = TrajectorySummary {
            violations: outcome.residual.len(),
            flagged_steps: flagged_steps(&outcome.residual).len(),
            steps: chosen.trajectory.len(),
            repair_rounds: outcome.repair_rounds,
            repair_enabled: true,
        };
        let (em, f1) = score_answer(&chosen.claim, task);
        Ok(TaskOutput {
            record: RunRecord {
                task_id: task.id.clone(),
                mode: Mode::Saver,
                status: TaskStatus::Ok,
                error: None,
                prediction: Some(chosen.claim.clone()),
                em,
                f1,
                committed: Some(chosen.persona_id.clone()),
                usable,
                selected,
                score: Some(score),
                summary: Some(summary),
                backend_calls: set.backend_calls,
            },
            audits,
            memory: Some(memory),
            selection,
        })
    }

    /// Runs every task on a pool of `parallel` workers and hands the outputs
    /// to `sink` in task order.
    pub fn run_tasks(&self, tasks: &[Task], mut sink: impl FnMut(TaskOutput) -> Result<(), PipelineError>) -> Result<(), PipelineError> {
        let workers = self.options.parallel.max(1).min(tasks.len().max(1));
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            let (tx, rx) = mpsc::channel::<(usize, TaskOutput)>();
            for _ in 0..workers {
                let tx = tx.clone();
                let next = &next;
                s.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(task) = tasks.get(i) else { break };
                    let out = self.run_task(task).unwrap_or_else(|e| TaskOutput {
                        record: RunRecord::failed(&task.id, self.options.mode, e),
                        audits: vec![],
                        memory: None,
                        selection: None,
                    });
                    if tx.send((i, out)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            let mut emit = 0;
            for (i, out) in rx {
                pending.insert(i, out);
                while let Some(out) = pending.remove(&emit) {
                    sink(out)?;
                    emit += 1;
                }
            }
            Ok(())
        })
    }

    /// Full run writing all outputs under `out_dir`.
    pub fn run(&self, tasks: &[Task], out_dir: &Path) -> Result<RunReport, PipelineError> {
        let mut w = RunWriter::create(out_dir, self.options.dump_selection)?;
        let mut records = Vec::with_capacity(tasks.len());
        self.run_tasks(tasks, |out| {
            w.write(&out)?;
            records.push(out.record);
            Ok(())
        })?;
        w.finish()?;
        let report = report_from_records(self.options.mode, &records);
        write_report(out_dir, &report)?;
        Ok(report)
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const RUNS_FILE: &str = "runs.jsonl";
pub const AUDIT_FILE: &str = "audit_log.jsonl";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const SELECTION_FILE: &str = "selection.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

struct JsonlFile {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlFile {
    fn create(path: PathBuf) -> Result<Self, PipelineError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), PipelineError> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Single writer for the append-only logs.
pub struct RunWriter {
    runs: JsonlFile,
    audits: JsonlFile,
    memory: JsonlFile,
    selection: Option<JsonlFile>,
}

impl RunWriter {
    pub fn create(dir: &Path, dump_selection: bool) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            runs: JsonlFile::create(dir.join(RUNS_FILE))?,
            audits: JsonlFile::create(dir.join(AUDIT_FILE))?,
            memory: JsonlFile::create(dir.join(MEMORY_FILE))?,
            selection: dump_selection
                .then(|| JsonlFile::create(dir.join(SELECTION_FILE)))
                .transpose()?,
        })
    }

    pub fn write(&mut self, out: &TaskOutput) -> Result<(), PipelineError> {
        self.runs.line(&out.record)?;
        for a in &out.audits {
            self.audits.line(a)?;
        }
        if let Some(m) = &out.memory {
            self.memory.line(m)?;
        }
        if let (Some(f), Some(s)) = (self.selection.as_mut(), &out.selection) {
            f.line(s)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(), PipelineError> {
        self.runs.finish()?;
        self.audits.finish()?;
        self.memory.finish()?;
        if let Some(s) = self.selection {
            s.finish()?;
        }
        Ok(())
    }
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    let json_path = dir.join(REPORT_JSON);
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    let csv_path = dir.join(REPORT_CSV);
    let file = File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_report_csv(file, report).map_err(|e| PipelineError::Io {
        path: csv_path.display().to_string(),
        source: io::Error::other(e),
    })
}

/// Fixture answering every generation request of a run with a fixed reply
/// per task: persona requests and the `cot` request get `reply`, the
/// vanilla request gets its `ANSWER:` line.
pub fn scripted_replies<'t>(
    tasks: impl IntoIterator<Item = (&'t Task, String)>,
    personas: &[Persona],
    templates: &PromptTemplates,
    opts: &GenerationOptions,
    fixture: &mut ScriptedFixture,
) {
    let cot = cot_persona(templates);
    for (task, reply) in tasks {
        for (i, p) in personas.iter().enumerate() {
            fixture.insert(&persona_request(task, p, i, templates, opts), reply.clone());
        }
        fixture.insert(&persona_request(task, &cot, 0, templates, opts), reply.clone());
        fixture.insert(&vanilla_request(task, templates, opts), format!("ANSWER: {}", extract_answer(&reply)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_line_wins() {
        assert_eq!(extract_answer("[1] CLAIM x\nANSWER:  Animorphs \n"), "Animorphs");
        assert_eq!(extract_answer(" just text "), "just text");
    }

    #[test]
    fn seeds_differ_by_task() {
        assert_ne!(task_seed(1, "a"), task_seed(1, "b"));
        assert_eq!(task_seed(1, "a"), task_seed(1, "a"));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Saver, Mode::Vanilla, Mode::Cot] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("best-of-2".parse::<Mode>().is_err());
    }
}
