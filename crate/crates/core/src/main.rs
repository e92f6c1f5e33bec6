use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use saver_core::audit::{audit, Llm};
use saver_core::backend::{Backend, FallbackPolicy, HttpBackend, HttpConfig, MockBackend, ScriptedFixture};
use saver_core::config::SaverConfig;
use saver_core::eval::dataset::load_dataset;
use saver_core::eval::inject::{build_injection_corpus, CorpusSpec};
use saver_core::eval::pipeline::{
    scripted_replies, write_report, AuditLogEntry, Mode, Pipeline, RunOptions, AUDIT_FILE,
};
use saver_core::eval::report::{read_jsonl, report_from_run_dir, usr_by_round, usr_svg};
use saver_core::generation::{build_coalition, render_structured};
use saver_core::repair::{audit_repair_loop, RepairContext};
use saver_core::selection::seeded_rng;
use saver_core::templates::PromptTemplates;
use saver_core::trajectory::{Belief, Task, Trajectory};

#[derive(Parser)]
#[command(name = "saver", version, about = "Audit and repair LLM reasoning trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Saver,
    Vanilla,
    Cot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Saver => Mode::Saver,
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::Cot => Mode::Cot,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a dataset end to end.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "saver")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "mock")]
        backend: BackendKind,
        /// Scripted responses for the mock backend (JSONL).
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write selection.jsonl with kernels and subset probabilities.
        #[arg(long)]
        dump_selection: bool,
    },
    /// Audit one trajectory and optionally repair it.
    Audit {
        /// JSON trajectory (`{"steps": [...]}`) or belief.
        #[arg(long)]
        trajectory: PathBuf,
        /// JSON task supplying the evidence documents.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        repair: bool,
    },
    /// Generate a synthetic corpus with injected violations.
    Inject {
        /// TOML corpus spec; the built-in spec list when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config the mock fixtures are scripted for.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seed the mock fixtures are scripted for.
        #[arg(long, default_value_t = 0)]
        run_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute report.json and report.csv from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Plot mean USR per audit round to SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<SaverConfig> {
    match path {
        Some(p) => SaverConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(SaverConfig::default()),
    }
}

fn load_templates(cfg: &SaverConfig) -> Result<PromptTemplates> {
    match &cfg.template_dir {
        Some(dir) => PromptTemplates::load_dir(dir).with_context(|| format!("loading templates from {}", dir.display())),
        None => Ok(PromptTemplates::builtin()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn make_backend(kind: BackendKind, fixtures: Option<&Path>, cfg: &SaverConfig) -> Result<Box<dyn Backend>> {
    Ok(match kind {
        BackendKind::Mock => {
            let fixture = match fixtures {
                Some(p) => ScriptedFixture::load_jsonl(p, FallbackPolicy::Error)?,
                None => ScriptedFixture::new(FallbackPolicy::Error),
            };
            Box::new(MockBackend::new(fixture))
        }
        BackendKind::Http => Box::new(HttpBackend::new(HttpConfig::from_env(cfg.model.clone())?)?),
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    dataset: &Path,
    config: Option<&Path>,
    mode: Mode,
    backend: BackendKind,
    fixtures: Option<&Path>,
    seed: u64,
    parallel: usize,
    out: &Path,
    dump_selection: bool,
) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let templates = load_templates(&cfg)?;
    let data = load_dataset(dataset)?;
    for m in &data.malformed {
        eprintln!("warning: {}:{}: {}", dataset.display(), m.line, m.message);
    }
    let backend = make_backend(backend, fixtures, &cfg)?;
    let options = RunOptions {
        mode,
        seed,
        parallel,
        dump_selection,
    };
    let pipeline = Pipeline::new(&cfg, templates, backend.as_ref(), options)?;
    let report = pipeline.run(&data.records, out)?;
    print_json(&report)?;
    if report.run_failed {
        eprintln!(
            "error: {} of {} tasks failed (see {})",
            report.n_failed,
            report.n_tasks,
            out.join("runs.jsonl").display()
        );
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AuditReport<'a> {
    instances: &'a [saver_core::audit::ViolationInstance],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    flags: &'a [saver_core::audit::AuditFlag],
    #[serde(skip_serializing_if = "Option::is_none")]
    repair: Option<&'a saver_core::repair::RepairOutcome>,
}

fn cmd_audit(trajectory: &Path, task: Option<&Path>, config: Option<&Path>, repair: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let templates = load_templates(&cfg)?;
    let raw: serde_json::Value = read_json(trajectory)?;
    let belief: Belief = if raw.get("trajectory").is_some() {
        serde_json::from_value(raw).context("parsing belief")?
    } else {
        let t: Trajectory = serde_json::from_value(raw).context("parsing trajectory")?;
        Belief {
            persona_id: "input".into(),
            claim: t.conclusion().map(|c| c.text.clone()).unwrap_or_default(),
            trajectory: t,
            degraded: false,
        }
    };
    let task: Task = match task {
        Some(p) => read_json(p)?,
        None => Task {
            id: "input".into(),
            question: String::new(),
            contexts: vec![],
            gold_answers: vec![],
        },
    };
    // Only rule-mode auditing and repair are available without a backend.
    let backend = MockBackend::new(ScriptedFixture::new(FallbackPolicy::Error));
    let llm = Llm {
        backend: &backend,
        templates: &templates,
    };
    let found = audit(&belief.trajectory, &task, cfg.audit_mode, &cfg.lexicons, Some(llm));
    let outcome = repair.then(|| {
        let rc = cfg.repair();
        let ctx = RepairContext {
            task: &task,
            config: &rc,
            llm: Some(llm),
        };
        audit_repair_loop(&belief, &task, &ctx)
    });
    print_json(&AuditReport {
        instances: &found.instances,
        flags: &found.flags,
        repair: outcome.as_ref(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn cmd_inject(spec: Option<&Path>, n: usize, seed: u64, config: Option<&Path>, run_seed: u64, out: &Path) -> Result<()> {
    let spec: CorpusSpec = match spec {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&raw).with_context(|| format!("parsing {}", p.display()))?
        }
        None => CorpusSpec::default(),
    };
    let corpus = build_injection_corpus(&spec.specs, n, &mut seeded_rng(seed), spec.shape)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_jsonl(&out.join("corpus.jsonl"), &corpus)?;
    write_jsonl(&out.join("dataset.jsonl"), corpus.iter().map(|e| &e.task))?;

    let cfg = load_config(config)?;
    let templates = load_templates(&cfg)?;
    let mut personas = build_coalition(&cfg.coalition(), &templates)?;
    personas.truncate(cfg.m);
    let mut fixture = ScriptedFixture::new(FallbackPolicy::Error);
    scripted_replies(
        corpus.iter().map(|e| (&e.task, render_structured(&e.trajectory, &e.claim))),
        &personas,
        &templates,
        &cfg.generation(run_seed, 1),
        &mut fixture,
    );
    let path = out.join("fixtures.jsonl");
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    fixture.write_jsonl(std::io::BufWriter::new(file))?;
    eprintln!("wrote {} entries to {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_report(run: &Path) -> Result<()> {
    let report = report_from_run_dir(run)?;
    write_report(run, &report)?;
    print_json(&report)
}

fn cmd_plot(run: &Path, out: Option<&Path>) -> Result<()> {
    let entries: Vec<AuditLogEntry> = read_jsonl(&run.join(AUDIT_FILE))?;
    if entries.is_empty() {
        bail!("{} has no audit rounds to plot", run.join(AUDIT_FILE).display());
    }
    let curve = usr_by_round(&entries);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("usr_by_round.svg"));
    fs::write(&path, usr_svg(&curve, "Unfaithful step rate by audit round"))
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            dataset,
            config,
            mode,
            backend,
            fixtures,
            seed,
            parallel,
            out,
            dump_selection,
        } => cmd_run(
            &dataset,
            config.as_deref(),
            mode.into(),
            backend,
            fixtures.as_deref(),
            seed,
            parallel,
            &out,
            dump_selection,
        ),
        Command::Audit {
            trajectory,
            task,
            config,
            repair,
        } => cmd_audit(&trajectory, task.as_deref(), config.as_deref(), repair).map(|_| ExitCode::SUCCESS),
        Command::Inject {
            spec,
            n,
            seed,
            config,
            run_seed,
            out,
        } => cmd_inject(spec.as_deref(), n, seed, config.as_deref(), run_seed, &out).map(|_| ExitCode::SUCCESS),
        Command::Report { run } => cmd_report(&run).map(|_| ExitCode::SUCCESS),
        Command::Plot { run, out } => cmd_plot(&run, out.as_deref()).map(|_| ExitCode::SUCCESS),
    }
}
