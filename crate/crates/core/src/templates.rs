//! Versioned prompt templates.
//!
//! Every template file starts with a `# saver-template <name> v<N>` header.
//! The built-in copies under `templates/` are compiled in; a template
//! directory given at runtime overrides them file by file.

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::trajectory::Task;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name}: missing `# saver-template <name> v<N>` header")]
    MissingHeader { name: String },
    #[error("template {name}: {message}")]
    Malformed { name: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Template {
    pub name: String,
    pub version: u32,
    #[serde(skip)]
    pub body: String,
}

impl Template {
    pub fn parse(raw: &str) -> Result<Self, TemplateError> {
        let (header, body) = raw.split_once('\n').unwrap_or((raw, ""));
        let rest = header
            .trim()
            .strip_prefix("# saver-template ")
            .ok_or_else(|| TemplateError::MissingHeader {
                name: header.to_string(),
            })?;
        let (name, version) = rest.rsplit_once(' ').ok_or_else(|| TemplateError::MissingHeader {
            name: rest.to_string(),
        })?;
        let version = version
            .strip_prefix('v')
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TemplateError::Malformed {
                name: name.to_string(),
                message: format!("bad version `{version}`"),
            })?;
        Ok(Self {
            name: name.to_string(),
            version,
            body: body.trim_end().to_string(),
        })
    }

    /// Replaces each `{key}` with its value. Unknown placeholders are kept.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.body.clone();
        for (k, v) in vars {
            out = out.replace(&format!("{{{k}}}"), v);
        }
        out
    }
}

/// Context documents as the numbered listing shown to the model.
pub fn render_contexts(task: &Task) -> String {
    if task.contexts.is_empty() {
        return "(no context documents)".to_string();
    }
    let mut out = String::new();
    for doc in &task.contexts {
        if doc.title.is_empty() {
            out.push_str(&format!("[{}]\n", doc.doc_id));
        } else {
            out.push_str(&format!("[{}] {}\n", doc.doc_id, doc.title));
        }
        for (i, s) in doc.sentences.iter().enumerate() {
            out.push_str(&format!("  {}:{} {}\n", doc.doc_id, i, s));
        }
    }
    out.trim_end().to_string()
}

macro_rules! builtin {
    ($file:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $file))
    };
}

pub const BUILTIN_PERSONAS: [(&str, &str); 4] = [
    ("assumption-first", builtin!("personas/assumption-first.txt")),
    ("evidence-first", builtin!("personas/evidence-first.txt")),
    ("stepwise-decomposition", builtin!("personas/stepwise-decomposition.txt")),
    ("skeptic", builtin!("personas/skeptic.txt")),
];

#[derive(Debug, Clone, Serialize)]
pub struct PromptTemplates {
    pub system: Template,
    pub step_format: Template,
    pub reprompt: Template,
    pub vanilla: Template,
    pub cot: Template,
    pub judge_contradiction: Template,
    pub repair_step: Template,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        let t = |raw: &str| Template::parse(raw).expect("built-in template is well-formed");
        Self {
            system: t(builtin!("system.txt")),
            step_format: t(builtin!("step_format.txt")),
            reprompt: t(builtin!("reprompt.txt")),
            vanilla: t(builtin!("vanilla.txt")),
            cot: t(builtin!("cot.txt")),
            judge_contradiction: t(builtin!("judge_contradiction.txt")),
            repair_step: t(builtin!("repair_step.txt")),
        }
    }

    /// Built-ins overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut out = Self::builtin();
        let slots: [(&str, &mut Template); 7] = [
            ("system", &mut out.system),
            ("step_format", &mut out.step_format),
            ("reprompt", &mut out.reprompt),
            ("vanilla", &mut out.vanilla),
            ("cot", &mut out.cot),
            ("judge_contradiction", &mut out.judge_contradiction),
            ("repair_step", &mut out.repair_step),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let raw = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                *slot = Template::parse(&raw)?;
            }
        }
        Ok(out)
    }
}
