//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditMode, Lexicons};
use crate::generation::{CoalitionConfig, GenerationOptions};
use crate::repair::{RepairConfig, RepairMode, SeverityWeights};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaverConfig {
    /// Coalition size.
    #[serde(rename = "M")]
    pub m: usize,
    /// Audit subset size.
    #[serde(rename = "K")]
    pub k: usize,
    pub beta: f64,
    /// Support threshold. Audit support scores are binary, so any value in
    /// (0, 1) gives the same rates.
    pub epsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub q_min: f64,
    #[serde(rename = "R_max")]
    pub r_max: usize,
    pub weights: SeverityWeights,
    pub persona_dir: Option<PathBuf>,
    pub personas: Option<Vec<String>>,
    pub template_dir: Option<PathBuf>,
    pub lexicons: Lexicons,
    pub audit_mode: AuditMode,
    pub repair_mode: RepairMode,
    pub repair_candidates: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl Default for SaverConfig {
    fn default() -> Self {
        let repair = RepairConfig::default();
        let generation = GenerationOptions::default();
        Self {
            m: 4,
            k: 2,
            beta: 1.0,
            epsilon: 0.5,
            lambda: repair.lambda,
            alpha: 1.0,
            q_min: 0.4,
            r_max: repair.r_max,
            weights: SeverityWeights::default(),
            persona_dir: None,
            personas: None,
            template_dir: None,
            lexicons: Lexicons::default(),
            audit_mode: AuditMode::Rule,
            repair_mode: RepairMode::Rule,
            repair_candidates: repair.n_candidates,
            temperature: generation.temperature,
            max_tokens: generation.max_tokens,
            model: "gpt-4o-mini".to_string(),
        }
    }
}

impl SaverConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&raw)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.m == 0 {
            return bad("M must be at least 1".into());
        }
        if self.k == 0 || self.k > self.m {
            return bad(format!("K must lie in 1..=M, got K={} M={}", self.k, self.m));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.q_min) {
            return bad(format!("q_min must lie in [0, 1], got {}", self.q_min));
        }
        if self.r_max == 0 {
            return bad("R_max must be at least 1".into());
        }
        if self.repair_candidates == 0 {
            return bad("repair_candidates must be at least 1".into());
        }
        Ok(())
    }

    pub fn coalition(&self) -> CoalitionConfig {
        CoalitionConfig {
            persona_dir: self.persona_dir.clone(),
            personas: self.personas.clone(),
        }
    }

    pub fn repair(&self) -> RepairConfig {
        RepairConfig {
            lambda: self.lambda,
            r_max: self.r_max,
            n_candidates: self.repair_candidates,
            mode: self.repair_mode,
            audit_mode: self.audit_mode,
            lexicons: self.lexicons.clone(),
        }
    }

    pub fn generation(&self, seed: u64, parallelism: usize) -> GenerationOptions {
        GenerationOptions {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            base_seed: Some(seed),
            parallelism: parallelism.max(1),
        }
    }
}
