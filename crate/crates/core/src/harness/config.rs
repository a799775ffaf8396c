//! Run configuration: the method under test, the site stream, and every
//! knob a run needs to be reproduced bit-identically.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dualmeta::GradientRoute;
use crate::error::{EngineError, Result};
use crate::replay::SelectionMode;

/// Training method. The sga variants differ only in which alignment terms
/// are active and how the buffer is curated:
///
/// - `finetune`: incoming-site gradient only; the buffer is maintained (so
///   every run leaves comparable artifacts) but never sampled in training;
/// - `jm`: joint minimization of all four batch losses, no alignment;
/// - `sga-orient`: aligns only incoming vs. buffer (gamma > 0, beta = 0);
/// - `sga-arbitrary`: aligns only the random split (gamma = 0, beta > 0);
/// - `sga`: both alignment terms via the first-order dual-meta route;
/// - `sga-c`: `sga` plus diversity-aware (hybrid-score) exemplar selection;
/// - `sga-direct`: both terms via the exact second-order gradient; exposed
///   for the approximation and runtime study, not a headline method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Finetune,
    Jm,
    SgaOrient,
    SgaArbitrary,
    Sga,
    SgaC,
    SgaDirect,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Finetune,
        Method::Jm,
        Method::SgaOrient,
        Method::SgaArbitrary,
        Method::Sga,
        Method::SgaC,
        Method::SgaDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Jm => "jm",
            Method::SgaOrient => "sga-orient",
            Method::SgaArbitrary => "sga-arbitrary",
            Method::Sga => "sga",
            Method::SgaC => "sga-c",
            Method::SgaDirect => "sga-direct",
        }
    }

    /// Whether training iterations draw replay batches from the buffer.
    pub fn samples_buffer(self) -> bool {
        self != Method::Finetune
    }

    pub fn route(self) -> GradientRoute {
        match self {
            Method::Finetune => GradientRoute::Plain,
            Method::SgaDirect => GradientRoute::DirectSga,
            _ => GradientRoute::DualMeta,
        }
    }

    /// Alignment weights actually applied, given the configured ones.
    /// The ablations zero out one side each; jm zeroes both.
    pub fn effective_weights(self, gamma: f64, beta: f64) -> (f64, f64) {
        match self {
            Method::Finetune => (0.0, 0.0),
            Method::Jm => (0.0, 0.0),
            Method::SgaOrient => (gamma, 0.0),
            Method::SgaArbitrary => (0.0, beta),
            Method::Sga | Method::SgaC | Method::SgaDirect => (gamma, beta),
        }
    }

    /// Only sga-c curates with the hybrid score; every other method keeps
    /// the plain representativeness buffer.
    pub fn selection_mode(self, lambda: f64) -> SelectionMode {
        match self {
            Method::SgaC => SelectionMode::Hybrid { lambda },
            _ => SelectionMode::RepresentativenessOnly,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                EngineError::Config(format!(
                    "unknown method '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Everything a run needs. Serialized as JSON field-for-field; omitted
/// fields take the defaults below, unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Ordered site ids trained on, one round each.
    pub stream: Vec<u32>,
    /// Site evaluated but never trained on (forward measure target).
    pub held_out: u32,
    /// Total sites generated/loaded; all of them are evaluated every round.
    pub n_sites: usize,
    /// Orientational (incoming vs. buffer) alignment weight.
    pub gamma: f64,
    /// Arbitrary (random split) alignment weight.
    pub beta: f64,
    /// Diversity weight in the hybrid exemplar score (sga-c only).
    pub lambda: f64,
    /// Exemplars kept per site.
    pub n_exemplars: usize,
    pub meta_lr: f64,
    pub batch_size: usize,
    pub iterations_per_round: usize,
    /// Seed namespaces: methods compared under the same data and init seeds
    /// see identical datasets and identical starting parameters.
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    /// Load sites from this directory (`site_<id>.bin`) instead of
    /// generating them in memory from `data_seed`. The files must have been
    /// produced with the same seed; that is verified at load.
    pub data_dir: Option<PathBuf>,
    /// Default output directory; a CLI `--out` overrides it.
    pub output_dir: Option<PathBuf>,
    /// Recompute buffered exemplar features with the newest parameters
    /// before each selection instead of keeping the features cached at
    /// selection time (the default).
    pub rescore_buffer_features: bool,
    /// Diagnostic: make non-buffered training (finetune) also draw buffer
    /// batches purely to log gradient alignment. Changes what data the run
    /// reads, so it is off by default.
    pub log_buffer_alignment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Sga,
            stream: vec![1, 2, 3, 4, 5],
            held_out: 0,
            n_sites: 6,
            gamma: 5e-4,
            beta: 5e-4,
            lambda: 1.0,
            n_exemplars: 2,
            meta_lr: 5e-4,
            batch_size: 5,
            iterations_per_round: 2000,
            data_seed: 7,
            init_seed: 11,
            train_seed: 13,
            data_dir: None,
            output_dir: None,
            rescore_buffer_features: false,
            log_buffer_alignment: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stream.is_empty() {
            return Err(EngineError::Config("stream has no sites".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.stream {
            if !seen.insert(s) {
                return Err(EngineError::Config(format!(
                    "site {s} appears twice in the stream"
                )));
            }
        }
        if self.stream.contains(&self.held_out) {
            return Err(EngineError::Config(format!(
                "held-out site {} is part of the stream",
                self.held_out
            )));
        }
        for &s in self.stream.iter().chain([&self.held_out]) {
            if s as usize >= self.n_sites {
                return Err(EngineError::Config(format!(
                    "site {s} is outside the {}-site pool",
                    self.n_sites
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(EngineError::Config("batch_size must be at least 1".into()));
        }
        if self.iterations_per_round == 0 {
            return Err(EngineError::Config(
                "iterations_per_round must be at least 1".into(),
            ));
        }
        if self.n_exemplars == 0 {
            return Err(EngineError::Config(
                "n_exemplars must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EngineError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !self.meta_lr.is_finite() || self.meta_lr <= 0.0 {
            return Err(EngineError::Config(format!(
                "meta_lr must be finite and positive, got {}",
                self.meta_lr
            )));
        }
        Ok(())
    }

    /// Copy with the output directory pinned to where the run actually
    /// writes; this resolved form is what gets echoed into artifacts and
    /// compared on resume.
    pub fn resolved(&self, out_dir: &Path) -> RunConfig {
        let mut c = self.clone();
        c.output_dir = Some(out_dir.to_path_buf());
        c
    }

    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
