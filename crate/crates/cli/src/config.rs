//! Run configuration: one TOML file merging model, optimizer, path and text
//! settings, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use anomize::dataio::resolve;
use anomize::metrics::BetaOverrides;
use anomize::model::ModelConfig;
use anomize::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File looked up in the workspace when `--config` is absent.
pub const DEFAULT_CONFIG: &str = "anomize.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub labels: PathBuf,
    pub manifest: PathBuf,
    /// Output of `prepare-text`, input of every later stage.
    pub assets: PathBuf,
    /// Parent of the per-run directories.
    pub runs: PathBuf,
    /// Canned model answers used in fixture mode and consulted first in
    /// client mode.
    pub fixture: Option<PathBuf>,
    /// Client mode stores every exchange here when set.
    pub capture: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            labels: "labels.json".into(),
            manifest: "manifest.jsonl".into(),
            assets: "assets".into(),
            runs: "runs".into(),
            fixture: Some("fixtures/llm.json".into()),
            capture: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    /// Replay answers from the fixture file only.
    #[default]
    Fixture,
    /// Ask the HTTP endpoint for anything the fixture lacks.
    Client,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    /// Deterministic hashed token embeddings.
    #[default]
    Pseudo,
    /// Precomputed embedding files keyed by text id.
    Files,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSettings {
    pub llm: LlmMode,
    pub llm_model: Option<String>,
    pub encoder: Encoder,
    pub embed_seed: u64,
    pub embedding_files: Vec<PathBuf>,
    /// Concept nouns to request; the label-space default when unset.
    pub concept_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the run directory under `paths.runs`.
    pub run: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub text: TextSettings,
    /// Per-split fusion weights used at evaluation time.
    pub eval: BetaOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: "default".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            text: TextSettings::default(),
            eval: BetaOverrides::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run: Option<String>,
}

/// A validated configuration with every path made absolute.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub workspace: PathBuf,
    /// The config file as read, if there was one.
    pub source: Option<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.run.is_empty() || self.run.contains(['/', '\\']) {
            return Err(CliError::config(format!("run name '{}' must be a plain directory name", self.run)));
        }
        for (name, b) in [("eval.base", self.eval.base), ("eval.novel", self.eval.novel)] {
            if b.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                return Err(CliError::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.text.encoder == Encoder::Files && self.text.embedding_files.is_empty() {
            return Err(CliError::config("text.encoder = \"files\" needs text.embedding_files"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, root: &Path) {
        let p = &mut self.paths;
        for path in [&mut p.labels, &mut p.manifest, &mut p.assets, &mut p.runs] {
            *path = resolve(root, path);
        }
        for path in [&mut p.fixture, &mut p.capture].into_iter().flatten() {
            *path = resolve(root, path);
        }
        for path in &mut self.text.embedding_files {
            *path = resolve(root, path);
        }
    }
}

/// Reads the config (explicit path, else the workspace default if present,
/// else built-in defaults), applies overrides, resolves and validates.
pub fn load(explicit: Option<&Path>, workspace: &Path, overrides: &Overrides) -> Result<Resolved> {
    let path = match explicit {
        Some(p) => Some(resolve(workspace, p)),
        None => Some(workspace.join(DEFAULT_CONFIG)).filter(|p| p.is_file()),
    };
    let source = match &path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let mut config = match &source {
        Some(text) => RunConfig::from_toml(text).map_err(|e| e.context(path.as_ref().unwrap().display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.train.seed = seed;
        config.model.init_seed = seed;
    }
    if let Some(run) = &overrides.run {
        config.run = run.clone();
    }
    config.validate()?;
    config.resolve_paths(workspace);
    Ok(Resolved {
        config,
        workspace: workspace.to_path_buf(),
        source,
    })
}

impl Resolved {
    pub fn run_dir(&self) -> PathBuf {
        self.config.paths.runs.join(&self.config.run)
    }

    /// Writes the file as given and the resolved view into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        if let Some(text) = &self.source {
            let p = dir.join("config.toml");
            std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        }
        let p = dir.join("resolved_config.toml");
        std::fs::write(&p, self.config.to_toml()).map_err(|e| CliError::io(&p, e))
    }
}
