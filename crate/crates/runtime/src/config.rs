//! The TOML run configuration: paths, template overrides, backends, modes.
//!
//! ```toml
//! [paths]
//! questions = "data/questions.jsonl"
//! labels = "data/labels.json"
//! out = "out"
//!
//! [templates]
//! p2 = "templates/p2_custom.txt"
//!
//! [[backends]]
//! id = "mock"
//! kind = "mock"
//! seed = 7
//!
//! [[modes]]
//! id = "p1_answer"
//! paradigm = "one_stage"
//! prompt_style = "P1"
//! cot_fields = ["answer"]
//! backend = "mock"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use modevote_core::mode::validate_modes;
use modevote_core::{ModeConfig, ModeError, PromptError, PromptStyle, TemplateSet};
use serde::Deserialize;
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendKind, BackendProfile, BackendRegistry};
use crate::http::HttpBackend;
use crate::limit::LimitedBackend;
use crate::mock::MockBackend;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("mode `{mode}` uses unknown backend `{backend}`")]
    UnknownBackend { mode: String, backend: String },
    #[error("backend `{0}` needs the network but --offline was given")]
    Offline(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub questions: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Defaults to `<out>/cache`.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub workers: Option<usize>,
    pub max_reasks: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub paths: Paths,
    /// Template file per prompt style, replacing the built-in text.
    #[serde(default)]
    pub templates: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub backends: Vec<BackendProfile>,
    #[serde(default)]
    pub modes: Vec<ModeConfig>,
}

/// Backends built from a config, with direct handles on the mocks so that
/// callers can read their call counters.
pub struct Backends {
    pub registry: BackendRegistry,
    pub mocks: BTreeMap<String, Arc<MockBackend>>,
}

impl Backends {
    pub fn mock_calls(&self) -> u64 {
        self.mocks.values().map(|m| m.calls()).sum()
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Toml { source, .. } => ConfigError::Toml {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    /// Parses and validates config text; relative paths are joined to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: "<config>".into(),
            source,
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut config.paths.questions,
            &mut config.paths.labels,
            &mut config.paths.out,
            &mut config.paths.cache,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        config.templates.values_mut().for_each(resolve);
        for backend in &mut config.backends {
            if let BackendKind::Mock { script, labels, .. } = &mut backend.kind {
                script.iter_mut().chain(labels.iter_mut()).for_each(resolve);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut ids = std::collections::BTreeSet::new();
        for backend in &self.backends {
            backend.validate()?;
            if !ids.insert(backend.backend_id.as_str()) {
                return Err(ConfigError::Invalid(format!("duplicate backend id `{}`", backend.backend_id)));
            }
        }
        validate_modes(&self.modes)?;
        for mode in &self.modes {
            for backend in [mode.backend_id.as_str(), mode.focus_backend()] {
                if !ids.contains(backend) {
                    return Err(ConfigError::UnknownBackend {
                        mode: mode.mode_id.clone(),
                        backend: backend.to_string(),
                    });
                }
            }
        }
        for style in self.templates.keys() {
            style.parse::<PromptStyle>()?;
        }
        if self.run.workers == Some(0) {
            return Err(ConfigError::Invalid("run.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn template_set(&self) -> Result<TemplateSet, ConfigError> {
        let mut set = TemplateSet::builtin();
        for (style, path) in &self.templates {
            set.load_file(style.parse()?, path)?;
        }
        Ok(set)
    }

    /// Modes in the order asked for; an empty list selects all of them.
    pub fn select_modes(&self, ids: &[String]) -> Result<Vec<&ModeConfig>, ConfigError> {
        if ids.is_empty() {
            return Ok(self.modes.iter().collect());
        }
        ids.iter()
            .map(|id| {
                self.modes
                    .iter()
                    .find(|m| &m.mode_id == id)
                    .ok_or_else(|| ConfigError::UnknownMode(id.clone()))
            })
            .collect()
    }

    /// Builds every backend, each behind its concurrency and rate limits.
    /// `seed` replaces the seed of every mock backend.
    pub fn build_backends(&self, offline: bool, seed: Option<u64>) -> Result<Backends, ConfigError> {
        let mut registry = BackendRegistry::new();
        let mut mocks = BTreeMap::new();
        for profile in &self.backends {
            let mut profile = profile.clone();
            let backend: Arc<dyn Backend> = match &mut profile.kind {
                BackendKind::Mock { seed: mock_seed, .. } => {
                    if let Some(s) = seed {
                        *mock_seed = s;
                    }
                    let mock = Arc::new(MockBackend::from_profile(profile.clone())?);
                    mocks.insert(profile.backend_id.clone(), mock.clone());
                    mock
                }
                BackendKind::Openai { .. } => {
                    if offline {
                        return Err(ConfigError::Offline(profile.backend_id.clone()));
                    }
                    Arc::new(HttpBackend::new(profile.clone())?)
                }
            };
            registry.insert(Arc::new(LimitedBackend::new(backend)))?;
        }
        Ok(Backends { registry, mocks })
    }
}
