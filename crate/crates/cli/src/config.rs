//! TOML run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use xai_class::corpus::LabelSet;
use xai_class::model::{ModelConfig, Preset};
use xai_class::oracles::{PromptTemplates, RemoteConfig, ENV_CLASS_URL, ENV_SALIENCY_URL, ENV_TOKEN};
use xai_class::rounds::RoundConfig;
use xai_class::train::TrainConfig;

pub const PSEUDO_FILE: &str = "pseudo_labels.jsonl";
pub const STATS_FILE: &str = "pseudo_stats.json";
pub const TRAIN_DIR: &str = "train";
pub const REPORT_DIR: &str = "eval";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub labels: Vec<String>,
    pub paths: Paths,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub rounds: RoundConfig,
    #[serde(default)]
    pub model: ModelSection,
    /// Its `seed` is ignored in favour of the top-level one.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Defaults below resolve inside `out_dir`.
    pub pseudo: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Lexicon,
    Remote,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub backend: Backend,
    pub workers: usize,
    /// Label name to keyword list.
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub remote: RemoteSection,
    pub prompts: PromptSection,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Lexicon,
            workers: 4,
            lexicon: BTreeMap::new(),
            remote: RemoteSection::default(),
            prompts: PromptSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSection {
    /// Fall back to the oracle URL environment variables when unset.
    pub class_url: Option<String>,
    pub saliency_url: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: Option<usize>,
}

impl Default for RemoteSection {
    fn default() -> Self {
        Self {
            class_url: None,
            saliency_url: None,
            timeout_secs: 30.0,
            retries: 3,
            backoff_ms: 500,
            max_concurrency: Some(4),
        }
    }
}

impl RemoteSection {
    pub fn endpoint(&self, url: Option<&str>, env_var: &str) -> Result<RemoteConfig> {
        let url = match url {
            Some(u) => u.to_owned(),
            None => {
                std::env::var(env_var).with_context(|| format!("no oracle URL configured and {env_var} is unset"))?
            }
        };
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            bail!("oracle.remote.timeout_secs must be positive");
        }
        Ok(RemoteConfig {
            url,
            token: std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs_f64(self.timeout_secs),
            retries: self.retries,
            backoff: Duration::from_millis(self.backoff_ms),
            max_concurrency: self.max_concurrency,
        })
    }

    pub fn class_endpoint(&self) -> Result<RemoteConfig> {
        self.endpoint(self.class_url.as_deref(), ENV_CLASS_URL)
    }

    pub fn saliency_endpoint(&self) -> Result<RemoteConfig> {
        self.endpoint(self.saliency_url.as_deref(), ENV_SALIENCY_URL)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub classification: String,
    pub classification_with_hints: String,
    pub saliency: String,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            classification: PromptTemplates::CLASSIFICATION.into(),
            classification_with_hints: PromptTemplates::CLASSIFICATION_WITH_HINTS.into(),
            saliency: PromptTemplates::SALIENCY.into(),
        }
    }
}

impl PromptSection {
    pub fn templates(&self) -> Result<PromptTemplates> {
        Ok(PromptTemplates::new(
            &self.classification,
            &self.classification_with_hints,
            &self.saliency,
        )?)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub l_max: Option<usize>,
    pub dropout: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub max_rounds: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, resolves relative paths against its directory, applies
    /// `overrides` and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(lambda) = overrides.lambda {
            self.train.lambda = lambda;
        }
        if let Some(rounds) = overrides.max_rounds {
            self.rounds.max_rounds = rounds;
        }
        if let Some(dir) = &overrides.out_dir {
            self.paths.out_dir = dir.clone();
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.label_set()?;
        self.rounds.validate()?;
        self.train.validate()?;
        self.model_config().validate()?;
        if self.oracle.workers == 0 {
            bail!("oracle.workers must be positive");
        }
        for (name, path) in [
            ("paths.train", Some(&self.paths.train)),
            ("paths.dev", self.paths.dev.as_ref()),
            ("paths.test", self.paths.test.as_ref()),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    bail!("{name}: {} does not exist", p.display());
                }
            }
        }
        self.oracle.prompts.templates()?;
        if self.oracle.backend == Backend::Lexicon && self.oracle.lexicon.is_empty() {
            bail!("the lexicon backend needs an [oracle.lexicon] table");
        }
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        Ok(LabelSet::new(self.labels.iter().cloned())?)
    }

    /// Vocabulary size and class count are filled in by training.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::from_preset(self.model.preset, self.labels.len().max(1), 1);
        if let Some(l_max) = self.model.l_max {
            cfg = cfg.with_l_max(l_max);
        }
        if let Some(dropout) = self.model.dropout {
            cfg = cfg.with_dropout(dropout);
        }
        cfg
    }

    pub fn pseudo_path(&self) -> PathBuf {
        self.paths
            .pseudo
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join(PSEUDO_FILE))
    }

    pub fn stats_path(&self) -> PathBuf {
        self.paths.out_dir.join(STATS_FILE)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join(TRAIN_DIR))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths
            .report_dir
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join(REPORT_DIR))
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.train);
        join(&mut self.out_dir);
        for p in [
            &mut self.dev,
            &mut self.test,
            &mut self.pseudo,
            &mut self.checkpoint_dir,
            &mut self.report_dir,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
labels = ["sports", "business"]

[paths]
train = "train.jsonl"

[oracle.lexicon]
sports = ["goal"]
business = ["shares"]
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.rounds.max_rounds, 2);
        assert_eq!(cfg.train.lambda, 0.7);
        assert_eq!(cfg.model.preset, Preset::Tiny);
        assert_eq!(cfg.oracle.backend, Backend::Lexicon);
        assert_eq!(cfg.pseudo_path(), PathBuf::from("out").join(PSEUDO_FILE));
        assert_eq!(cfg.model_config().l_max, 128);
    }

    #[test]
    fn command_line_overrides_win() {
        let mut cfg = RunConfig::from_toml(&format!("{MINIMAL}\n[train]\nlambda = 0.2\n")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            lambda: Some(0.5),
            max_rounds: Some(3),
            out_dir: Some("elsewhere".into()),
        });
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!((cfg.seed, cfg.train.seed), (7, 7));
        assert_eq!(cfg.rounds.max_rounds, 3);
        assert_eq!(cfg.checkpoint_dir(), PathBuf::from("elsewhere").join(TRAIN_DIR));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml(&format!("{MINIMAL}\n[train]\nepochz = 2\n")).is_err());
        assert!(RunConfig::from_toml("labels = []").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.paths.resolve(Path::new("/data/run"));
        assert_eq!(cfg.paths.train, PathBuf::from("/data/run/train.jsonl"));
        assert_eq!(cfg.report_dir(), PathBuf::from("/data/run/out").join(REPORT_DIR));
    }
}
