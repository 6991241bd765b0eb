//! Run configuration, read from TOML. Secrets come from the environment only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::{CheckerSettings, Stage};
use crate::corpus::{Split, SplitFractions};
use crate::embed::{sha256_hex, ProviderSpec};
use crate::generate::{PlantMode, DEFAULT_TEMPERATURE};
use crate::premsel::{PremiseMode, TrainParams};
use crate::prompt::{Ablation, Profile, PromptFormat};
use crate::retrieve::RetrievalStrategy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    pub corpus: PathBuf,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub premises: PremiseConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub checker: CheckerConfig,
}

fn default_run_id() -> String {
    "run".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Use the labels stored in the corpus instead of generating splits.
    pub from_labels: bool,
    pub fractions: SplitFractions,
    pub cross_projects: BTreeSet<String>,
    pub seed: u64,
    /// Splits whose records are synthesis targets.
    pub evaluate: Vec<Split>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            from_labels: false,
            fractions: SplitFractions::default(),
            cross_projects: BTreeSet::new(),
            seed: 0,
            evaluate: vec![Split::IntraTest, Split::CrossTest],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub strategy: RetrievalStrategy,
    pub provider: ProviderSpec,
    /// Index cache; rebuilt when stale.
    pub index_path: Option<PathBuf>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { strategy: RetrievalStrategy::TrainOnly, provider: ProviderSpec::default(), index_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PremiseConfig {
    pub mode: PremiseMode,
    pub model_path: PathBuf,
    pub base: ProviderSpec,
    pub head_dimension: usize,
    /// Ranked names passed to the prompt.
    pub top_k: usize,
    pub training: TrainParams,
}

impl Default for PremiseConfig {
    fn default() -> Self {
        PremiseConfig {
            mode: PremiseMode::Oracle,
            model_path: PathBuf::from("premises.bin"),
            base: ProviderSpec::default(),
            head_dimension: 64,
            top_k: 20,
            training: TrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub format: PromptFormat,
    pub ablations: BTreeSet<Ablation>,
    pub profile: Profile,
    pub template: Option<PathBuf>,
    pub separator: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub backend: Backend,
    pub model_id: String,
    pub k: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
    pub token_cap: Option<u64>,
    pub mock: MockConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            backend: Backend::Mock,
            model_id: "mock".into(),
            k: 10,
            temperature: DEFAULT_TEMPERATURE,
            stop: Vec::new(),
            max_in_flight: 4,
            requests_per_minute: None,
            token_cap: None,
            mock: MockConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub seed: u64,
    pub mode: PlantMode,
    pub schedule: BTreeMap<String, PlantMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckerConfig {
    /// Checker executable; defaults to the bundled stub when `stub_script` is set.
    pub program: Option<PathBuf>,
    pub args: Vec<String>,
    /// Verdict table for the stub checker.
    pub stub_script: Option<PathBuf>,
    pub timeout_ms: u64,
    pub options: serde_json::Value,
    pub code_stages: BTreeMap<String, Stage>,
    pub workers: usize,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig {
            program: None,
            args: Vec::new(),
            stub_script: None,
            timeout_ms: 120_000,
            options: serde_json::Value::Null,
            code_stages: BTreeMap::new(),
            workers: 4,
        }
    }
}

impl CheckerConfig {
    pub fn settings(&self) -> Result<CheckerSettings, ConfigError> {
        let mut args = self.args.clone();
        let program = match (&self.program, &self.stub_script) {
            (Some(p), _) => p.clone(),
            (None, Some(script)) => {
                args.splice(0..0, ["--script".to_string(), script.display().to_string()]);
                stub_checker_path()?
            }
            (None, None) => return Err(ConfigError::Invalid("checker needs `program` or `stub_script`".into())),
        };
        let code_stages = self
            .code_stages
            .iter()
            .map(|(k, v)| {
                k.parse::<i64>()
                    .map(|k| (k, *v))
                    .map_err(|_| ConfigError::Invalid(format!("error code `{k}` is not an integer")))
            })
            .collect::<Result<_, _>>()?;
        Ok(CheckerSettings {
            program,
            args,
            timeout_ms: self.timeout_ms,
            options: self.options.clone(),
            code_stages,
        })
    }
}

/// The stub binary installed next to the running executable.
pub fn stub_checker_path() -> Result<PathBuf, ConfigError> {
    let exe = std::env::current_exe().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let dir = exe.parent().ok_or_else(|| ConfigError::Invalid("executable has no directory".into()))?;
    let name = format!("stub-checker{}", std::env::consts::EXE_SUFFIX);
    // test binaries live one level below the binaries in `deps/`
    [dir.join(&name), dir.join("..").join(&name)]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| ConfigError::Invalid(format!("cannot find {name} next to {}", exe.display())))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_toml(&text, &base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus);
        resolve(base, &mut self.output_dir);
        resolve(base, &mut self.premises.model_path);
        for p in [&mut self.retrieval.index_path, &mut self.prompt.template, &mut self.checker.stub_script]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        if let Some(p) = &mut self.checker.program {
            if p.components().count() > 1 {
                resolve(base, p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.generation.k == 0 {
            return Err(ConfigError::Invalid("generation.k must be at least 1".into()));
        }
        if self.splits.evaluate.is_empty() {
            return Err(ConfigError::Invalid("splits.evaluate must name at least one split".into()));
        }
        if self.splits.evaluate.contains(&Split::Train) {
            return Err(ConfigError::Invalid("the training split cannot be evaluated".into()));
        }
        Ok(())
    }

    /// Hash of the settings that can change results. Paths, worker counts
    /// and concurrency limits are excluded.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.checker.workers = 0;
        c.generation.max_in_flight = 0;
        c.generation.requests_per_minute = None;
        c.corpus = PathBuf::new();
        c.output_dir = PathBuf::new();
        c.retrieval.index_path = None;
        c.premises.model_path = PathBuf::new();
        c.prompt.template = None;
        c.checker.program = None;
        c.checker.stub_script = None;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}
