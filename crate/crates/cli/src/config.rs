//! Layered settings: built-in defaults, then the TOML config file, then
//! environment variables, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rcakb_core::embedding::{HashEmbedder, SkipGramModel, TextEmbedder, TokenEmbedder};
use rcakb_core::gateway::{BackendConfig, BackendKind, Gateway};
use rcakb_core::pipeline::{Mode, PipelineConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_MODE: &str = "RCAKB_MODE";
pub const ENV_THRESHOLD: &str = "RCAKB_THRESHOLD";
pub const ENV_K: &str = "RCAKB_K";
pub const ENV_SEED: &str = "RCAKB_SEED";
pub const ENV_BACKEND: &str = "RCAKB_BACKEND";

pub const BASE_TAG: &str = "base";
pub const DLLM_TAG: &str = "dllm";

/// How texts are embedded for retrieval and compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hash { dim: usize },
    Skipgram { path: PathBuf },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hash { dim: 100 }
    }
}

/// A loaded embedder usable for both whole texts and single tokens.
#[derive(Clone)]
pub enum LoadedEmbedder {
    Hash(HashEmbedder),
    Skipgram(Arc<SkipGramModel>),
}

impl LoadedEmbedder {
    pub fn text(&self) -> Arc<dyn TextEmbedder> {
        match self {
            LoadedEmbedder::Hash(h) => Arc::new(*h),
            LoadedEmbedder::Skipgram(m) => m.clone(),
        }
    }

    pub fn token(&self) -> Arc<dyn TokenEmbedder> {
        match self {
            LoadedEmbedder::Hash(h) => Arc::new(*h),
            LoadedEmbedder::Skipgram(m) => m.clone(),
        }
    }
}

impl EmbedderSpec {
    /// Relative model paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedEmbedder, CliError> {
        match self {
            EmbedderSpec::Hash { dim } => {
                if *dim < 2 {
                    return Err(CliError::Usage(format!("hash embedder dim {dim} must be at least 2")));
                }
                Ok(LoadedEmbedder::Hash(HashEmbedder::new(*dim)))
            }
            EmbedderSpec::Skipgram { path } => {
                let full = base.join(path);
                let model = SkipGramModel::load(&full).map_err(|e| CliError::Data {
                    path: full.display().to_string(),
                    message: e.to_string(),
                })?;
                Ok(LoadedEmbedder::Skipgram(Arc::new(model)))
            }
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<Mode>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub max_token: Option<usize>,
    pub parallelism: Option<usize>,
    pub max_new_tokens: Option<u32>,
    pub backend: Option<BackendConfig>,
    pub dllm: Option<BackendConfig>,
    pub embedder: Option<EmbedderSpec>,
    pub lexicon: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Values that may come from the environment or from flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub max_token: Option<usize>,
    pub parallelism: Option<usize>,
    pub backend: Option<BackendKind>,
    pub fixture: Option<String>,
    pub endpoint: Option<String>,
    pub dllm: Option<BackendKind>,
    pub dllm_fixture: Option<String>,
    pub dllm_endpoint: Option<String>,
    pub embeddings: Option<PathBuf>,
    pub embed_dim: Option<usize>,
    pub lexicon: Option<PathBuf>,
}

fn parse_env<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>, CliError> {
    match env(key).filter(|v| !v.is_empty()) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("environment variable {key}: cannot parse `{v}`"))),
    }
}

impl Overrides {
    pub fn from_env(env: &dyn Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        Ok(Self {
            mode: parse_env(env, ENV_MODE)?,
            threshold: parse_env(env, ENV_THRESHOLD)?,
            k: parse_env(env, ENV_K)?,
            seed: parse_env(env, ENV_SEED)?,
            backend: parse_env(env, ENV_BACKEND)?,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub pipeline: PipelineConfig,
    pub backend: BackendConfig,
    pub dllm: Option<BackendConfig>,
    pub embedder: EmbedderSpec,
    pub lexicon: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            backend: BackendConfig::mock(),
            dllm: None,
            embedder: EmbedderSpec::default(),
            lexicon: None,
        }
    }
}

impl Settings {
    /// Resolves settings with precedence flags > environment > file > defaults.
    pub fn resolve(
        file: Option<FileConfig>,
        env: &dyn Fn(&str) -> Option<String>,
        flags: &Overrides,
    ) -> Result<Self, CliError> {
        let mut s = Settings::default();
        if let Some(f) = file {
            s.apply_file(f);
        }
        s.backend.apply_vars(env);
        if let Some(d) = s.dllm.as_mut() {
            d.apply_vars(|k| env(&k.replace("RCAKB_LLM_", "RCAKB_DLLM_")));
        }
        s.apply(&Overrides::from_env(env)?);
        s.apply(flags);
        Ok(s)
    }

    fn apply_file(&mut self, f: FileConfig) {
        let p = &mut self.pipeline;
        set(&mut p.mode, f.mode);
        set(&mut p.threshold, f.threshold);
        set(&mut p.k, f.k);
        set(&mut p.seed, f.seed);
        set(&mut p.max_token, f.max_token);
        set(&mut p.parallelism, f.parallelism);
        set(&mut p.max_new_tokens, f.max_new_tokens);
        if let Some(b) = f.backend {
            self.backend = b;
        }
        if f.dllm.is_some() {
            self.dllm = f.dllm;
        }
        set(&mut self.embedder, f.embedder);
        if f.lexicon.is_some() {
            self.lexicon = f.lexicon;
        }
    }

    fn apply(&mut self, o: &Overrides) {
        let p = &mut self.pipeline;
        set(&mut p.mode, o.mode);
        set(&mut p.threshold, o.threshold);
        set(&mut p.k, o.k);
        set(&mut p.seed, o.seed);
        set(&mut p.max_token, o.max_token);
        set(&mut p.parallelism, o.parallelism);
        if let Some(p) = o.parallelism {
            self.pipeline.deterministic = p <= 1;
        }
        set(&mut self.backend.kind, o.backend);
        if o.fixture.is_some() {
            self.backend.fixture = o.fixture.clone();
        }
        if o.endpoint.is_some() {
            self.backend.endpoint = o.endpoint.clone();
        }
        if o.dllm.is_some() || o.dllm_fixture.is_some() || o.dllm_endpoint.is_some() {
            let d = self.dllm.get_or_insert_with(BackendConfig::default);
            set(&mut d.kind, o.dllm);
            if o.dllm_fixture.is_some() {
                d.fixture = o.dllm_fixture.clone();
            }
            if o.dllm_endpoint.is_some() {
                d.endpoint = o.dllm_endpoint.clone();
            }
        }
        if let Some(path) = &o.embeddings {
            self.embedder = EmbedderSpec::Skipgram { path: path.clone() };
        } else if let Some(dim) = o.embed_dim {
            self.embedder = EmbedderSpec::Hash { dim };
        }
        if o.lexicon.is_some() {
            self.lexicon = o.lexicon.clone();
        }
    }

    /// Gateway with the base backend and, when configured, the D-LLM.
    pub fn gateway(&mut self) -> Result<Gateway, CliError> {
        let mut g = Gateway::new(true);
        g.register_config(BASE_TAG, &self.backend)?;
        self.pipeline.base_backend = BASE_TAG.into();
        if let Some(d) = &self.dllm {
            g.register_config(DLLM_TAG, d)?;
            self.pipeline.dllm_backend = Some(DLLM_TAG.into());
        }
        Ok(g)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    const FILE: &str = r#"
mode = "plain"
threshold = 0.5
k = 3
seed = 9

[backend]
kind = "http"
endpoint = "http://file.invalid/v1"
model = "m"

[embedder]
kind = "hash"
dim = 64
"#;

    #[test]
    fn precedence_is_flags_env_file_defaults() {
        let file = FileConfig::parse(FILE, "x.toml").unwrap();
        let none = env_of(&[]);
        let s = Settings::resolve(Some(file.clone()), &none, &Overrides::default()).unwrap();
        assert_eq!(s.pipeline.mode, Mode::Plain);
        assert_eq!(s.pipeline.threshold, 0.5);
        assert_eq!(s.pipeline.max_token, 4096);
        assert_eq!(s.embedder, EmbedderSpec::Hash { dim: 64 });

        let env = env_of(&[(ENV_THRESHOLD, "0.6"), (ENV_K, "4"), ("RCAKB_LLM_ENDPOINT", "http://env.invalid")]);
        let s = Settings::resolve(Some(file.clone()), &env, &Overrides::default()).unwrap();
        assert_eq!((s.pipeline.threshold, s.pipeline.k, s.pipeline.seed), (0.6, 4, 9));
        assert_eq!(s.backend.endpoint.as_deref(), Some("http://env.invalid"));

        let flags = Overrides {
            threshold: Some(0.8),
            endpoint: Some("http://flag.invalid".into()),
            ..Overrides::default()
        };
        let s = Settings::resolve(Some(file), &env, &flags).unwrap();
        assert_eq!((s.pipeline.threshold, s.pipeline.k), (0.8, 4));
        assert_eq!(s.backend.endpoint.as_deref(), Some("http://flag.invalid"));
    }

    #[test]
    fn defaults_without_file() {
        let s = Settings::resolve(None, &env_of(&[]), &Overrides::default()).unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!(s.pipeline.threshold, 0.70);
        assert_eq!(s.pipeline.k, 5);
    }

    #[test]
    fn bad_inputs_are_usage_errors() {
        assert_eq!(FileConfig::parse("bogus = 1", "x").unwrap_err().exit_code(), 1);
        let env = env_of(&[(ENV_SEED, "many")]);
        assert_eq!(Settings::resolve(None, &env, &Overrides::default()).unwrap_err().exit_code(), 1);
    }
}
