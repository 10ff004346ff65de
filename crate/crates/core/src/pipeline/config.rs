//! Flat `key = value` configuration.
//!
//! Precedence, lowest first: built-in defaults, config file, the
//! `RAPSG_BACKEND_URL` environment variable, command-line overrides.
//! Relative paths in a file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::fluency_filter::{CiderParams, CiderVariant, DEFAULT_SIGMA};
use crate::grouping::{validate_k_m, DEFAULT_M};
use crate::retrieval::DEFAULT_K;
use crate::sentence_embedder::DEFAULT_HASH_DIM;
use crate::summarization::DEFAULT_MAX_TOKENS;

pub const BACKEND_ENV: &str = "RAPSG_BACKEND_URL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Fallback,
    Service(String),
}

impl BackendChoice {
    fn parse(value: &str) -> Result<Self, PipelineError> {
        match value {
            "fallback" => Ok(Self::Fallback),
            url if url.starts_with("http://") || url.starts_with("https://") => {
                Ok(Self::Service(url.to_owned()))
            }
            other => Err(PipelineError::Config(format!(
                "backend must be `fallback` or an http(s) URL, got {other:?}"
            ))),
        }
    }

    fn as_str(&self) -> &str {
        match self {
            Self::Fallback => "fallback",
            Self::Service(url) => url,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub m: usize,
    pub tau: f64,
    pub max_tokens: usize,
    pub seed: u64,
    pub backend: BackendChoice,
    pub concurrency: usize,
    pub image_store: Option<PathBuf>,
    pub description_store: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// Only `hash` is supported in-process.
    pub sentence_embedder: String,
    pub sentence_dim: usize,
    pub predictions: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
    pub image_list: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub stage2: bool,
    pub cider: CiderVariant,
    pub sigma: f64,
    pub fail_fast: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m: DEFAULT_M,
            tau: crate::clip_guidance::DEFAULT_TAU,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
            backend: BackendChoice::Fallback,
            concurrency: 4,
            image_store: None,
            description_store: None,
            catalog: None,
            sentence_embedder: "hash".into(),
            sentence_dim: DEFAULT_HASH_DIM,
            predictions: None,
            exclusions: None,
            image_list: None,
            output_dir: None,
            stage2: true,
            cider: CiderVariant::CiderD,
            sigma: DEFAULT_SIGMA,
            fail_fast: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, PipelineError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(PipelineError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Keys that do not influence output bytes and may change between a run and its resume.
const NON_DETERMINING_KEYS: [&str; 3] = ["concurrency", "fail_fast", "output_dir"];

impl PipelineConfig {
    /// Apply one `key = value` setting. `base` resolves relative paths.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), PipelineError> {
        let path = |v: &str| -> Option<PathBuf> {
            if v.is_empty() {
                return None;
            }
            let p = PathBuf::from(v);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        match key {
            "k" => self.k = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "max_tokens" => self.max_tokens = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "backend" => self.backend = BackendChoice::parse(value)?,
            "concurrency" => self.concurrency = parse_num(key, value)?,
            "image_store" => self.image_store = path(value),
            "description_store" => self.description_store = path(value),
            "catalog" => self.catalog = path(value),
            "sentence_embedder" => self.sentence_embedder = value.to_owned(),
            "sentence_dim" => self.sentence_dim = parse_num(key, value)?,
            "predictions" => self.predictions = path(value),
            "exclusions" => self.exclusions = path(value),
            "image_list" => self.image_list = path(value),
            "output_dir" => self.output_dir = path(value),
            "stage2" => self.stage2 = parse_bool(key, value)?,
            "cider" => {
                self.cider = match value {
                    "cider-d" => CiderVariant::CiderD,
                    "plain" => CiderVariant::Plain,
                    _ => {
                        return Err(PipelineError::Config(format!(
                            "cider must be `cider-d` or `plain`, got {value:?}"
                        )))
                    }
                }
            }
            "sigma" => self.sigma = parse_num(key, value)?,
            "fail_fast" => self.fail_fast = parse_bool(key, value)?,
            other => return Err(PipelineError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(&mut self, text: &str, base: Option<&Path>) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            self.set(key.trim(), value.trim(), base)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.parse_str(&text, path.parent())?;
        Ok(cfg)
    }

    /// Apply `RAPSG_BACKEND_URL` if set and non-empty.
    pub fn apply_env(&mut self) -> Result<(), PipelineError> {
        if let Ok(url) = std::env::var(BACKEND_ENV) {
            if !url.trim().is_empty() {
                self.backend = BackendChoice::parse(url.trim())?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        validate_k_m(self.k, self.m).map_err(|e| PipelineError::Config(format!("k = {}, m = {}: {e}", self.k, self.m)))?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PipelineError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_tokens == 0 {
            return Err(PipelineError::Config("max_tokens must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(PipelineError::Config("concurrency must be positive".into()));
        }
        if self.sentence_embedder != "hash" {
            return Err(PipelineError::Config(format!(
                "sentence_embedder {:?} is not available in-process (only `hash`)",
                self.sentence_embedder
            )));
        }
        if self.sentence_dim == 0 {
            return Err(PipelineError::Config("sentence_dim must be positive".into()));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(PipelineError::Config("sigma must be positive".into()));
        }
        for (name, p) in [
            ("image_store", &self.image_store),
            ("description_store", &self.description_store),
            ("catalog", &self.catalog),
            ("output_dir", &self.output_dir),
        ] {
            if p.is_none() {
                return Err(PipelineError::Config(format!("{name} is required")));
            }
        }
        if self.stage2 {
            match &self.predictions {
                None => {
                    return Err(PipelineError::Config(
                        "stage2 is enabled but no predictions file is configured".into(),
                    ))
                }
                Some(p) if !p.is_file() => {
                    return Err(PipelineError::Config(format!(
                        "predictions file {} does not exist",
                        p.display()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn cider_params(&self) -> CiderParams {
        CiderParams {
            variant: self.cider,
            sigma: self.sigma,
        }
    }

    /// Every setting as strings, sorted by key.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        put("k", self.k.to_string());
        put("m", self.m.to_string());
        put("tau", self.tau.to_string());
        put("max_tokens", self.max_tokens.to_string());
        put("seed", self.seed.to_string());
        put("backend", self.backend.as_str().to_owned());
        put("concurrency", self.concurrency.to_string());
        put("image_store", path_string(&self.image_store));
        put("description_store", path_string(&self.description_store));
        put("catalog", path_string(&self.catalog));
        put("sentence_embedder", self.sentence_embedder.clone());
        put("sentence_dim", self.sentence_dim.to_string());
        put("predictions", path_string(&self.predictions));
        put("exclusions", path_string(&self.exclusions));
        put("image_list", path_string(&self.image_list));
        put("output_dir", path_string(&self.output_dir));
        put("stage2", self.stage2.to_string());
        put(
            "cider",
            match self.cider {
                CiderVariant::CiderD => "cider-d",
                CiderVariant::Plain => "plain",
            }
            .to_owned(),
        );
        put("sigma", self.sigma.to_string());
        put("fail_fast", self.fail_fast.to_string());
        m
    }

    /// Settings left out of [`Self::digest`].
    pub fn is_non_determining(&self, key: &str) -> bool {
        NON_DETERMINING_KEYS.contains(&key)
    }

    /// SHA-256 over the output-determining settings.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.snapshot() {
            if NON_DETERMINING_KEYS.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.k, c.m, c.max_tokens, c.concurrency), (16, 4, 20, 4));
        assert_eq!(c.tau, 0.07);
    }

    #[test]
    fn parses_file_syntax() {
        let mut c = PipelineConfig::default();
        c.parse_str(
            "# comment\nk = 8\nm=4 # trailing\n\nbackend = http://localhost:8080\ncatalog = data/cat.jsonl\n",
            Some(Path::new("/base")),
        )
        .unwrap();
        assert_eq!(c.k, 8);
        assert_eq!(c.backend, BackendChoice::Service("http://localhost:8080".into()));
        assert_eq!(c.catalog, Some(PathBuf::from("/base/data/cat.jsonl")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = PipelineConfig::default();
        assert!(c.parse_str("frobnicate = 1", None).is_err());
        assert!(c.parse_str("k = many", None).is_err());
        assert!(c.parse_str("just text", None).is_err());
        assert!(c.set("backend", "ftp://x", None).is_err());
    }

    #[test]
    fn validates_divisibility_and_tau() {
        let mut c = PipelineConfig {
            image_store: Some("i".into()),
            description_store: Some("d".into()),
            catalog: Some("c".into()),
            output_dir: Some("o".into()),
            stage2: false,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.k = 10;
        assert!(c.validate().is_err());
        c.k = 16;
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c.tau = 0.07;
        c.stage2 = true;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("predictions"));
    }

    #[test]
    fn digest_ignores_concurrency_only() {
        let a = PipelineConfig::default();
        let b = PipelineConfig {
            concurrency: 16,
            ..Default::default()
        };
        let c = PipelineConfig {
            k: 8,
            ..Default::default()
        };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
