//! Run configuration: model, training and data paths in one JSON document.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::FinetuneConfig;
use crate::textnorm::Vocabulary;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One token per line; required unless `model.vocab_size` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trad_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub finetune: FinetuneConfig,
}

/// One problem, located by its key path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigIssue {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn parse(src: &str) -> Result<Self> {
        serde_json::from_str(src)
            .map_err(|e| Error::Config(vec![ConfigIssue::new("", e.to_string())]))
    }

    /// Rewrites relative paths against `base`.
    pub fn with_base_dir(mut self, base: &Path) -> Self {
        self.data.vocab = self.data.vocab.map(|p| resolve(base, &p));
        self.data.trad_map = self.data.trad_map.map(|p| resolve(base, &p));
        for s in &mut self.train.sources {
            s.path = s.path.as_ref().map(|p| resolve(base, p));
        }
        self
    }

    /// Every problem across sections. Files named in the config must exist;
    /// the vocabulary is read to check or fill `model.vocab_size`.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut model = self.model.clone();
        match &self.data.vocab {
            Some(p) => match Vocabulary::load(p) {
                Ok(v) if model.vocab_size == 0 => model.vocab_size = v.len(),
                Ok(v) if model.vocab_size != v.len() => out.push(ConfigIssue::new(
                    "model.vocab_size",
                    format!(
                        "{} but {} has {} entries",
                        model.vocab_size,
                        p.display(),
                        v.len()
                    ),
                )),
                Ok(_) => {}
                Err(e) => out.push(ConfigIssue::new("data.vocab", e.to_string())),
            },
            None if model.vocab_size == 0 => {
                out.push(ConfigIssue::new(
                    "model.vocab_size",
                    "unset and no data.vocab given",
                ));
                model.vocab_size = 5;
            }
            None => {}
        }
        if let Some(p) = &self.data.trad_map {
            if !p.exists() {
                out.push(ConfigIssue::new(
                    "data.trad_map",
                    format!("{} not found", p.display()),
                ));
            }
        }
        out.extend(
            model
                .problems()
                .into_iter()
                .map(|(k, m)| ConfigIssue::new(format!("model.{k}"), m)),
        );
        out.extend(
            self.train
                .problems()
                .into_iter()
                .map(|(k, m)| ConfigIssue::new(format!("train.{k}"), m)),
        );
        for (i, s) in self.train.sources.iter().enumerate() {
            match &s.path {
                Some(p) if !p.exists() => out.push(ConfigIssue::new(
                    format!("train.sources[{i}].path"),
                    format!("{} not found", p.display()),
                )),
                _ => {}
            }
        }
        let f = &self.finetune;
        if f.epochs == 0 {
            out.push(ConfigIssue::new("finetune.epochs", "must be positive"));
        }
        if f.batch_size == 0 {
            out.push(ConfigIssue::new("finetune.batch_size", "must be positive"));
        }
        if !(f.lr >= 0.0) {
            out.push(ConfigIssue::new("finetune.lr", "must be nonnegative"));
        }
        out
    }

    /// Config with derived defaults filled in.
    pub fn normalized(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.model.vocab_size == 0 {
            if let Some(p) = &c.data.vocab {
                c.model.vocab_size = Vocabulary::load(p)?.len();
            }
        }
        c.model = c.model.normalized();
        c.train = c.train.normalized();
        Ok(c)
    }

    /// Normalized config, or every issue at once.
    pub fn validated(&self) -> Result<Self> {
        let issues = self.issues();
        if issues.is_empty() {
            self.normalized()
        } else {
            Err(Error::Config(issues))
        }
    }
}

/// Reads, checks and normalizes a config file. Relative paths are taken
/// from the file's directory.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    RunConfig::parse(&src)?.with_base_dir(base).validated()
}
