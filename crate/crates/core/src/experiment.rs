//! Run manifests, corpus loading and the ablation driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{read_corpus, read_dialogues};
use crate::config::{ConfigIssue, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{cloze_gold_loss, evaluate, finetune, ClozeItem, TaskData, TaskSpec};
use crate::masking::Stage;
use crate::textnorm::Tokenizer;
use crate::train::{SourceData, SourceKind, StageSchedule, TrainConfig, Trainer};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Written into a run directory before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    /// Digests every input file named in `config`.
    pub fn new(config: &RunConfig, artifacts: Vec<PathBuf>) -> Result<Self> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        paths.extend(config.data.vocab.iter());
        paths.extend(config.data.trad_map.iter());
        paths.extend(config.train.sources.iter().filter_map(|s| s.path.as_ref()));
        let inputs = paths
            .into_iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            seed: config.train.seed,
            config: config.clone(),
            inputs,
            artifacts,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&p, body + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let src = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&src).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    }

    /// Errors if any input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = file_digest(&f.path)?;
            if now != f.sha256 {
                return Err(Error::Data(format!(
                    "{} changed since the run started (sha256 {} -> {now})",
                    f.path.display(),
                    f.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Tokenizer from `data.vocab` and the optional traditional map.
pub fn load_tokenizer(config: &RunConfig) -> Result<Tokenizer> {
    let vocab = config
        .data
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Config(vec![ConfigIssue::new("data.vocab", "required")]))?;
    Ok(Tokenizer::load(vocab, config.data.trad_map.as_deref())?)
}

/// Reads every configured source from its path.
pub fn load_sources(train: &TrainConfig, tokenizer: &Tokenizer) -> Result<Vec<SourceData>> {
    let mut out = Vec::with_capacity(train.sources.len());
    for (i, s) in train.sources.iter().enumerate() {
        let path = s.path.as_ref().ok_or_else(|| {
            Error::Config(vec![ConfigIssue::new(
                format!("train.sources[{i}].path"),
                "required",
            )])
        })?;
        let data = match s.kind {
            SourceKind::Sentences => {
                SourceData::Sentences(read_corpus(path, tokenizer)?.collect::<Result<_, _>>()?)
            }
            SourceKind::Dialogue => {
                SourceData::Dialogue(read_dialogues(path, tokenizer)?.collect::<Result<_, _>>()?)
            }
        };
        out.push(data);
    }
    Ok(out)
}

/// Overrides applied to the base config for one ablation row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Sequential phases of equal length.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Stage>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StageSchedule>,
    /// Source name → weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_weights: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dlm_ratio: Option<f64>,
}

impl Variant {
    pub fn apply(
        &self,
        base: &RunConfig,
        index: usize,
    ) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
        let at = |k: &str| format!("variants[{index}].{k}");
        let mut issues = Vec::new();
        let mut c = base.clone();
        if self.name.is_empty() {
            issues.push(ConfigIssue::new(at("name"), "empty"));
        }
        match (&self.stages, &self.schedule) {
            (Some(_), Some(_)) => issues.push(ConfigIssue::new(
                at("stages"),
                "give stages or schedule, not both",
            )),
            (Some(s), None) if s.is_empty() => issues.push(ConfigIssue::new(at("stages"), "empty")),
            (Some(s), None) => c.train.schedule = StageSchedule::sequential(s),
            (None, Some(s)) => c.train.schedule = s.clone(),
            (None, None) => {}
        }
        if let Some(w) = &self.source_weights {
            for (name, weight) in w {
                match c.train.sources.iter_mut().find(|s| &s.name == name) {
                    Some(s) => s.weight = *weight,
                    None => issues.push(ConfigIssue::new(
                        at(&format!("source_weights.{name}")),
                        "no such source",
                    )),
                }
            }
        }
        if self.dlm_ratio.is_some() {
            c.train.dlm_ratio = self.dlm_ratio;
        }
        for (k, m) in c.model.problems() {
            issues.push(ConfigIssue::new(at(&format!("model.{k}")), m));
        }
        for (k, m) in c.train.problems() {
            issues.push(ConfigIssue::new(at(&format!("train.{k}")), m));
        }
        if issues.is_empty() {
            c.train = c.train.normalized();
            c.model = c.model.normalized();
            Ok(c)
        } else {
            Err(issues)
        }
    }
}

/// In-memory inputs shared by every ablation row.
#[derive(Debug, Clone)]
pub struct AblationInputs {
    pub sources: Vec<SourceData>,
    pub task: TaskSpec,
    pub train: TaskData,
    pub dev: TaskData,
    pub test: Option<TaskData>,
    /// Held-out cloze items; their gold loss is reported per row.
    pub cloze: Vec<ClozeItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub strategy: String,
    pub corpus_mix: String,
    pub dlm_ratio: f64,
    /// Mean MLM loss over the last tenth of pretraining.
    pub pretrain_loss: f64,
    pub cloze_loss: Option<f64>,
    pub dev_metric: f64,
    pub test_metric: Option<f64>,
}

pub const ABLATION_HEADER: &str =
    "variant,strategy,corpus_mix,dlm_ratio,pretrain_loss,cloze_loss,dev_metric,test_metric";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            csv_field(&self.variant),
            csv_field(&self.strategy),
            csv_field(&self.corpus_mix),
            self.dlm_ratio,
            self.pretrain_loss,
            opt(self.cloze_loss),
            self.dev_metric,
            opt(self.test_metric)
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn percent(x: f64) -> String {
    let s = format!("{:.1}", x * 100.0);
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// `a(71.2%)/b(13%)` over sources with nonzero weight.
pub fn corpus_mix(train: &TrainConfig) -> String {
    let total: f64 = train.sources.iter().map(|s| s.weight).sum();
    train
        .sources
        .iter()
        .filter(|s| s.weight > 0.0)
        .map(|s| format!("{}({}%)", s.name, percent(s.weight / total)))
        .collect::<Vec<_>>()
        .join("/")
}

/// Stage names joined with `&`, as scheduled.
pub fn strategy(schedule: &StageSchedule) -> String {
    let names: Vec<&str> = schedule.stages().iter().map(|s| s.name()).collect();
    match schedule {
        StageSchedule::Sequential { .. } => names.join("&"),
        StageSchedule::Mixed { .. } => format!("mixed({})", names.join("&")),
    }
}

/// Pretrains and fine-tunes once per variant with the base seed. Every
/// variant is validated before any training starts.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    inputs: &AblationInputs,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config(vec![ConfigIssue::new(
            "variants",
            "no variants",
        )]));
    }
    let mut configs = Vec::with_capacity(variants.len());
    let mut issues = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        match v.apply(base, i) {
            Ok(c) => configs.push(c),
            Err(e) => issues.extend(e),
        }
    }
    if let Err(e) = inputs.task.validate() {
        issues.push(ConfigIssue::new("task", e.to_string()));
    }
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (v, cfg) in variants.iter().zip(configs) {
        log::info!(
            "ablation variant {}: pretraining {} steps",
            v.name,
            cfg.train.total_steps
        );
        let mut trainer =
            Trainer::new(cfg.model.clone(), cfg.train.clone(), inputs.sources.clone())?;
        let mut losses = Vec::new();
        trainer.run(cfg.train.total_steps, |_, r| {
            losses.push(r.mlm_loss as f64);
            Ok(())
        })?;
        let tail = &losses[losses.len() - (losses.len() / 10).max(1).min(losses.len())..];
        let pretrain_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;

        let cloze_loss = if inputs.cloze.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for item in &inputs.cloze {
                total += cloze_gold_loss(&trainer.encoder, item)?;
            }
            Some(total / inputs.cloze.len() as f64)
        };

        let mut encoder = trainer.encoder.clone();
        let report = finetune(
            &mut encoder,
            &inputs.task,
            &inputs.train,
            &inputs.dev,
            &cfg.finetune,
        )?;
        let test_metric = match &inputs.test {
            Some(t) => Some(evaluate(&encoder, &inputs.task, t)?.primary()),
            None => None,
        };
        rows.push(AblationRow {
            variant: v.name.clone(),
            strategy: strategy(&cfg.train.schedule),
            corpus_mix: corpus_mix(&cfg.train),
            dlm_ratio: cfg.train.effective_dlm_ratio(),
            pretrain_loss,
            cloze_loss,
            dev_metric: report.best,
            test_metric,
        });
    }
    Ok(rows)
}
