//! Pretraining loop: stage curriculum, MLM/DLM alternation, corpus mixing,
//! learning-rate schedule, metrics and checkpoints.
//!
//! Batch content and every random draw are functions of `(seed, step)`, so a
//! run resumed from a checkpoint retraces the uninterrupted trajectory.

mod checkpoint;
mod metrics;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use metrics::{MetricsWriter, StepRecord, METRICS_HEADER};

use crate::annotate::{AnnotatedSentence, DialogueThread};
use crate::dialogue::{
    build_dlm_example, DialogueError, DlmConfig, SentencePool, DEFAULT_FAKE_PROB,
};
use crate::encoder::{Batch, Encoder, EncoderError, ModelConfig};
use crate::masking::{
    build_mlm_example, MaskedExample, MaskingConfig, MaskingError, Stage, DEFAULT_MASK_RATIO,
    DEFAULT_REPLACE_PROBS,
};
use crate::rng::{derive_seed, substream, Rng, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mlm,
    Dlm,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mlm => "mlm",
            Task::Dlm => "dlm",
        })
    }
}

/// How masking stages are arranged over the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum StageSchedule {
    /// Consecutive phases; each stage gets its fraction of the steps.
    Sequential { stages: Vec<(Stage, f64)> },
    /// Each batch draws its stage from the weights.
    Mixed { weights: Vec<(Stage, f64)> },
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule::Sequential {
            stages: vec![
                (Stage::Basic, 1.0 / 3.0),
                (Stage::Phrase, 1.0 / 3.0),
                (Stage::Entity, 1.0 / 3.0),
            ],
        }
    }
}

impl StageSchedule {
    pub fn single(stage: Stage) -> Self {
        StageSchedule::Sequential {
            stages: vec![(stage, 1.0)],
        }
    }

    /// Equal sequential phases over `stages`.
    pub fn sequential(stages: &[Stage]) -> Self {
        let f = 1.0 / stages.len() as f64;
        StageSchedule::Sequential {
            stages: stages.iter().map(|&s| (s, f)).collect(),
        }
    }

    pub fn stages(&self) -> Vec<Stage> {
        match self {
            StageSchedule::Sequential { stages } | StageSchedule::Mixed { weights: stages } => {
                stages.iter().map(|(s, _)| *s).collect()
            }
        }
    }

    /// First step of each sequential phase after the first.
    pub fn boundaries(&self, total_steps: u64) -> Vec<u64> {
        match self {
            StageSchedule::Sequential { stages } => {
                let mut cum = 0.0;
                stages[..stages.len().saturating_sub(1)]
                    .iter()
                    .map(|(_, f)| {
                        cum += f;
                        (cum * total_steps as f64 + 1e-9).floor() as u64
                    })
                    .collect()
            }
            StageSchedule::Mixed { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Sentences,
    Dialogue,
}

/// One corpus in the mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub schedule: StageSchedule,
    /// Fraction of DLM batches; `None` means the dialogue share of the
    /// source weights.
    pub dlm_ratio: Option<f64>,
    pub fake_prob: f64,
    pub mask_ratio: f64,
    pub replace_probs: [f64; 3],
    pub sources: Vec<SourceSpec>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Scan values and gradients for NaN/Inf.
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1000,
            batch_size: 16,
            schedule: StageSchedule::default(),
            dlm_ratio: None,
            fake_prob: DEFAULT_FAKE_PROB,
            mask_ratio: DEFAULT_MASK_RATIO,
            replace_probs: DEFAULT_REPLACE_PROBS,
            sources: Vec::new(),
            seed: 0,
            adam: AdamConfig::default(),
            warmup_frac: 0.1,
            checkpoint_every: 0,
            checked: true,
        }
    }
}

fn weighted_pick(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// What one step trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub task: Task,
    pub stage: Stage,
    pub source: usize,
}

impl TrainConfig {
    pub fn effective_dlm_ratio(&self) -> f64 {
        self.dlm_ratio.unwrap_or_else(|| {
            let total: f64 = self.sources.iter().map(|s| s.weight).sum();
            let dialogue: f64 = self
                .sources
                .iter()
                .filter(|s| s.kind == SourceKind::Dialogue)
                .map(|s| s.weight)
                .sum();
            if total > 0.0 {
                dialogue / total
            } else {
                0.0
            }
        })
    }

    /// Fills derived defaults.
    pub fn normalized(&self) -> Self {
        TrainConfig {
            dlm_ratio: Some(self.effective_dlm_ratio()),
            ..self.clone()
        }
    }

    pub fn masking(&self, max_len: usize) -> MaskingConfig {
        MaskingConfig {
            mask_ratio: self.mask_ratio,
            replace_probs: self.replace_probs,
            max_len,
        }
    }

    pub fn dlm(&self, max_len: usize) -> DlmConfig {
        DlmConfig {
            mask_ratio: self.mask_ratio,
            replace_probs: self.replace_probs,
            max_len,
            fake_prob: self.fake_prob,
        }
    }

    /// Every violated constraint, as `(key, message)`.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        if self.total_steps == 0 {
            bad("total_steps", "must be positive".into());
        }
        if self.batch_size == 0 {
            bad("batch_size", "must be positive".into());
        }
        match &self.schedule {
            StageSchedule::Sequential { stages } => {
                if stages.is_empty() {
                    bad("schedule.stages", "no stages".into());
                }
                if stages.iter().any(|(_, f)| !(*f > 0.0)) {
                    bad("schedule.stages", "fractions must be positive".into());
                }
                let sum: f64 = stages.iter().map(|(_, f)| f).sum();
                if !stages.is_empty() && (sum - 1.0).abs() > 1e-6 {
                    bad("schedule.stages", format!("fractions sum to {sum}, not 1"));
                }
                if self.total_steps > 0 && !stages.is_empty() {
                    let mut edges = vec![0];
                    edges.extend(self.schedule.boundaries(self.total_steps));
                    edges.push(self.total_steps);
                    if edges.windows(2).any(|w| w[1] <= w[0]) {
                        bad(
                            "schedule.stages",
                            format!("a stage gets no steps out of {}", self.total_steps),
                        );
                    }
                }
            }
            StageSchedule::Mixed { weights } => {
                if weights.iter().any(|(_, w)| !(*w >= 0.0)) {
                    bad("schedule.weights", "weights must be nonnegative".into());
                }
                if !(weights.iter().map(|(_, w)| w).sum::<f64>() > 0.0) {
                    bad("schedule.weights", "weights are all zero".into());
                }
            }
        }
        if let Some(r) = self.dlm_ratio {
            if !(0.0..=1.0).contains(&r) {
                bad("dlm_ratio", format!("dlm_ratio {r} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.fake_prob) {
            bad(
                "fake_prob",
                format!("fake_prob {} outside [0, 1]", self.fake_prob),
            );
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            bad(
                "mask_ratio",
                format!("mask_ratio {} outside (0, 1)", self.mask_ratio),
            );
        }
        let p = self.replace_probs;
        if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bad(
                "replace_probs",
                format!("{p:?} must be nonnegative and sum to 1"),
            );
        }
        if self.sources.is_empty() {
            bad("sources", "no corpus sources".into());
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !(s.weight >= 0.0) {
                bad(
                    &format!("sources[{i}].weight"),
                    format!("weight {} is negative", s.weight),
                );
            }
        }
        if !self.sources.is_empty() && !(self.sources.iter().map(|s| s.weight).sum::<f64>() > 0.0) {
            bad("sources", "weights are all zero".into());
        }
        let mut seen = HashMap::new();
        for (i, s) in self.sources.iter().enumerate() {
            if let Some(j) = seen.insert(s.name.as_str(), i) {
                bad(
                    &format!("sources[{i}].name"),
                    format!("duplicate of sources[{j}]"),
                );
            }
        }
        let ratio = self.effective_dlm_ratio();
        let dialogue_weight: f64 = self
            .sources
            .iter()
            .filter(|s| s.kind == SourceKind::Dialogue)
            .map(|s| s.weight)
            .sum();
        if ratio > 0.0 && !(dialogue_weight > 0.0) {
            bad(
                "dlm_ratio",
                format!("dlm_ratio {ratio} but no weighted dialogue source"),
            );
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            bad(
                "warmup_frac",
                format!("warmup_frac {} outside [0, 1)", self.warmup_frac),
            );
        }
        let a = &self.adam;
        if !(a.lr >= 0.0) {
            bad("adam.lr", "must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            bad("adam", "betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            bad("adam.eps", "must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(
                p.into_iter().map(|(k, m)| format!("{k}: {m}")).collect(),
            ))
        }
    }

    /// Linear warmup over `warmup_frac` of the steps, then linear decay.
    pub fn lr_at(&self, step: u64) -> f32 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_frac * total).floor();
        let s = step as f64;
        let f = if s < warm {
            (s + 1.0) / warm
        } else {
            (total - s) / (total - warm)
        };
        (self.adam.lr as f64 * f.clamp(0.0, 1.0)) as f32
    }
}

/// Task, stage and source for `step`; a pure function of the config.
pub fn schedule_batches(cfg: &TrainConfig, step: u64) -> Result<BatchPlan, TrainError> {
    if step >= cfg.total_steps {
        return Err(TrainError::Config(vec![format!(
            "step {step} is past total_steps {}",
            cfg.total_steps
        )]));
    }
    let mut rng = substream(cfg.seed, Stream::Schedule, step);
    let ratio = cfg.effective_dlm_ratio();
    let draw = rng.random::<f64>();
    let has_dialogue = cfg
        .sources
        .iter()
        .any(|s| s.kind == SourceKind::Dialogue && s.weight > 0.0);
    let task = if has_dialogue && draw < ratio {
        Task::Dlm
    } else {
        Task::Mlm
    };

    let stage = match &cfg.schedule {
        StageSchedule::Sequential { stages } => {
            let edges = cfg.schedule.boundaries(cfg.total_steps);
            let k = edges.iter().take_while(|&&b| step >= b).count();
            stages[k.min(stages.len() - 1)].0
        }
        StageSchedule::Mixed { weights } => {
            let w: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
            weights[weighted_pick(&w, &mut rng)].0
        }
    };

    let weights: Vec<f64> = cfg
        .sources
        .iter()
        .map(|s| match task {
            Task::Dlm if s.kind != SourceKind::Dialogue => 0.0,
            _ => s.weight,
        })
        .collect();
    let source = weighted_pick(&weights, &mut rng);
    Ok(BatchPlan {
        task,
        stage,
        source,
    })
}

/// Corpus content of one source.
#[derive(Debug, Clone)]
pub enum SourceData {
    Sentences(Vec<AnnotatedSentence>),
    Dialogue(Vec<DialogueThread>),
}

struct LoadedSource {
    sentences: Vec<AnnotatedSentence>,
    threads: Vec<DialogueThread>,
    pool: Option<SentencePool>,
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mlm_loss: f32,
    pub dlm_cls_loss: Option<f32>,
}

/// A built batch ready for the encoder.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub task: Task,
    pub stage: Stage,
    pub examples: Vec<MaskedExample>,
    /// Real/fake labels for DLM batches.
    pub is_real: Option<Vec<bool>>,
}

impl PreparedBatch {
    pub fn masked_positions(&self) -> usize {
        self.examples.iter().map(|e| e.mask_positions.len()).sum()
    }
}

/// MLM loss over masked positions and, for DLM batches, the real/fake loss.
/// Returns the graph's loss variables: `(total, mlm, cls)`.
pub fn batch_losses<'p>(
    encoder: &'p Encoder,
    g: &mut Graph<'p>,
    batch: &PreparedBatch,
    dropout: Option<&mut Rng>,
) -> Result<
    (
        crate::tensor::Var,
        crate::tensor::Var,
        Option<crate::tensor::Var>,
    ),
    TrainError,
> {
    let enc_batch = Batch::from_examples(&batch.examples);
    let h = encoder.forward(g, &enc_batch, dropout)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, e) in batch.examples.iter().enumerate() {
        for (&p, &label) in e.mask_positions.iter().zip(&e.labels) {
            rows.push(b * enc_batch.len + p);
            targets.push(label as i64);
        }
    }
    let hm = g.gather_rows(h, &rows)?;
    let logits = encoder.mlm_logits(g, hm)?;
    let mlm = g.cross_entropy(logits, &targets, -1)?;
    match &batch.is_real {
        None => Ok((mlm, mlm, None)),
        Some(real) => {
            let hc = g.gather_rows(h, &enc_batch.cls_rows())?;
            let rl = encoder.dlm_real_logits(g, hc)?;
            let labels: Vec<i64> = real.iter().map(|&r| r as i64).collect();
            let cls = g.cross_entropy(rl, &labels, -1)?;
            Ok((g.add(mlm, cls)?, mlm, Some(cls)))
        }
    }
}

/// Owns the model, optimizer state and corpus for one pretraining run.
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub adam: AdamState,
    pub step: u64,
    pub skipped_batches: u64,
    sources: Vec<LoadedSource>,
    perm_cache: HashMap<(usize, Task, u64), Vec<usize>>,
}

impl Trainer {
    /// Fresh model initialized from the run seed.
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        data: Vec<SourceData>,
    ) -> Result<Self, TrainError> {
        let mut rng = substream(config.seed, Stream::Init, 0);
        let encoder = Encoder::new(model, &mut rng)?;
        let adam = AdamState::new(&encoder.params);
        Self::assemble(config, encoder, adam, 0, 0, data)
    }

    /// Continues from a checkpoint. The model config comes from the checkpoint
    /// and must equal `model` when one is given.
    pub fn resume(
        checkpoint: Checkpoint,
        model: Option<&ModelConfig>,
        config: TrainConfig,
        data: Vec<SourceData>,
    ) -> Result<Self, TrainError> {
        if let Some(m) = model {
            checkpoint.check_config(m)?;
        }
        if checkpoint.header.seed != config.seed {
            return Err(TrainError::Config(vec![format!(
                "seed: checkpoint was trained with seed {}, config has {}",
                checkpoint.header.seed, config.seed
            )]));
        }
        let h = checkpoint.header;
        let encoder = Encoder::from_params(h.model, checkpoint.params)?;
        Self::assemble(
            config,
            encoder,
            checkpoint.adam,
            h.step,
            h.skipped_batches,
            data,
        )
    }

    fn assemble(
        config: TrainConfig,
        encoder: Encoder,
        adam: AdamState,
        step: u64,
        skipped_batches: u64,
        data: Vec<SourceData>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if data.len() != config.sources.len() {
            return Err(TrainError::Data(format!(
                "{} corpora supplied for {} configured sources",
                data.len(),
                config.sources.len()
            )));
        }
        let mut sources = Vec::with_capacity(data.len());
        for (spec, d) in config.sources.iter().zip(data) {
            let loaded = match (spec.kind, d) {
                (SourceKind::Sentences, SourceData::Sentences(s)) => LoadedSource {
                    sentences: s,
                    threads: Vec::new(),
                    pool: None,
                },
                (SourceKind::Dialogue, SourceData::Dialogue(t)) => {
                    let pool = SentencePool::from_threads(&t);
                    LoadedSource {
                        sentences: t
                            .iter()
                            .flat_map(|th| th.turns.iter().map(|(_, s)| s.clone()))
                            .collect(),
                        threads: t,
                        pool: Some(pool),
                    }
                }
                (kind, _) => {
                    return Err(TrainError::Data(format!(
                        "source {}: data does not match kind {kind:?}",
                        spec.name
                    )))
                }
            };
            if spec.weight > 0.0 && loaded.sentences.is_empty() {
                return Err(TrainError::Data(format!("source {} is empty", spec.name)));
            }
            sources.push(loaded);
        }
        Ok(Trainer {
            config,
            encoder,
            adam,
            step,
            skipped_batches,
            sources,
            perm_cache: HashMap::new(),
        })
    }

    fn item_index(&mut self, source: usize, task: Task, n: usize, position: u64) -> usize {
        let epoch = position / n as u64;
        let offset = (position % n as u64) as usize;
        let seed = self.config.seed;
        if self.perm_cache.len() > 64 {
            self.perm_cache.clear();
        }
        let perm = self
            .perm_cache
            .entry((source, task, epoch))
            .or_insert_with(|| {
                let key = derive_seed(
                    source as u64 * 2 + (task == Task::Dlm) as u64,
                    Stream::Batch,
                    epoch,
                );
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut substream(seed, Stream::Batch, key));
                p
            });
        perm[offset]
    }

    /// Builds the batch for `step` without training on it.
    pub fn prepare(&mut self, step: u64) -> Result<PreparedBatch, TrainError> {
        let plan = schedule_batches(&self.config, step)?;
        let b = self.config.batch_size;
        let vocab = self.encoder.config.vocab_size;
        let max_len = self.encoder.config.max_len;
        let mut examples = Vec::with_capacity(b);
        let mut real = Vec::new();
        for i in 0..b {
            let position = step * b as u64 + i as u64;
            match plan.task {
                Task::Mlm => {
                    let n = self.sources[plan.source].sentences.len();
                    let idx = self.item_index(plan.source, plan.task, n, position);
                    let s = &self.sources[plan.source].sentences[idx];
                    let mut rng = substream(self.config.seed, Stream::Masking, position);
                    examples.push(build_mlm_example(
                        s,
                        None,
                        plan.stage,
                        &self.config.masking(max_len),
                        vocab,
                        &mut rng,
                    )?);
                }
                Task::Dlm => {
                    let n = self.sources[plan.source].threads.len();
                    if n == 0 {
                        return Err(TrainError::Data(format!(
                            "dialogue source {} has no threads",
                            self.config.sources[plan.source].name
                        )));
                    }
                    let idx = self.item_index(plan.source, plan.task, n, position);
                    let src = &self.sources[plan.source];
                    let pool = src.pool.as_ref().expect("dialogue source has a pool");
                    let mut rng = substream(self.config.seed, Stream::Dialogue, position);
                    let ex = build_dlm_example(
                        &src.threads[idx],
                        pool,
                        &self.config.dlm(max_len),
                        vocab,
                        &mut rng,
                    )?;
                    real.push(ex.is_real);
                    examples.push(ex.example);
                }
            }
        }
        Ok(PreparedBatch {
            task: plan.task,
            stage: plan.stage,
            examples,
            is_real: (plan.task == Task::Dlm).then_some(real),
        })
    }

    /// Forward, backward and one Adam update on `batch` at learning rate `lr`.
    pub fn train_step(
        &mut self,
        batch: &PreparedBatch,
        lr: f32,
        dropout_key: u64,
    ) -> Result<StepLosses, TrainError> {
        let mut drop_rng = substream(self.config.seed, Stream::Dropout, dropout_key);
        let (losses, grads) = {
            let mut g = Graph::new().checked(self.config.checked);
            let (total, mlm, cls) =
                batch_losses(&self.encoder, &mut g, batch, Some(&mut drop_rng))?;
            let losses = StepLosses {
                mlm_loss: g.value(mlm)[0],
                dlm_cls_loss: cls.map(|c| g.value(c)[0]),
            };
            if !g.value(total)[0].is_finite() {
                return Err(TrainError::NonFiniteLoss { step: self.step });
            }
            (losses, g.backward(total)?)
        };
        self.encoder.params.zero_grads();
        self.encoder.params.accumulate(&grads);
        adam_step(
            &mut self.encoder.params,
            &mut self.adam,
            &self.config.adam,
            lr,
            self.config.checked,
        )?;
        Ok(losses)
    }

    /// Runs the next scheduled step. `None` when the batch had no masked
    /// positions and was skipped.
    pub fn step_once(&mut self) -> Result<Option<StepRecord>, TrainError> {
        let step = self.step;
        let batch = self.prepare(step)?;
        let lr = self.config.lr_at(step);
        self.step += 1;
        if batch.masked_positions() == 0 {
            self.skipped_batches += 1;
            log::warn!(
                "step {step}: batch has no masked positions, skipped ({} so far)",
                self.skipped_batches
            );
            return Ok(None);
        }
        let losses = self.train_step(&batch, lr, step)?;
        Ok(Some(StepRecord {
            step,
            task: batch.task,
            stage: batch.stage,
            mlm_loss: losses.mlm_loss,
            dlm_cls_loss: losses.dlm_cls_loss,
            lr,
        }))
    }

    /// Steps until `until` (capped at `total_steps`), passing each record to `sink`.
    pub fn run<F>(&mut self, until: u64, mut sink: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<(), TrainError>,
    {
        let until = until.min(self.config.total_steps);
        while self.step < until {
            if let Some(rec) = self.step_once()? {
                sink(self, &rec)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                model: self.encoder.config.clone(),
                step: self.step,
                seed: self.config.seed,
                skipped_batches: self.skipped_batches,
                adam_t: self.adam.t,
            },
            params: self.encoder.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Trains into `dir`: appends to `metrics.csv`, writes
    /// `ckpt-<step>.kmck` every `checkpoint_every` steps and `last.kmck` when
    /// stopping. Stops at `stop_at` if given, else at `total_steps`.
    pub fn run_to_dir(&mut self, dir: &Path, stop_at: Option<u64>) -> Result<(), TrainError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| TrainError::Io { path: p, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut metrics = MetricsWriter::open(&dir.join("metrics.csv"), self.step)?;
        let every = self.config.checkpoint_every;
        self.run(stop_at.unwrap_or(u64::MAX), |t, rec| {
            metrics.write(rec)?;
            if every > 0 && t.step % every == 0 && t.step < t.config.total_steps {
                t.checkpoint()
                    .save(&dir.join(format!("ckpt-{:08}.kmck", t.step)))?;
            }
            Ok(())
        })?;
        metrics.flush()?;
        self.checkpoint().save(&dir.join("last.kmck"))?;
        Ok(())
    }
}
