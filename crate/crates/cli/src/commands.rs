use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kmask_core::annotate::{
    corpus_from_reader, dialogues_from_reader, dictionary_annotate, Lexicon,
};
use kmask_core::config::{validate_config, ConfigIssue};
use kmask_core::dialogue::{build_dlm_example, DlmConfig, SentencePool, DEFAULT_FAKE_PROB};
use kmask_core::encoder::Encoder;
use kmask_core::eval::{
    cloze_score, evaluate, finetune, read_cloze, FinetuneConfig, TaskData, TaskSpec,
};
use kmask_core::experiment::{
    ablation_csv, load_sources, load_tokenizer, run_ablation, AblationInputs, RunManifest, Variant,
};
use kmask_core::masking::{build_mlm_example, MaskingConfig, Stage, DEFAULT_MASK_RATIO};
use kmask_core::rng::{substream, Stream};
use kmask_core::textnorm::{build_vocab, normalize_bytes, TradMap};
use kmask_core::train::{Checkpoint, Trainer};
use kmask_core::{AnnotatedSentence, Error, Tokenizer};

use crate::io::{byte_lines, open, output, read_to_string};

#[derive(Debug, Parser)]
#[command(
    name = "kmask",
    version,
    about = "Knowledge-masking LM pretraining pipeline"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    pub fn log_level(&self) -> log::LevelFilter {
        match self.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Args)]
struct TokenizerArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocab: PathBuf,
    /// Traditional-to-simplified table (`from to` per line).
    #[arg(long)]
    trad_map: Option<PathBuf>,
}

impl TokenizerArgs {
    fn load(&self) -> Result<Tokenizer> {
        Ok(Tokenizer::load(&self.vocab, self.trad_map.as_deref()).map_err(Error::from)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Tag,
    Rank,
}

#[derive(Debug, Args)]
struct TaskArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Classes for `cls`.
    #[arg(long, default_value_t = 2)]
    n_classes: usize,
    /// Entity types for `tag`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    tag_types: Vec<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
}

impl TaskArgs {
    fn spec(&self) -> TaskSpec {
        match self.task {
            TaskArg::Cls => TaskSpec::classification(self.n_classes),
            TaskArg::Tag => TaskSpec::tagging(self.tag_types.clone()),
            TaskArg::Rank => TaskSpec::ranking(),
        }
    }

    fn read(&self, path: &Path, spec: &TaskSpec, tk: &Tokenizer) -> Result<TaskData> {
        TaskData::read(open(path)?, spec, tk)
            .map_err(Error::from)
            .with_context(|| format!("reading {}", path.display()))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Case-fold and map traditional characters, one line in, one line out.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        trad_map: Option<PathBuf>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Character vocabulary from plain-text lines, or from the `text` and
    /// `turns[].text` fields of `.jsonl` corpora.
    BuildVocab {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        trad_map: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long, default_value_t = 17_964)]
        max_size: usize,
        #[arg(long, visible_alias = "out")]
        output: PathBuf,
    },
    /// Adds dictionary phrase/entity spans to a sentence corpus.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        tok: TokenizerArgs,
        /// `surface<TAB>phrase|entity` per line.
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Masked examples for one stage, one JSON object per sentence.
    PlanMasks {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        tok: TokenizerArgs,
        #[arg(long, default_value = "basic")]
        stage: Stage,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
        #[arg(long, visible_alias = "ratio", default_value_t = DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Dialogue LM examples, one JSON object per thread.
    BuildDlm {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        tok: TokenizerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
        #[arg(long, default_value_t = DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long, default_value_t = DEFAULT_FAKE_PROB)]
        fake_prob: f64,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Pretrains into a run directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (checkpointing at the stop).
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Ranks cloze candidates with a checkpoint.
    Cloze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[command(flatten)]
        tok: TokenizerArgs,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Fine-tunes a checkpoint on a task and reports dev metrics per epoch.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        tok: TokenizerArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f32,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report path; stdout otherwise.
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
        /// Write the fine-tuned model here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Pretrain + fine-tune per variant; writes the comparison CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// JSON array of variants.
        #[arg(long)]
        variants: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Held-out cloze items whose gold loss is reported per row.
        #[arg(long)]
        cloze: Option<PathBuf>,
        #[arg(long, visible_alias = "out")]
        output: Option<PathBuf>,
    },
    /// Checks a config and prints it with defaults filled.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize {
            input,
            trad_map,
            output: out,
        } => normalize_cmd(&input, trad_map.as_deref(), out.as_deref()),
        Command::BuildVocab {
            input,
            trad_map,
            min_count,
            max_size,
            output: out,
        } => build_vocab_cmd(&input, trad_map.as_deref(), min_count, max_size, &out),
        Command::Annotate {
            input,
            tok,
            lexicon,
            output: out,
        } => annotate_cmd(&input, &tok, &lexicon, out.as_deref()),
        Command::PlanMasks {
            input,
            tok,
            stage,
            seed,
            max_len,
            mask_ratio,
            output: out,
        } => {
            let cfg = MaskingConfig {
                mask_ratio,
                max_len,
                ..Default::default()
            };
            plan_masks_cmd(&input, &tok, stage, seed, &cfg, out.as_deref())
        }
        Command::BuildDlm {
            input,
            tok,
            seed,
            max_len,
            mask_ratio,
            fake_prob,
            output: out,
        } => {
            let cfg = DlmConfig {
                mask_ratio,
                max_len,
                fake_prob,
                ..Default::default()
            };
            build_dlm_cmd(&input, &tok, seed, &cfg, out.as_deref())
        }
        Command::Pretrain {
            config,
            out_dir,
            resume,
            stop_at,
        } => pretrain_cmd(&config, &out_dir, resume.as_deref(), stop_at),
        Command::Cloze {
            ckpt,
            items,
            tok,
            output: out,
        } => cloze_cmd(&ckpt, &items, &tok, out.as_deref()),
        Command::Finetune {
            ckpt,
            tok,
            task,
            epochs,
            lr,
            batch_size,
            seed,
            output: out,
            save,
        } => {
            let cfg = FinetuneConfig {
                epochs,
                batch_size,
                lr,
                seed,
            };
            finetune_cmd(&ckpt, &tok, &task, &cfg, out.as_deref(), save.as_deref())
        }
        Command::Ablate {
            config,
            variants,
            task,
            cloze,
            output: out,
        } => ablate_cmd(&config, &variants, &task, cloze.as_deref(), out.as_deref()),
        Command::Validate { config } => {
            let cfg = validate_config(&config)?;
            let mut out = output(None)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&cfg)?)?;
            Ok(())
        }
    }
}

fn load_trad(path: Option<&Path>) -> Result<TradMap> {
    Ok(match path {
        Some(p) => TradMap::load(p).map_err(Error::from)?,
        None => TradMap::default(),
    })
}

fn normalize_cmd(input: &Path, trad: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let trad = load_trad(trad)?;
    let mut w = output(out)?;
    for (i, line) in byte_lines(open(input)?).enumerate() {
        let line = line.map_err(|e| Error::io(input, e))?;
        let n = normalize_bytes(&line, &trad)
            .map_err(Error::from)
            .with_context(|| format!("{} line {}", input.display(), i + 1))?;
        writeln!(w, "{}", n.text)?;
    }
    w.flush()?;
    Ok(())
}

fn build_vocab_cmd(
    inputs: &[PathBuf],
    trad: Option<&Path>,
    min_count: usize,
    max_size: usize,
    out: &Path,
) -> Result<()> {
    let trad = load_trad(trad)?;
    let mut texts = Vec::new();
    for input in inputs {
        let jsonl = input.extension().is_some_and(|e| e == "jsonl");
        for (i, line) in byte_lines(open(input)?).enumerate() {
            let line = line.map_err(|e| Error::io(input, e))?;
            let at = || format!("{} line {}", input.display(), i + 1);
            if !jsonl {
                texts.push(
                    normalize_bytes(&line, &trad)
                        .map_err(Error::from)
                        .with_context(at)?,
                );
                continue;
            }
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            for text in record_texts(&line).with_context(at)? {
                texts.push(
                    normalize_bytes(text.as_bytes(), &trad)
                        .map_err(Error::from)
                        .with_context(at)?,
                );
            }
        }
    }
    let vocab = build_vocab(&texts, min_count, max_size).map_err(Error::from)?;
    vocab.save(out).map_err(Error::from)?;
    log::info!("wrote {} entries to {}", vocab.len(), out.display());
    Ok(())
}

fn record_texts(line: &[u8]) -> Result<Vec<String>> {
    let bad = |m: &str| Error::Data(m.to_string());
    let v: serde_json::Value =
        serde_json::from_slice(line).map_err(|e| Error::Data(e.to_string()))?;
    if let Some(t) = v.get("text").and_then(|t| t.as_str()) {
        return Ok(vec![t.to_string()]);
    }
    let turns = v
        .get("turns")
        .and_then(|t| t.as_array())
        .ok_or_else(|| bad("expected a \"text\" or \"turns\" field"))?;
    Ok(turns
        .iter()
        .map(|t| {
            t.get("text")
                .and_then(|x| x.as_str())
                .map(str::to_string)
                .ok_or_else(|| bad("turn without \"text\""))
        })
        .collect::<std::result::Result<_, _>>()?)
}

fn annotate_cmd(
    input: &Path,
    tok: &TokenizerArgs,
    lexicon: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let tk = tok.load()?;
    let lex = Lexicon::load(lexicon, &tk).map_err(Error::from)?;
    let mut w = output(out)?;
    for s in corpus_from_reader(open(input)?, &tk) {
        let s = s
            .map_err(Error::from)
            .with_context(|| format!("reading {}", input.display()))?;
        let (p, e) = dictionary_annotate(&s.text, &s.tokens, &lex);
        let phrases = s.phrase_spans.iter().chain(&p).copied().collect();
        let entities = s.entity_spans.iter().chain(&e).copied().collect();
        let merged = AnnotatedSentence::from_token_spans(s.text, s.tokens, phrases, entities)
            .map_err(Error::from)?;
        writeln!(w, "{}", serde_json::to_string(&merged.to_record())?)?;
    }
    w.flush()?;
    Ok(())
}

fn plan_masks_cmd(
    input: &Path,
    tok: &TokenizerArgs,
    stage: Stage,
    seed: u64,
    cfg: &MaskingConfig,
    out: Option<&Path>,
) -> Result<()> {
    cfg.validate().map_err(Error::from)?;
    let tk = tok.load()?;
    let mut w = output(out)?;
    for (i, s) in corpus_from_reader(open(input)?, &tk).enumerate() {
        let s = s
            .map_err(Error::from)
            .with_context(|| format!("reading {}", input.display()))?;
        let mut rng = substream(seed, Stream::Masking, i as u64);
        let ex = build_mlm_example(&s, None, stage, cfg, tk.vocab.len(), &mut rng)
            .map_err(Error::from)?;
        writeln!(w, "{}", serde_json::to_string(&ex)?)?;
    }
    w.flush()?;
    Ok(())
}

fn build_dlm_cmd(
    input: &Path,
    tok: &TokenizerArgs,
    seed: u64,
    cfg: &DlmConfig,
    out: Option<&Path>,
) -> Result<()> {
    let tk = tok.load()?;
    let threads = dialogues_from_reader(open(input)?, &tk)
        .collect::<Result<Vec<_>, _>>()
        .map_err(Error::from)
        .with_context(|| format!("reading {}", input.display()))?;
    let pool = SentencePool::from_threads(&threads);
    let mut w = output(out)?;
    for (i, t) in threads.iter().enumerate() {
        let mut rng = substream(seed, Stream::Dialogue, i as u64);
        let ex = build_dlm_example(t, &pool, cfg, tk.vocab.len(), &mut rng).map_err(Error::from)?;
        writeln!(w, "{}", serde_json::to_string(&ex)?)?;
    }
    w.flush()?;
    Ok(())
}

fn pretrain_cmd(
    config: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<()> {
    let cfg = validate_config(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = RunManifest::new(&cfg, vec!["metrics.csv".into(), "last.kmck".into()])?;
    if resume.is_some() && out_dir.join(kmask_core::experiment::MANIFEST_FILE).exists() {
        let previous = RunManifest::load(out_dir)?;
        previous.verify_inputs()?;
        if previous.config != cfg {
            return Err(Error::Config(vec![ConfigIssue::new(
                "",
                "config differs from the run being resumed",
            )])
            .into());
        }
    } else {
        manifest.write(out_dir)?;
    }
    let tk = load_tokenizer(&cfg)?;
    let sources = load_sources(&cfg.train, &tk)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(Error::from)?;
            Trainer::resume(ck, Some(&cfg.model), cfg.train.clone(), sources)
                .map_err(Error::from)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), sources).map_err(Error::from)?,
    };
    log::info!(
        "pretraining {} parameters from step {}",
        trainer.encoder.num_parameters(),
        trainer.step
    );
    trainer.run_to_dir(out_dir, stop_at).map_err(Error::from)?;
    eprintln!(
        "trained to step {}/{} ({} skipped batches); checkpoint {}",
        trainer.step,
        cfg.train.total_steps,
        trainer.skipped_batches,
        out_dir.join("last.kmck").display()
    );
    Ok(())
}

fn load_encoder(ckpt: &Path, tk: &Tokenizer) -> Result<Encoder> {
    let ck = Checkpoint::load(ckpt).map_err(Error::from)?;
    if ck.header.model.vocab_size != tk.vocab.len() {
        return Err(Error::Config(vec![ConfigIssue::new(
            "vocab",
            format!(
                "checkpoint vocab_size {} but vocabulary has {} entries",
                ck.header.model.vocab_size,
                tk.vocab.len()
            ),
        )])
        .into());
    }
    Ok(Encoder::from_params(ck.header.model, ck.params).map_err(Error::from)?)
}

fn cloze_cmd(ckpt: &Path, items: &Path, tok: &TokenizerArgs, out: Option<&Path>) -> Result<()> {
    let tk = tok.load()?;
    let enc = load_encoder(ckpt, &tk)?;
    let items = read_cloze(open(items)?, &tk)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", items.display()))?;
    let mut w = output(out)?;
    writeln!(w, "item,rank,candidate,score,gold")?;
    let mut hits = 0;
    for (i, item) in items.iter().enumerate() {
        let ranked = cloze_score(&enc, item).map_err(Error::from)?;
        if ranked[0].index == item.gold {
            hits += 1;
        }
        for (r, c) in ranked.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                i,
                r + 1,
                c.text.replace(',', " "),
                c.score,
                c.index == item.gold
            )?;
        }
    }
    w.flush()?;
    eprintln!("cloze accuracy {hits}/{} items", items.len());
    Ok(())
}

fn finetune_cmd(
    ckpt: &Path,
    tok: &TokenizerArgs,
    task: &TaskArgs,
    cfg: &FinetuneConfig,
    out: Option<&Path>,
    save: Option<&Path>,
) -> Result<()> {
    let tk = tok.load()?;
    let spec = task.spec();
    spec.validate().map_err(Error::from)?;
    let mut enc = load_encoder(ckpt, &tk)?;
    let train = task.read(&task.train, &spec, &tk)?;
    let dev = task.read(&task.dev, &spec, &tk)?;
    let report = finetune(&mut enc, &spec, &train, &dev, cfg).map_err(Error::from)?;
    let mut w = output(out)?;
    write!(w, "{}", report.to_csv())?;
    w.flush()?;
    eprintln!(
        "best dev metric {} at epoch {}",
        report.best, report.best_epoch
    );
    if let Some(t) = &task.test {
        let test = task.read(t, &spec, &tk)?;
        let m = evaluate(&enc, &spec, &test).map_err(Error::from)?;
        eprintln!(
            "test metric {} ({})",
            m.primary(),
            serde_json::to_string(&m)?
        );
    }
    if let Some(p) = save {
        let ck = Checkpoint {
            header: kmask_core::train::CheckpointHeader {
                model: enc.config.clone(),
                step: 0,
                seed: cfg.seed,
                skipped_batches: 0,
                adam_t: 0,
            },
            adam: kmask_core::tensor::AdamState::new(&enc.params),
            params: enc.params,
        };
        ck.save(p).map_err(Error::from)?;
    }
    Ok(())
}

fn ablate_cmd(
    config: &Path,
    variants: &Path,
    task: &TaskArgs,
    cloze: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = validate_config(config)?;
    let variants: Vec<Variant> = serde_json::from_str(&read_to_string(variants)?).map_err(|e| {
        Error::Config(vec![ConfigIssue::new(
            "variants",
            format!("{}: {e}", variants.display()),
        )])
    })?;
    let tk = load_tokenizer(&cfg)?;
    let spec = task.spec();
    let inputs = AblationInputs {
        sources: load_sources(&cfg.train, &tk)?,
        train: task.read(&task.train, &spec, &tk)?,
        dev: task.read(&task.dev, &spec, &tk)?,
        test: task
            .test
            .as_ref()
            .map(|t| task.read(t, &spec, &tk))
            .transpose()?,
        cloze: match cloze {
            Some(p) => read_cloze(open(p)?, &tk).map_err(Error::from)?,
            None => Vec::new(),
        },
        task: spec,
    };
    let rows = run_ablation(&cfg, &variants, &inputs)?;
    let mut w = output(out)?;
    write!(w, "{}", ablation_csv(&rows))?;
    w.flush()?;
    Ok(())
}
