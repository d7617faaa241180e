//! `moetune`: data preparation, training, evaluation and chat for small
//! mixture-of-experts chat models.

mod chat;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use moetune::data::{
    clean_filter, dataset_stats, ingest_alpaca, ingest_sharegpt, read_corpus, render_template, write_corpus,
    CleanRules, Ingested, RejectionReport, Source, StatsReport, TokenizedSample,
};
use moetune::eval::{evaluate, load_benchmark, BenchmarkName, BenchmarkSpec, NextTokenModel, PromptLanguage, StubModel};
use moetune::quant::DEFAULT_BLOCK_SIZE;
use moetune::train::{load_checkpoint, save_checkpoint, Checkpoint, Schedule, TrainConfig, Trainer};
use moetune::MoeTransformer;

use crate::config::{ConfigFile, UsageError};

#[derive(Parser)]
#[command(name = "moetune", version, about = "Instruction tuning for small mixture-of-experts chat models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, clean and merge instruction datasets into one JSONL corpus.
    PrepareData(PrepareArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Fine-tune adapters on a prepared corpus.
    Train(TrainArgs),
    /// Few-shot multiple-choice evaluation.
    Eval(EvalArgs),
    /// Interactive chat with a checkpoint.
    Chat(chat::ChatArgs),
    /// Fold adapters into dense base weights.
    MergeLora(ConvertArgs),
    /// Store projection weights as 4-bit blocks.
    Quantize(QuantizeArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// alpaca_data_zh style JSON array.
    #[arg(long)]
    alpaca: Option<PathBuf>,
    /// alpaca_gpt4_data_zh style JSON array.
    #[arg(long)]
    alpaca_gpt4: Option<PathBuf>,
    /// ShareGPT style conversations.
    #[arg(long)]
    sharegpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Skip malformed records instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Drop samples whose rendering exceeds this many tokens.
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    /// Keep samples of any length.
    #[arg(long, conflicts_with = "max_seq_len")]
    no_length_filter: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with optional "model", "lora" and "train" blocks.
    #[arg(long, visible_alias = "config")]
    model_config: Option<PathBuf>,
    /// Start from this checkpoint's weights instead of a fresh model.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue a run from its checkpoint, including optimizer and data order.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    quant: Option<OnOff>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long, value_parser = ["constant", "cosine"])]
    schedule: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path, or a stub: oracle:<name>, uniform:, random:<seed>.
    #[arg(long)]
    model: String,
    #[arg(long, value_parser = ["ceval", "mmlu", "cmmlu", "custom"])]
    benchmark: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Comma-separated subset of subjects.
    #[arg(long, value_delimiter = ',')]
    subjects: Vec<String>,
    #[arg(long, value_parser = ["zh", "en"])]
    language: Option<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    block_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Chat(a) => chat::run(a),
        Command::MergeLora(a) => merge_lora(a),
        Command::Quantize(a) => quantize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for usage and configuration problems, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<moetune::Error>() {
        Some(moetune::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SourceReport {
    file: PathBuf,
    ingested: usize,
    skipped: usize,
}

#[derive(Serialize)]
struct PrepareReport {
    sources: BTreeMap<String, SourceReport>,
    /// Counts straight from ingestion, before any filtering.
    ingested: StatsReport,
    rejection: RejectionReport,
    /// Counts of the written corpus.
    corpus: StatsReport,
}

fn stats_path(out: &Path) -> PathBuf {
    out.with_extension("stats.json")
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let inputs: Vec<(Source, &PathBuf)> = [
        (Source::AlpacaZh, a.alpaca.as_ref()),
        (Source::AlpacaGpt4Zh, a.alpaca_gpt4.as_ref()),
        (Source::Sharegpt, a.sharegpt.as_ref()),
    ]
    .into_iter()
    .filter_map(|(s, p)| p.map(|p| (s, p)))
    .collect();
    if inputs.is_empty() {
        return Err(UsageError("give at least one of --alpaca, --alpaca-gpt4, --sharegpt".into()).into());
    }
    let mut all = Vec::new();
    let mut sources = BTreeMap::new();
    for (source, path) in inputs {
        let Ingested { samples, skipped } = match source {
            Source::Sharegpt => ingest_sharegpt(path, a.lenient)?,
            other => ingest_alpaca(path, other, a.lenient)?,
        };
        eprintln!(
            "{}: {} samples from {}, {} skipped",
            source.as_str(),
            samples.len(),
            path.display(),
            skipped.len()
        );
        for s in skipped.iter().take(5) {
            eprintln!("  skipped record {}: {}", s.index, s.reason);
        }
        sources.insert(
            source.as_str().to_string(),
            SourceReport {
                file: path.clone(),
                ingested: samples.len(),
                skipped: skipped.len(),
            },
        );
        all.extend(samples);
    }
    let ingested = dataset_stats(&all);
    eprintln!(
        "total ingested: {} ({} single-round, {} multi-round)",
        ingested.total, ingested.single_round, ingested.multi_round
    );
    let rules = CleanRules {
        max_seq_len: (!a.no_length_filter).then_some(a.max_seq_len),
    };
    let (kept, rejection) = clean_filter(all, &rules);
    for (rule, per) in &rejection.rejected {
        eprintln!("rejected by {rule}: {}", per.values().sum::<usize>());
    }
    write_corpus(&a.out, &kept)?;
    let report = PrepareReport {
        sources,
        ingested,
        rejection,
        corpus: dataset_stats(&kept),
    };
    let sp = stats_path(&a.out);
    write_json(Some(&sp), &report)?;
    eprintln!("wrote {} samples to {} and stats to {}", kept.len(), a.out.display(), sp.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let samples = read_corpus(&a.data)?;
    write_json(a.out.as_deref(), &dataset_stats(&samples))
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.save_every {
            cfg.save_every = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.grad_accum {
            cfg.grad_accum_steps = v;
        }
        if let Some(v) = self.max_steps {
            cfg.max_steps = Some(v);
        }
        if let Some(v) = self.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(s) = &self.schedule {
            cfg.schedule = if s == "cosine" { Schedule::Cosine } else { Schedule::Constant };
        }
    }
}

fn load_tokenized(path: &Path, max_seq_len: usize) -> Result<Vec<TokenizedSample>> {
    let samples = read_corpus(path)?;
    // Inputs and targets are shifted by one, so a sample may be one token longer than the context.
    let limit = max_seq_len + 1;
    let mut data = Vec::with_capacity(samples.len());
    let mut too_long = 0;
    for s in &samples {
        match render_template(s, limit) {
            Ok(t) => data.push(t),
            Err(moetune::Error::Length { .. }) => too_long += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if too_long > 0 {
        eprintln!("warning: skipped {too_long} samples longer than {limit} tokens");
    }
    Ok(data)
}

fn train(a: TrainArgs) -> Result<()> {
    let file = match &a.model_config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let quant = !matches!(a.quant, Some(OnOff::Off));

    let mut trainer = if let Some(p) = &a.resume {
        let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
        if file.model.is_some() || file.lora.is_some() || a.lora_rank.is_some() || a.quant.is_some() {
            eprintln!("warning: model, adapter and quantization settings come from the checkpoint when resuming");
        }
        let mut cfg = file.train.or_else(|| ck.train.clone()).unwrap_or_default();
        a.apply(&mut cfg);
        cfg.validate()?;
        let data = load_tokenized(&a.data, ck.model.config.max_seq_len)?;
        echo_config(&cfg, ck.model.lora.as_ref().map_or(0, |l| l.rank), is_quantized(&ck.model));
        Trainer::resume(ck, data, Some(cfg))?
    } else {
        let mut cfg = file.train.unwrap_or_default();
        a.apply(&mut cfg);
        cfg.validate()?;
        let mut lora = file.lora.unwrap_or_default();
        if let Some(r) = a.lora_rank {
            lora.rank = r;
        }
        lora.validate()?;
        let mut model = match &a.init {
            Some(p) => {
                let mut m = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?.model;
                if file.model.is_some() {
                    eprintln!("warning: model settings come from the --init checkpoint");
                }
                m.merge_adapters()?;
                m
            }
            None => {
                let mc = file.model.unwrap_or_default();
                mc.validate()?;
                MoeTransformer::new(mc, cfg.seed)?
            }
        };
        echo_config(&cfg, lora.rank, quant);
        eprintln!("model: {}", serde_json::to_string(&model.config)?);
        eprintln!("lora: {}", serde_json::to_string(&lora)?);
        let data = load_tokenized(&a.data, model.config.max_seq_len)?;
        model.attach_lora(lora, cfg.seed)?;
        if quant {
            model.quantize_base(DEFAULT_BLOCK_SIZE)?;
        }
        Trainer::new(model, data, cfg)?
    };

    let r = trainer.model.parameter_report();
    eprintln!(
        "trainable params: {} | frozen params: {} | trainable%: {:.4}",
        r.trainable,
        r.frozen,
        100.0 * r.ratio
    );
    eprintln!("projection bytes: {}", trainer.model.projection_bytes());
    eprintln!(
        "steps: {} ({} per epoch), starting at {}",
        trainer.total_steps(),
        trainer.steps_per_epoch(),
        trainer.state.step
    );
    let records = trainer.run(Some(&a.out_dir))?;
    if let Some(last) = records.last() {
        eprintln!("step {} loss {:.4}", last.step, last.loss);
    }
    eprintln!("wrote {}", a.out_dir.display());
    Ok(())
}

fn is_quantized(model: &MoeTransformer) -> bool {
    let mut any = false;
    model.visit_linears(&mut |_, lin| any |= lin.is_quantized());
    any
}

fn echo_config(cfg: &TrainConfig, rank: usize, quant: bool) {
    eprintln!(
        "config: epochs={} lr={} save_every={} batch_size={} grad_accum={} seed={} lora_rank={} quant={}",
        cfg.epochs,
        cfg.lr,
        cfg.save_every,
        cfg.batch_size,
        cfg.grad_accum_steps,
        cfg.seed,
        rank,
        if quant { "on" } else { "off" }
    );
    if let Ok(json) = serde_json::to_string(cfg) {
        eprintln!("train: {json}");
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let name: BenchmarkName = a.benchmark.parse()?;
    let mut spec = BenchmarkSpec::new(name).with_shots(a.shots);
    spec.subjects = a.subjects;
    if let Some(l) = a.language.as_deref() {
        spec.language = if l == "en" { PromptLanguage::En } else { PromptLanguage::Zh };
    }
    let bench = load_benchmark(&a.data_dir, &spec)?;
    for w in &bench.warnings {
        eprintln!("warning: {w}");
    }
    let stub = StubModel::from_uri(&a.model, &bench, &spec)?;
    let loaded;
    let model: &dyn NextTokenModel = match &stub {
        Some(s) => s,
        None => {
            let path = Path::new(&a.model);
            loaded = load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?
                .model;
            &loaded
        }
    };
    let report = evaluate(model, &bench, &spec)?;
    eprint!("{}", report.table());
    write_json(a.out.as_deref(), &report)
}

fn merge_lora(a: ConvertArgs) -> Result<()> {
    let ck = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if ck.model.lora.is_none() {
        bail!(UsageError(format!("{} has no adapters to merge", a.model.display())));
    }
    let mut model = ck.model;
    model.merge_adapters()?;
    save_checkpoint(&Checkpoint::from_model(model), &a.out)?;
    eprintln!("merged adapters into {}", a.out.display());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let mut ck = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let before = ck.model.projection_bytes();
    ck.model.quantize_base(a.block_size)?;
    save_checkpoint(&ck, &a.out)?;
    eprintln!(
        "projection bytes {before} -> {}; wrote {}",
        ck.model.projection_bytes(),
        a.out.display()
    );
    Ok(())
}
