//! Command-line surface: `train`, `translate`, `analyze` and `repro`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use slaf::data::{synth_task, tokenize, Corpus, ParallelText, SynthKind};
use slaf::diagnostics::{self, ReportSelection, SystemTraces, MIN_BUCKET_SENTENCES};
use slaf::laf::LengthSource;
use slaf::policy::{Policy, WritingProbMatrix};
use slaf::stream_decode::{
    read_trace_jsonl, session_latency, simulate, trace_records, write_trace_jsonl, DecodeMode, StreamError,
};
use slaf::trainer::{write_log_header, write_log_row, Checkpoint, TrainError, Trainer};

use crate::config::RunConfig;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

const PLACEHOLDER_VOCAB: usize = 5;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(e) | Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "slaf",
    version,
    about = "Simultaneous translation: training, streaming decoding and analysis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Stream each input line through a checkpoint under a read policy.
    Translate(TranslateArgs),
    /// Write CSV reports from trace files.
    Analyze(AnalyzeArgs),
    /// Synthetic train, translate and analyze chain for full, wait-k and wait-k with length-aware fill.
    Repro(ReproArgs),
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// Configuration file of `key = value` lines [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// full | wait-k | wait-k-laf | pred-laf [default: full]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<String>,
    /// Lag of the wait-k schedule; required by every mode except full [default: none]
    #[arg(long, value_name = "INT")]
    pub k: Option<usize>,
    /// Root random seed [default: 1]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Optimizer steps [default: 20000]
    #[arg(long, value_name = "INT")]
    pub max_steps: Option<u64>,
    /// Source side of the training corpus [default: none]
    #[arg(long, value_name = "PATH")]
    pub train_src: Option<PathBuf>,
    /// Target side of the training corpus [default: none]
    #[arg(long, value_name = "PATH")]
    pub train_tgt: Option<PathBuf>,
    /// Source side of the validation corpus [default: none]
    #[arg(long, value_name = "PATH")]
    pub valid_src: Option<PathBuf>,
    /// Target side of the validation corpus [default: none]
    #[arg(long, value_name = "PATH")]
    pub valid_tgt: Option<PathBuf>,
    /// Output checkpoint [default: model.ckpt]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Training log CSV [default: <checkpoint>.log.csv]
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint [default: none]
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Any configuration key as KEY=VALUE; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Full,
    WaitK,
    FromBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LafArg {
    /// Real source states only.
    Off,
    /// Fill to the predicted length.
    On,
    /// Fill to the true source length.
    Oracle,
    /// Length equal to the read count (no fill).
    Prefix,
}

#[derive(Clone, Debug, Args)]
pub struct TranslateArgs {
    /// Trained checkpoint [required]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// One whitespace-tokenized source sentence per line [required]
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Hypotheses, one per input line [required]
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Read policy.
    #[arg(long, value_enum, value_name = "POLICY", default_value = "wait-k")]
    pub policy: PolicyArg,
    /// Lag for the wait-k policy [default: none]
    #[arg(long, value_name = "INT")]
    pub k: Option<usize>,
    /// Writing-probability matrix for the from-beta policy [default: none]
    #[arg(long, value_name = "PATH")]
    pub beta_file: Option<PathBuf>,
    /// Length-aware fill.
    #[arg(long, value_enum, value_name = "MODE", default_value = "off")]
    pub laf: LafArg,
    /// Trace JSON-lines output [default: none]
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Per-sentence latency CSV [default: none]
    #[arg(long, value_name = "PATH")]
    pub latency_csv: Option<PathBuf>,
    /// System label in traces [default: derived from policy and fill]
    #[arg(long, value_name = "NAME")]
    pub system: Option<String>,
    /// Source vocabulary file that must match the checkpoint [default: none]
    #[arg(long, value_name = "PATH")]
    pub src_vocab: Option<PathBuf>,
    /// Target vocabulary file that must match the checkpoint [default: none]
    #[arg(long, value_name = "PATH")]
    pub tgt_vocab: Option<PathBuf>,
    /// Maximum tokens per hypothesis [default: 2·J + 10]
    #[arg(long, value_name = "INT")]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trace JSON-lines file; repeatable [required]
    #[arg(long = "trace", value_name = "PATH", required = true)]
    pub traces: Vec<PathBuf>,
    /// Output directory for CSV reports [required]
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Reference translations, one per source line [default: none]
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// Comma-separated: all, attention, quality, duplication, quintiles, fill, length.
    #[arg(long, value_name = "LIST", default_value = "all")]
    pub reports: String,
    /// Smallest source-length bucket kept in attention reports.
    #[arg(long, value_name = "INT", default_value_t = MIN_BUCKET_SENTENCES)]
    pub min_bucket: usize,
    /// System whose per-sentence bias ratios define the quintiles [default: first system]
    #[arg(long, value_name = "NAME")]
    pub bias_system: Option<String>,
}

#[derive(Clone, Debug, Args)]
pub struct ReproArgs {
    /// Output directory [required]
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Root random seed.
    #[arg(long, value_name = "INT", default_value_t = 1)]
    pub seed: u64,
    /// copy | reverse | shift[:k]
    #[arg(long, value_name = "TASK", default_value = "reverse")]
    pub task: String,
    /// Lag of the wait-k systems.
    #[arg(long, value_name = "INT", default_value_t = 3)]
    pub k: usize,
    /// Training pairs.
    #[arg(long, value_name = "INT", default_value_t = 10_000)]
    pub pairs: usize,
    /// Held-out pairs.
    #[arg(long, value_name = "INT", default_value_t = 500)]
    pub test_pairs: usize,
    /// Optimizer steps per system.
    #[arg(long, value_name = "INT", default_value_t = 6000)]
    pub steps: u64,
    /// Synthetic vocabulary size.
    #[arg(long, value_name = "INT", default_value_t = 30)]
    pub vocab: usize,
    /// Shortest source sentence.
    #[arg(long, value_name = "INT", default_value_t = 5)]
    pub min_len: usize,
    /// Longest source sentence.
    #[arg(long, value_name = "INT", default_value_t = 15)]
    pub max_len: usize,
    /// Model width.
    #[arg(long, value_name = "INT", default_value_t = 32)]
    pub d_model: usize,
    /// Encoder and decoder layers.
    #[arg(long, value_name = "INT", default_value_t = 1)]
    pub layers: usize,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return u8::try_from(e.exit_code()).unwrap_or(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, std::env::vars()),
        Command::Translate(a) => cmd_translate(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Repro(a) => cmd_repro(&a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::Usage(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .runtime()?;
    }
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .runtime()
}

/// Resolves the run configuration: file, then environment, then flags.
pub fn resolve_train_config(
    args: &TrainArgs,
    env: impl IntoIterator<Item = (String, String)>,
) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &args.config {
        cfg.merge_file(p)?;
    }
    cfg.merge_env(env)?;
    cfg.merge_pairs(&args.set)?;
    let flags: [(&str, Option<String>); 10] = [
        ("mode", args.mode.clone()),
        ("k", args.k.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("max_steps", args.max_steps.map(|v| v.to_string())),
        ("train_src", args.train_src.as_ref().map(|p| p.display().to_string())),
        ("train_tgt", args.train_tgt.as_ref().map(|p| p.display().to_string())),
        ("valid_src", args.valid_src.as_ref().map(|p| p.display().to_string())),
        ("valid_tgt", args.valid_tgt.as_ref().map(|p| p.display().to_string())),
        ("checkpoint", args.checkpoint.as_ref().map(|p| p.display().to_string())),
        ("log", args.log.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, env: impl IntoIterator<Item = (String, String)>) -> Result<(), Failure> {
    let cfg = resolve_train_config(args, env).usage()?;
    let src = existing(cfg.require_path("train_src").usage()?, "training source")?;
    let tgt = existing(cfg.require_path("train_tgt").usage()?, "training target")?;
    let ckpt_path = cfg.path("checkpoint").unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let log_path = cfg.path("log").unwrap_or_else(|| with_suffix(&ckpt_path, ".log.csv"));
    let text = ParallelText::read(&src, &tgt).usage()?;
    let valid_text = match (cfg.path("valid_src"), cfg.path("valid_tgt")) {
        (Some(s), Some(t)) => {
            Some(ParallelText::read(&existing(s, "validation source")?, &existing(t, "validation target")?).usage()?)
        }
        (None, None) => None,
        _ => {
            return Err(Failure::Usage(anyhow!(
                "valid_src and valid_tgt must be given together"
            )))
        }
    };

    let resumed = match &args.resume {
        Some(p) => Some(Checkpoint::load(&existing(p.clone(), "checkpoint")?).usage()?),
        None => None,
    };
    // Vocabulary sizes are unknown until the corpus is built; only the position limit matters here.
    let max_positions = match &resumed {
        Some(ck) => ck.model_config.max_positions,
        None => {
            cfg.model_config(PLACEHOLDER_VOCAB, PLACEHOLDER_VOCAB)
                .usage()?
                .max_positions
        }
    };
    let corpus = match &resumed {
        Some(ck) => Corpus::encode(&text, ck.src_vocab.clone(), ck.tgt_vocab.clone(), max_positions),
        None => Corpus::build(&text, cfg.min_freq().usage()?, max_positions),
    }
    .usage()?;
    if corpus.pairs.is_empty() {
        return Err(Failure::Usage(anyhow!("no usable training pairs in {}", src.display())));
    }
    let valid = match valid_text {
        Some(v) => {
            Corpus::encode(&v, corpus.src_vocab.clone(), corpus.tgt_vocab.clone(), max_positions)
                .usage()?
                .pairs
        }
        None => Vec::new(),
    };

    let mut trainer = match &resumed {
        Some(ck) => {
            let mut t = Trainer::resume(ck, &corpus.pairs).usage()?;
            if let Some(v) = cfg.get("max_steps") {
                t.cfg.set("max_steps", v).usage()?;
            }
            t
        }
        None => {
            let model_cfg = cfg
                .model_config(corpus.src_vocab.len(), corpus.tgt_vocab.len())
                .usage()?;
            let train_cfg = cfg.train_config().usage()?;
            Trainer::new(
                train_cfg,
                model_cfg,
                corpus.src_vocab.clone(),
                corpus.tgt_vocab.clone(),
                &corpus.pairs,
            )
            .usage()?
        }
    };

    let mut log = create(&log_path)?;
    write_log_header(&mut log).runtime()?;
    let outcome = trainer.run(&valid, |row| write_log_row(&mut log, row));
    log.flush().runtime()?;
    match outcome {
        Ok(out) => {
            out.best.save(&ckpt_path).runtime()?;
            out.last.save(&with_suffix(&ckpt_path, ".last")).runtime()?;
            fs::write(with_suffix(&ckpt_path, ".src.vocab"), out.best.src_vocab.to_text()).runtime()?;
            fs::write(with_suffix(&ckpt_path, ".tgt.vocab"), out.best.tgt_vocab.to_text()).runtime()?;
            Ok(())
        }
        Err(TrainError::Divergence { step, last_good }) => {
            last_good.save(&ckpt_path).runtime()?;
            Err(Failure::Runtime(anyhow!(
                "training diverged at step {step}; last good state saved to {}",
                ckpt_path.display()
            )))
        }
        Err(e) => Err(Failure::Runtime(e.into())),
    }
}

fn system_name(args: &TranslateArgs) -> String {
    if let Some(s) = &args.system {
        return s.clone();
    }
    let base = match args.policy {
        PolicyArg::Full => "full".to_string(),
        PolicyArg::WaitK => format!("wait{}", args.k.unwrap_or(0)),
        PolicyArg::FromBeta => "beta".to_string(),
    };
    let suffix = match args.laf {
        LafArg::Off => "",
        LafArg::On => "-laf",
        LafArg::Oracle => "-laf-oracle",
        LafArg::Prefix => "-laf-prefix",
    };
    format!("{base}{suffix}")
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&existing(args.checkpoint.clone(), "checkpoint")?).usage()?;
    for (path, vocab, side) in [
        (&args.src_vocab, &ck.src_vocab, "source"),
        (&args.tgt_vocab, &ck.tgt_vocab, "target"),
    ] {
        if let Some(p) = path {
            let text = fs::read_to_string(existing(p.clone(), "vocabulary")?)
                .with_context(|| format!("cannot read {}", p.display()))
                .usage()?;
            let given = slaf::data::Vocabulary::from_text(&text).usage()?;
            if &given != vocab {
                return Err(Failure::Usage(anyhow!(
                    "{side} vocabulary {} does not match the checkpoint",
                    p.display()
                )));
            }
        }
    }
    let model = ck.model().usage()?;
    let policy = match args.policy {
        PolicyArg::Full => Policy::Full,
        PolicyArg::WaitK => match args.k {
            Some(k) if k >= 1 => Policy::WaitK(k),
            _ => return Err(Failure::Usage(anyhow!("--policy wait-k needs --k of at least 1"))),
        },
        PolicyArg::FromBeta => {
            let p = args
                .beta_file
                .clone()
                .ok_or_else(|| Failure::Usage(anyhow!("--policy from-beta needs --beta-file")))?;
            let text = fs::read_to_string(existing(p, "beta file")?).usage()?;
            Policy::from_beta(&WritingProbMatrix::parse(&text).usage()?).usage()?
        }
    };
    let mode = match args.laf {
        LafArg::Off => DecodeMode::Plain,
        LafArg::On => DecodeMode::Laf(LengthSource::Predicted),
        LafArg::Oracle => DecodeMode::Laf(LengthSource::GroundTruth),
        LafArg::Prefix => DecodeMode::Laf(LengthSource::Prefix),
    };
    let system = system_name(args);
    let input = File::open(existing(args.input.clone(), "input")?).usage()?;
    let mut out = create(&args.output)?;
    let mut trace = args.trace.as_deref().map(create).transpose()?;
    let mut latency = args.latency_csv.as_deref().map(create).transpose()?;
    if let Some(w) = latency.as_mut() {
        writeln!(w, "sent,src_len,tgt_len,al").runtime()?;
    }
    for (sent, line) in BufReader::new(input).lines().enumerate() {
        let line = line.runtime()?;
        let ids = model.arch.truncate(&ck.src_vocab.encode(&tokenize(&line)));
        let (hyp, session) = match simulate(&model, &policy, &ids, mode, args.max_len) {
            Ok(r) => r,
            Err(e @ (StreamError::Policy(_) | StreamError::MaxLen)) => {
                return Err(Failure::Usage(anyhow!(e).context(format!("input line {}", sent + 1))))
            }
            Err(e) => return Err(Failure::Runtime(anyhow!(e).context(format!("input line {}", sent + 1)))),
        };
        writeln!(out, "{}", ck.tgt_vocab.decode(&hyp).join(" ")).runtime()?;
        if let Some(w) = trace.as_mut() {
            write_trace_jsonl(w, &trace_records(&session, &system, sent, mode, Some(&ck.tgt_vocab))).runtime()?;
        }
        if let Some(w) = latency.as_mut() {
            let r = session_latency(&session).runtime()?;
            writeln!(w, "{},{},{},{}", sent, r.src_len, r.tgt_len, r.al).runtime()?;
        }
    }
    out.flush().runtime()?;
    for w in [trace.as_mut(), latency.as_mut()].into_iter().flatten() {
        w.flush().runtime()?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Reports {
    attention: bool,
    quality: bool,
    duplication: bool,
    quintiles: bool,
    fill: bool,
    length: bool,
}

fn parse_reports(list: &str) -> anyhow::Result<Reports> {
    let mut r = Reports {
        attention: false,
        quality: false,
        duplication: false,
        quintiles: false,
        fill: false,
        length: false,
    };
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "all" => {
                r = Reports {
                    attention: true,
                    quality: true,
                    duplication: true,
                    quintiles: true,
                    fill: true,
                    length: true,
                }
            }
            "attention" => r.attention = true,
            "quality" => r.quality = true,
            "duplication" => r.duplication = true,
            "quintiles" => r.quintiles = true,
            "fill" => r.fill = true,
            "length" => r.length = true,
            other => bail!(
                "unknown report {other:?}; expected all, attention, quality, duplication, quintiles, fill, length"
            ),
        }
    }
    Ok(r)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Hypotheses of every system, aligned to the sentence order of `reference`.
fn aligned_hypotheses(systems: &[SystemTraces]) -> anyhow::Result<Vec<(String, Vec<Vec<String>>)>> {
    let ids: Vec<usize> = systems[0].sentences.iter().map(|s| s.sent).collect();
    systems
        .iter()
        .map(|t| {
            let these: Vec<usize> = t.sentences.iter().map(|s| s.sent).collect();
            if these != ids {
                bail!(
                    "system {} covers different sentences than {}",
                    t.system,
                    systems[0].system
                );
            }
            Ok((t.system.clone(), t.sentences.iter().map(|s| s.hypothesis()).collect()))
        })
        .collect()
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let reports = parse_reports(&args.reports).usage()?;
    let mut records = Vec::new();
    for path in &args.traces {
        let f = File::open(existing(path.clone(), "trace")?).usage()?;
        let r = read_trace_jsonl(BufReader::new(f))
            .with_context(|| format!("in {}", path.display()))
            .usage()?;
        records.extend(r);
    }
    let systems = diagnostics::group_traces(&records).usage()?;
    if systems.is_empty() {
        return Err(Failure::Usage(anyhow!("trace files hold no records")));
    }
    let references = match &args.reference {
        Some(p) => Some(read_lines(&existing(p.clone(), "reference")?).usage()?),
        None => None,
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .runtime()?;
    let out = |name: &str| args.out.join(name);

    if reports.attention {
        let mut ratio_rows = Vec::new();
        let per_system: Vec<_> = systems
            .iter()
            .map(|t| {
                (
                    t.system.clone(),
                    diagnostics::average_attention(&t.sentences, args.min_bucket),
                )
            })
            .collect();
        for (system, reps) in &per_system {
            let name = if systems.len() == 1 {
                "avg_attention.csv".to_string()
            } else {
                format!("avg_attention.{system}.csv")
            };
            diagnostics::write_avg_attention_csv(create(&out(&name))?, reps).runtime()?;
            ratio_rows.extend(reps.iter().map(|r| (system.clone(), r)));
        }
        diagnostics::write_bias_ratio_csv(create(&out("bias_ratio.csv"))?, &ratio_rows).runtime()?;
    }

    if reports.quality || reports.duplication || reports.length {
        let select = ReportSelection {
            quality: reports.quality,
            duplication: reports.duplication,
            length: reports.length,
        };
        let rows = systems
            .iter()
            .map(|t| diagnostics::metrics_report(t, references.as_deref(), select))
            .collect::<Result<Vec<_>, _>>()
            .usage()?;
        diagnostics::write_metrics_csv(create(&out("metrics.csv"))?, &rows).runtime()?;
    }

    if reports.quintiles {
        match &references {
            Some(refs) => {
                let bias = match &args.bias_system {
                    Some(name) => systems
                        .iter()
                        .find(|t| &t.system == name)
                        .ok_or_else(|| Failure::Usage(anyhow!("no traces for system {name}")))?,
                    None => &systems[0],
                };
                let ratios = diagnostics::sentence_bias_ratios(&bias.sentences).usage()?;
                let hyps = aligned_hypotheses(&systems).usage()?;
                let sel_refs: Vec<Vec<String>> = bias
                    .sentences
                    .iter()
                    .map(|s| {
                        refs.get(s.sent)
                            .cloned()
                            .ok_or_else(|| anyhow!("no reference for sentence {}", s.sent))
                    })
                    .collect::<anyhow::Result<_>>()
                    .usage()?;
                let rows = diagnostics::bias_bucketed_quality(&ratios, &hyps, &sel_refs).usage()?;
                diagnostics::write_bias_quintiles_csv(create(&out("bias_quintiles.csv"))?, &rows).runtime()?;
            }
            None if args.reports.split(',').any(|s| s.trim() == "quintiles") => {
                return Err(Failure::Usage(anyhow!("quintile report needs --reference")));
            }
            None => log::warn!("no references given; skipping bias_quintiles.csv"),
        }
    }

    if reports.fill {
        let rows: Vec<_> = systems
            .iter()
            .map(|t| (t.system.clone(), diagnostics::fill_attention_curve(&t.sentences)))
            .collect();
        diagnostics::write_fill_curve_csv(create(&out("fill_curve.csv"))?, &rows).runtime()?;
    }

    if reports.length {
        let rows: Vec<_> = systems
            .iter()
            .filter(|t| t.sentences.iter().any(|s| s.length_source.is_some()))
            .filter_map(|t| diagnostics::length_accuracy_curve(&t.sentences).map(|a| (t.system.clone(), a)))
            .collect();
        diagnostics::write_len_accuracy_csv(create(&out("len_accuracy.csv"))?, &rows).runtime()?;
    }
    Ok(())
}

/// One system of the reproduction chain.
#[derive(Clone, Debug)]
pub struct ReproSystem {
    pub name: String,
    pub mode: &'static str,
    pub policy: PolicyArg,
    pub laf: LafArg,
}

impl ReproSystem {
    /// Full-sentence, plain wait-k and wait-k with length-aware fill.
    pub fn standard(k: usize) -> [Self; 3] {
        [
            Self {
                name: "full".into(),
                mode: "full",
                policy: PolicyArg::Full,
                laf: LafArg::Off,
            },
            Self {
                name: format!("wait{k}"),
                mode: "wait-k",
                policy: PolicyArg::WaitK,
                laf: LafArg::Off,
            },
            Self {
                name: format!("wait{k}-laf"),
                mode: "wait-k-laf",
                policy: PolicyArg::WaitK,
                laf: LafArg::On,
            },
        ]
    }
}

/// Synthetic corpus files under `<out>/data`.
#[derive(Clone, Debug)]
pub struct ReproData {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
}

pub fn repro_data(args: &ReproArgs) -> Result<ReproData, Failure> {
    let kind: SynthKind = args.task.parse().usage()?;
    if args.test_pairs == 0 || args.pairs == 0 {
        return Err(Failure::Usage(anyhow!("--pairs and --test-pairs must be positive")));
    }
    let text = synth_task(
        kind,
        args.vocab,
        args.min_len,
        args.max_len,
        args.pairs + args.test_pairs,
        args.seed,
    )
    .usage()?;
    let (train, test) = text.split_tail(args.test_pairs);
    let dir = args.out.join("data");
    fs::create_dir_all(&dir).runtime()?;
    let data = ReproData {
        train_src: dir.join("train.src"),
        train_tgt: dir.join("train.tgt"),
        test_src: dir.join("test.src"),
        test_tgt: dir.join("test.tgt"),
    };
    train.write(&data.train_src, &data.train_tgt).runtime()?;
    test.write(&data.test_src, &data.test_tgt).runtime()?;
    Ok(data)
}

/// Configuration file contents for one reproduction system.
pub fn repro_config(args: &ReproArgs, system: &ReproSystem) -> String {
    let positions = args.max_len + 2;
    format!(
        "# {name}\nmode = {mode}\nk = {k}\nseed = {seed}\nmax_steps = {steps}\nwarmup = {warmup}\nlr = 0.002\n\
         eval_every = 0\ntoken_budget = 512\nmin_freq = 1\nd_model = {d}\nn_heads = 4\nn_enc_layers = {l}\n\
         n_dec_layers = {l}\nd_ffn = {ffn}\nmax_positions = {positions}\nlength_classes = {positions}\ndropout = 0.1\n",
        name = system.name,
        mode = system.mode,
        k = args.k,
        seed = args.seed,
        steps = args.steps,
        warmup = (args.steps / 5).max(1),
        d = args.d_model,
        l = args.layers,
        ffn = 2 * args.d_model,
    )
}

/// Trains one system into `<out>/<name>` and streams the test source
/// through it. Returns the trace path.
pub fn repro_system(args: &ReproArgs, data: &ReproData, system: &ReproSystem) -> Result<PathBuf, Failure> {
    let dir = args.out.join(&system.name);
    fs::create_dir_all(&dir).runtime()?;
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, repro_config(args, system)).runtime()?;
    let ckpt = dir.join("model.ckpt");
    let train_args = TrainArgs {
        config: Some(cfg_path),
        train_src: Some(data.train_src.clone()),
        train_tgt: Some(data.train_tgt.clone()),
        checkpoint: Some(ckpt.clone()),
        log: Some(dir.join("train_log.csv")),
        ..Default::default()
    };
    cmd_train(&train_args, std::iter::empty())?;
    let trace = dir.join("trace.jsonl");
    cmd_translate(&TranslateArgs {
        checkpoint: ckpt,
        input: data.test_src.clone(),
        output: dir.join("hyp.txt"),
        policy: system.policy,
        k: Some(args.k),
        beta_file: None,
        laf: system.laf,
        trace: Some(trace.clone()),
        latency_csv: Some(dir.join("latency.csv")),
        system: Some(system.name.clone()),
        src_vocab: None,
        tgt_vocab: None,
        max_len: None,
    })?;
    Ok(trace)
}

pub fn cmd_repro(args: &ReproArgs) -> Result<(), Failure> {
    let data = repro_data(args)?;
    let traces = ReproSystem::standard(args.k)
        .iter()
        .map(|s| repro_system(args, &data, s))
        .collect::<Result<Vec<_>, _>>()?;
    cmd_analyze(&AnalyzeArgs {
        traces,
        out: args.out.join("analysis"),
        reference: Some(data.test_tgt),
        reports: "all".into(),
        min_bucket: MIN_BUCKET_SENTENCES,
        bias_system: Some(format!("wait{}", args.k)),
    })
}
