//! `midilm`: the symbolic-music pipeline as batch subcommands.

mod config;
mod data;
mod music;
mod selftest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;

/// Error with an exit-code class: bad input (1) or internal failure (2).
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Internal(_) => 2,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Tags a fallible result as an input or internal failure with context.
pub trait Classify<T> {
    fn input(self, ctx: impl FnOnce() -> String) -> CmdResult<T>;
    fn internal(self, ctx: impl FnOnce() -> String) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self, ctx: impl FnOnce() -> String) -> CmdResult<T> {
        self.map_err(|e| Failure::Input(e.into().context(ctx())))
    }

    fn internal(self, ctx: impl FnOnce() -> String) -> CmdResult<T> {
        self.map_err(|e| Failure::Internal(e.into().context(ctx())))
    }
}

pub fn input_err<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::Input(anyhow::anyhow!(msg.into())))
}

#[derive(Debug, Parser)]
#[command(
    name = "midilm",
    version,
    about = "Symbolic-music pipeline: MIDI parsing, tokenization, clips, ABC, features, annotation data, alignment training and text metrics"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Pipeline configuration file (TOML)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed overriding every seed in the configuration
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for file-level parallelism and concurrent LLM calls
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub jobs: usize,
}

/// Input files and where to write one output per input.
#[derive(Debug, Clone, Args)]
pub struct FileIo {
    /// Input MIDI files
    #[arg(required = true, value_name = "INPUT")]
    pub inputs: Vec<PathBuf>,
    /// Output file (single input only; stdout when omitted)
    #[arg(short, long, value_name = "FILE", conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Output directory; one file per input, named after the input stem
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse Standard MIDI Files into note and timeline JSON
    Parse(FileIo),
    /// Convert MIDI files to OctupleMIDI token text
    Tokenize(FileIo),
    /// Select bar-aligned clips with per-clip features (JSON)
    Segment(FileIo),
    /// Convert MIDI files to ABC notation
    Abc(FileIo),
    /// Estimate tempo, key and time signature (JSON)
    Features(FileIo),
    /// Annotate pieces from source documents through the LLM client
    Annotate(data::AnnotateArgs),
    /// Generate template Q&A pairs and clip lists from annotations
    GenQa(data::GenQaArgs),
    /// Split by piece into train/test JSONL with a manifest
    Assemble(data::AssembleArgs),
    /// Pretrain the decoder on dataset text with bag-of-words prefixes
    Pretrain(train::PretrainArgs),
    /// Run alignment stage 1 (projection) or stage 2 (projection and LoRA)
    Train(train::TrainArgs),
    /// Greedy-decode answers for dataset rows
    Decode(train::DecodeArgs),
    /// Score predictions against gold texts (BLEU, METEOR, ROUGE-L, BERTScore)
    Eval(train::EvalArgs),
    /// Run the built-in oracle checks
    Selftest,
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub global: Global,
}

impl Ctx {
    fn new(global: Global) -> CmdResult<Self> {
        let mut cfg = match &global.config {
            Some(p) => PipelineConfig::load(p).input(|| "configuration".to_string())?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = global.seed {
            cfg.split_seed = s;
            cfg.align.seed = s;
            cfg.train.seed = s;
            cfg.pretrain.seed = s;
        }
        Ok(Self { cfg, global })
    }

    pub fn jobs(&self) -> usize {
        self.global.jobs.max(1)
    }

    pub fn pool(&self) -> CmdResult<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs())
            .build()
            .internal(|| "starting worker pool".to_string())
    }
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Ctx::new(cli.global)?;
    match cli.command {
        Command::Parse(io) => music::parse(&ctx, &io),
        Command::Tokenize(io) => music::tokenize(&ctx, &io),
        Command::Segment(io) => music::segment(&ctx, &io),
        Command::Abc(io) => music::abc(&ctx, &io),
        Command::Features(io) => music::features(&ctx, &io),
        Command::Annotate(a) => data::annotate(&ctx, &a),
        Command::GenQa(a) => data::gen_qa(&ctx, &a),
        Command::Assemble(a) => data::assemble(&ctx, &a),
        Command::Pretrain(a) => train::pretrain(&ctx, &a),
        Command::Train(a) => train::train(&ctx, &a),
        Command::Decode(a) => train::decode(&ctx, &a),
        Command::Eval(a) => train::eval(&ctx, &a),
        Command::Selftest => selftest::run(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Input(e) | Failure::Internal(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
