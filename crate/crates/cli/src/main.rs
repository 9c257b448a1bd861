//! `rmroute`: synthesize or convert data, train, evaluate, benchmark and
//! count parameters for the five reward-model methods.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmroute::assembly::Method;
use rmroute::bench::CallOrder;
use rmroute::pipeline::Preset;
use rmroute::router::RouterInput;

use crate::commands::{BenchCmd, ParamsCmd, SynthCmd};
use crate::config::{Methods, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Validation(_) => 3,
            Self::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Validation(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<rmroute::Error> for CliError {
    fn from(e: rmroute::Error) -> Self {
        let mut msg = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            msg.push_str(&format!(": {s}"));
            source = s.source();
        }
        let validation = match &e {
            rmroute::Error::Cell { source, .. } => source.is_validation(),
            other => other.is_validation(),
        };
        if validation {
            Self::Validation(msg)
        } else {
            Self::Runtime(msg)
        }
    }
}

#[derive(Parser)]
#[command(name = "rmroute", version, about = "Routed reward models: train, evaluate, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain preference dataset.
    Synth {
        #[arg(long)]
        domains: usize,
        /// Training pairs per domain.
        #[arg(long, default_value_t = 200)]
        per_domain: usize,
        #[arg(long, default_value_t = 50)]
        test_per_domain: usize,
        /// disjoint or overlapping vocabularies.
        #[arg(long, default_value = "disjoint")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "RMROUTE_OUT")]
        out: PathBuf,
    },
    /// Convert raw source records (JSONL) into preference pairs.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// Output file stem; `test*` marks a test split.
        #[arg(long, default_value = "train")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "RMROUTE_OUT")]
        out: PathBuf,
    },
    /// Train one assembly per (method, seed) under OUT/METHOD/seed-N.
    Train(RunFlags),
    /// Evaluate trained assemblies on DATA/test.jsonl.
    Eval {
        #[command(flatten)]
        run: RunFlags,
        /// Count pairs with |chosen - rejected| below this as half correct.
        #[arg(long)]
        tie_eps: Option<f32>,
    },
    /// Per-call inference latency of trained assemblies.
    Bench {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value_t = 100)]
        per_domain: usize,
        /// Group calls by domain instead of interleaving them at random.
        #[arg(long)]
        sorted: bool,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Parameter counts per method relative to the baseline.
    ReportParams {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        domains: Option<usize>,
        /// Count with the closed-form formulas for a backbone of this size.
        #[arg(long)]
        toy_backbone: Option<usize>,
        #[arg(long, requires = "toy_backbone")]
        toy_adapter: Option<usize>,
    },
}

#[derive(Args)]
struct RunFlags {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method tag(s): baseline, base-lora, more, rodos, arliss.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    reference_encoder: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    moe: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, env = "RMROUTE_OUT")]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// desk or paper hyperparameters.
    #[arg(long)]
    preset: Option<Preset>,
    /// Let the router also read the chosen response.
    #[arg(long)]
    route_with_response: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunFlags {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        let flags = RunConfig {
            method: (!self.method.is_empty()).then_some(Methods::Many(self.method)),
            encoder: self.encoder,
            reference_encoder: self.reference_encoder,
            adapter: self.adapter,
            moe: self.moe,
            data: self.data,
            out: self.out,
            seeds: (!self.seeds.is_empty()).then_some(self.seeds),
            preset: self.preset,
            router_input: self.route_with_response.then_some(RouterInput::PromptAndResponse),
            jobs: self.jobs,
        };
        Ok(file.overlay(flags))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            domains,
            per_domain,
            test_per_domain,
            mode,
            seed,
            out,
        } => commands::synth(SynthCmd {
            domains,
            per_domain,
            test_per_domain,
            mode,
            seed,
            out,
        }),
        Command::Convert { input, name, seed, out } => commands::convert(&input, &name, seed, &out),
        Command::Train(run) => commands::train(&run.resolve()?),
        Command::Eval { run, tie_eps } => commands::eval(&run.resolve()?, tie_eps),
        Command::Bench {
            run,
            per_domain,
            sorted,
            reps,
            warmup,
        } => commands::bench(
            &run.resolve()?,
            BenchCmd {
                per_domain,
                order: if sorted { CallOrder::Sorted } else { CallOrder::Shuffled },
                reps,
                warmup,
            },
        ),
        Command::ReportParams {
            run,
            domains,
            toy_backbone,
            toy_adapter,
        } => commands::report_params(
            &run.resolve()?,
            ParamsCmd {
                domains,
                toy_backbone,
                toy_adapter,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
