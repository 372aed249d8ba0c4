use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use matkv_core::cli::{self, CliError, CsvReport, EngineConfig, OutputFormat};
use matkv_core::costmodel::SecPerMbMode;
use matkv_core::pipeline::{Mode, SimulatedTimes};

#[derive(Debug, Parser)]
#[command(name = "matkv", version, about = "Materialized KV caches for retrieval-augmented generation")]
struct Args {
    /// Engine config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output format; overrides the config's `output`.
    #[arg(long = "out", global = true)]
    out: Option<String>,
    /// Overrides the model seed (and the workload spec seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, index and (per admission policy) materialize a JSONL corpus.
    Ingest { corpus: PathBuf },
    /// Answer one query.
    Query {
        /// Comma-separated token ids.
        #[arg(long)]
        tokens: String,
        #[arg(long, default_value = "matkv")]
        mode: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Replay a request trace in batches under one or more modes.
    Bench {
        trace: PathBuf,
        /// Repeatable or comma-separated; all three modes when omitted.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        /// Stage-time file (JSON `{load_s, compute_s, clock}`).
        #[arg(long)]
        simulate: Option<PathBuf>,
    },
    /// Break-even interval and energy comparison.
    Costmodel {
        #[arg(long)]
        params: Option<PathBuf>,
        /// `unit` or `as-written`.
        #[arg(long, default_value = "unit")]
        sec_per_mb: String,
    },
    /// Generate a synthetic corpus, access trace and skew report.
    Workload { spec: PathBuf, out_dir: PathBuf },
}

fn emit<R: serde::Serialize + CsvReport>(report: &R, format: OutputFormat) -> Result<(), CliError> {
    let text = cli::render(report, format)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
}

fn engine_config(args: &Args) -> Result<EngineConfig, CliError> {
    let mut cfg = EngineConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn run(args: Args) -> Result<(), CliError> {
    let format = |cfg_default: OutputFormat| -> Result<OutputFormat, CliError> {
        match &args.out {
            Some(s) => s.parse().map_err(CliError::Usage),
            None => Ok(cfg_default),
        }
    };
    match &args.command {
        Command::Ingest { corpus } => {
            let cfg = engine_config(&args)?;
            let fmt = format(cfg.output)?;
            emit(&cli::cmd_ingest(&cfg, corpus)?, fmt)
        }
        Command::Query { tokens, mode, max_new_tokens } => {
            let cfg = engine_config(&args)?;
            let fmt = format(cfg.output)?;
            let mode = cli::parse_mode(mode)?;
            let tokens = cli::parse_tokens(tokens)?;
            emit(&cli::cmd_query(&cfg, &tokens, mode, *max_new_tokens)?, fmt)
        }
        Command::Bench { trace, mode, batch_size, simulate } => {
            let mut cfg = engine_config(&args)?;
            let fmt = format(cfg.output)?;
            let modes: Vec<Mode> = if mode.is_empty() {
                Mode::ALL.to_vec()
            } else {
                mode.iter().map(|m| cli::parse_mode(m.trim())).collect::<Result<_, _>>()?
            };
            if let Some(path) = simulate {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
                let sim: SimulatedTimes = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid stage times {}: {e}", path.display())))?;
                cfg.simulate = Some(sim);
            }
            let seed = cfg.model.seed;
            emit(&cli::cmd_bench(&cfg, trace, &modes, *batch_size, seed)?, fmt)
        }
        Command::Costmodel { params, sec_per_mb } => {
            let fmt = format(OutputFormat::Json)?;
            let mode: SecPerMbMode = sec_per_mb.parse().map_err(CliError::Usage)?;
            emit(&cli::cmd_costmodel(params.as_deref(), mode)?, fmt)
        }
        Command::Workload { spec, out_dir } => {
            let fmt = format(OutputFormat::Json)?;
            let spec = cli::load_workload_spec(spec, args.seed)?;
            emit(&cli::cmd_workload(&spec, out_dir)?, fmt)
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("matkv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
