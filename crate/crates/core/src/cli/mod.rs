//! Command-line front end. Data goes to files (or stdout for the small
//! reports), progress to stderr. Exit status: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numeric failure, 4 selfcheck failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "permdec",
    version,
    about = "Permuted-order prophet decoding on a small encoder-decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration file plus `key=value` overrides.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Overrides such as `train.lr=3e-4` or `out_dir=runs/a`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic copy/reverse/infill dataset (and optionally a toy corpus).
    GenData(RunArgs),
    /// Span-masking pre-training on a plain-text corpus.
    Pretrain(RunArgs),
    /// Train on source/target pairs, optionally from a checkpoint.
    Finetune(RunArgs),
    /// Beam-search decoding of one source per line.
    Generate(RunArgs),
    /// Log-probability of targets under a decoding order and stream.
    Score(RunArgs),
    /// Write the attention masks of one decoding order.
    MaskDump {
        /// Target length T.
        #[arg(long)]
        len: Option<usize>,
        /// Explicit order, e.g. "2 1 3".
        #[arg(long, conflicts_with = "dist")]
        order: Option<String>,
        /// Sample the order from l2r, urp, alpha or alpha:<value>.
        #[arg(long)]
        dist: Option<String>,
        #[arg(long, default_value_t = 2)]
        streams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check an existing dump against the brute-force oracle instead.
        #[arg(long, conflicts_with_all = ["order", "dist", "len", "out"])]
        verify: Option<PathBuf>,
    },
    /// Empirical order frequencies with a chi-square goodness-of-fit statistic.
    OrderStats {
        #[arg(long, default_value = "urp")]
        dist: String,
        #[arg(long, default_value_t = 3)]
        len: usize,
        #[arg(long, default_value_t = 60_000)]
        draws: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suites and print one verdict line per suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn a loss log into gnuplot data files and a script.
    Plot {
        /// `loss.csv` written by training.
        #[arg(long)]
        log: PathBuf,
        /// Defaults to the log's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn table(args: &RunArgs) -> Result<toml::Table> {
    config::load_table(args.config.as_deref(), &args.overrides)
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(table(&a)?)?,
        Command::Pretrain(a) => commands::pretrain(table(&a)?)?,
        Command::Finetune(a) => commands::finetune(table(&a)?)?,
        Command::Generate(a) => commands::generate_cmd(table(&a)?)?,
        Command::Score(a) => commands::score_cmd(table(&a)?)?,
        Command::MaskDump {
            len,
            order,
            dist,
            streams,
            seed,
            out,
            verify,
        } => {
            if let Some(path) = verify {
                commands::verify_mask_file(&path)?;
                eprintln!("{}: matches the conditional-set oracle", path.display());
            } else {
                let args = commands::MaskDumpArgs {
                    len,
                    order,
                    dist,
                    streams,
                    seed,
                    out,
                };
                let text = commands::mask_dump(&args)?;
                if args.out.is_none() {
                    print!("{text}");
                }
            }
        }
        Command::OrderStats {
            dist,
            len,
            draws,
            seed,
            out,
        } => {
            let args = commands::OrderStatsArgs {
                dist,
                len,
                draws,
                seed,
                out,
            };
            eprintln!(
                "{}",
                toml::to_string(&args).map_err(|e| Error::Config(e.to_string()))?
            );
            print!("{}", commands::order_stats_cmd(&args)?);
        }
        Command::Selfcheck { seed } => {
            eprintln!("seed = {seed}");
            let reports = crate::selfcheck::run_all(seed);
            for r in &reports {
                println!("{}", r.line());
                eprintln!("  {} took {:.2?}", r.name, r.elapsed);
            }
            if reports.iter().any(|r| !r.passed) {
                return Ok(4);
            }
        }
        Command::Plot { log, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| log.parent().map(PathBuf::from).unwrap_or_default());
            for p in commands::plot(&log, &dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(0)
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
