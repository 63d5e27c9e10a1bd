//! Command-line driver: planning, prompt extraction, tiled runs, diagnostics
//! and benchmarks over one TOML configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use tilesr_core::guidance::NormKind;
use tilesr_core::prompts::PromptMode;

use crate::commands::{DiagnoseArgs, PlanFormat, RunArgs};
use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tilesr", version, about = "Tiled diffusion super-resolution with per-tile prompts")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` (and TILESR_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunFlags {
    /// Prompt manifest from `extract-prompts`; extracted on the fly if absent.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PromptMode>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Accept a manifest whose fingerprints do not match.
    #[arg(long)]
    pub allow_stale: bool,
    /// Threads issuing tile predictions.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the tile plan.
    Plan {
        #[arg(long, value_enum, default_value = "text")]
        format: PlanFormat,
        /// Also write the plan JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Extract prompts and write a manifest.
    ExtractPrompts {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PromptMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run tiled super-resolution.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        output: Option<PathBuf>,
        /// JSON run report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Misguidance CSV and optional seam metrics.
    Diagnose {
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        allow_stale: bool,
        /// Condition compared against each tile's local prompt.
        #[arg(long, value_parser = parse_mode, default_value = "global")]
        compare: PromptMode,
        /// Comma-separated step indices to probe.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, value_enum, default_value = "l2")]
        norm: NormArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also run the sampler and report seam metrics.
        #[arg(long)]
        seams: bool,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
    },
    /// Time a global-prompt baseline against tiled prompts.
    Bench {
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NormArg {
    L2,
    Rms,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse()
}

/// Loads the config with environment and flag overrides applied, validated.
pub fn resolve_config(
    cli: &Cli,
    env: impl Fn(&str) -> Option<String>,
    tweak: impl FnOnce(&mut RunConfig),
) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <file> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env(env)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    tweak(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the parsed command and returns what to print.
pub fn dispatch(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> Result<String, CliError> {
    match &cli.command {
        Command::Plan { format, json } => {
            let cfg = resolve_config(cli, env, |_| {})?;
            commands::cmd_plan(&cfg, *format, json.as_deref())
        }
        Command::ExtractPrompts { mode, out } => {
            let cfg = resolve_config(cli, env, |_| {})?;
            let out = out
                .clone()
                .or_else(|| cfg.output.manifest.clone())
                .ok_or_else(|| CliError::Usage("extract-prompts needs --out or output.manifest".into()))?;
            commands::cmd_extract(&cfg, mode.unwrap_or(cfg.extractor.mode), &out)
        }
        Command::Run { flags, output, report } => {
            let cfg = resolve_config(cli, env, |c| {
                if let Some(b) = flags.backend {
                    c.backend.kind = b;
                }
                if let Some(n) = flags.parallelism {
                    c.backend.parallelism = n;
                }
                if let Some(o) = output {
                    c.output.path = Some(o.clone());
                }
                if let Some(r) = report {
                    c.output.report = Some(r.clone());
                }
            })?;
            let args = RunArgs {
                mode: flags.mode.unwrap_or(cfg.extractor.mode),
                manifest: flags.prompts.as_deref(),
                allow_stale: flags.allow_stale,
            };
            commands::cmd_run(&cfg, &args)
        }
        Command::Diagnose {
            prompts,
            allow_stale,
            compare,
            steps,
            norm,
            csv,
            seams,
            backend,
        } => {
            let cfg = resolve_config(cli, env, |c| {
                if let Some(b) = backend {
                    c.backend.kind = *b;
                }
            })?;
            let args = DiagnoseArgs {
                manifest: prompts.as_deref(),
                allow_stale: *allow_stale,
                compare: *compare,
                steps: steps.clone(),
                norm: match norm {
                    NormArg::L2 => NormKind::L2,
                    NormArg::Rms => NormKind::Rms,
                },
                csv_out: csv.as_deref(),
                seams: *seams,
            };
            commands::cmd_diagnose(&cfg, &args)
        }
        Command::Bench {
            json,
            backend,
            parallelism,
        } => {
            let cfg = resolve_config(cli, env, |c| {
                if let Some(b) = backend {
                    c.backend.kind = *b;
                }
                if let Some(n) = parallelism {
                    c.backend.parallelism = *n;
                }
            })?;
            commands::cmd_bench(&cfg, json.as_deref())
        }
    }
}
