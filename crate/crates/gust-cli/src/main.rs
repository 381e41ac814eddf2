//! `gust` command line: train, sweep, ablate, gradcheck.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime or numeric
//! failure, 3 gradient check ran but failed its tolerance.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gust_cli::error::{CliError, EXIT_GRADCHECK_FAILED, EXIT_USAGE};
use gust_cli::runner::{cmd_ablate, cmd_gradcheck, cmd_sweep, cmd_train, DataSource, RunSpec};
use gust_core::{Method, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gust",
    about = "Uncertainty-gated self-training for semi-supervised node classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over several seeds and report test accuracy.
    Train(RunArgs),
    /// Label-fraction sweep emitting a CSV curve.
    Sweep(SweepArgs),
    /// Full model against each single-flag ablation.
    Ablate(RunArgs),
    /// Finite-difference verification of the full loss gradients.
    Gradcheck,
}

#[derive(Args, Default)]
struct RunArgs {
    /// Directory with nodes.tsv, edges.tsv, labels.tsv, optional splits.tsv.
    #[arg(long, value_name = "DIR", conflicts_with = "sbm")]
    dataset: Option<PathBuf>,
    /// Synthetic preset: easy, hard, or tiny.
    #[arg(long, value_name = "PRESET")]
    sbm: Option<String>,
    /// gust, gcn_supervised, or self_training.
    #[arg(long, value_name = "M")]
    method: Option<String>,
    /// Number of seeded runs (seeds are base, base+1, ...).
    #[arg(long, value_name = "N")]
    seeds: Option<u64>,
    /// Base seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Uncertainty gate sharpness.
    #[arg(long, value_name = "F")]
    gamma: Option<f64>,
    /// Weight of the edge-consistency penalty.
    #[arg(long, value_name = "F")]
    lambda: Option<f64>,
    /// EM iterations.
    #[arg(long = "T", value_name = "N")]
    em_iterations: Option<usize>,
    /// Gradient steps per M-step.
    #[arg(long = "m-epochs", value_name = "N")]
    m_epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    /// Hidden layer width.
    #[arg(long, value_name = "N")]
    hidden_dim: Option<usize>,
    /// Latent embedding width.
    #[arg(long, value_name = "N")]
    latent_dim: Option<usize>,
    /// Output directory for metrics, checkpoints, and CSV files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON config file mirroring these flags; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Ablation: deterministic embeddings (z = mu, zero reported variance).
    #[arg(long)]
    deterministic_encoder: bool,
    /// Ablation: single EM iteration.
    #[arg(long)]
    single_step: bool,
    /// Ablation: no edge-consistency term.
    #[arg(long)]
    no_graph_reg: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated label fractions in (0, 1].
    #[arg(long, value_delimiter = ',', value_name = "F,...")]
    fractions: Vec<f64>,
}

/// JSON mirror of the CLI flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<PathBuf>,
    sbm: Option<String>,
    method: Option<String>,
    seeds: Option<u64>,
    seed: Option<u64>,
    gamma: Option<f64>,
    lambda: Option<f64>,
    #[serde(rename = "T")]
    em_iterations: Option<usize>,
    m_epochs: Option<usize>,
    lr: Option<f64>,
    hidden_dim: Option<usize>,
    latent_dim: Option<usize>,
    out: Option<PathBuf>,
    deterministic_encoder: Option<bool>,
    single_step: Option<bool>,
    no_graph_reg: Option<bool>,
    fractions: Option<Vec<f64>>,
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    match name {
        "gust" => Ok(Method::Gust),
        "gcn_supervised" => Ok(Method::GcnSupervised),
        "self_training" => Ok(Method::SelfTraining),
        other => Err(CliError::Usage(format!(
            "unknown method '{other}', expected gust, gcn_supervised, or self_training"
        ))),
    }
}

fn load_file_config(path: &PathBuf) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

struct ResolvedSpec {
    spec: RunSpec,
    fractions: Vec<f64>,
}

/// Defaults, then config file values, then CLI flags.
fn resolve(args: &RunArgs, cli_fractions: &[f64]) -> Result<ResolvedSpec, CliError> {
    let file = match &args.config {
        Some(path) => load_file_config(path)?,
        None => FileConfig::default(),
    };

    let defaults = TrainConfig::default();
    let config = TrainConfig {
        gamma: args.gamma.or(file.gamma).unwrap_or(defaults.gamma),
        lambda: args.lambda.or(file.lambda).unwrap_or(defaults.lambda),
        em_iterations: args
            .em_iterations
            .or(file.em_iterations)
            .unwrap_or(defaults.em_iterations),
        m_epochs: args.m_epochs.or(file.m_epochs).unwrap_or(defaults.m_epochs),
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        hidden_dim: args
            .hidden_dim
            .or(file.hidden_dim)
            .unwrap_or(defaults.hidden_dim),
        latent_dim: args
            .latent_dim
            .or(file.latent_dim)
            .unwrap_or(defaults.latent_dim),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        deterministic_encoder: args.deterministic_encoder
            || file.deterministic_encoder.unwrap_or(false),
        single_step: args.single_step || file.single_step.unwrap_or(false),
        no_graph_reg: args.no_graph_reg || file.no_graph_reg.unwrap_or(false),
        confidence_threshold: defaults.confidence_threshold,
    };

    let data = match (
        args.dataset.as_ref().or(file.dataset.as_ref()),
        args.sbm.as_ref().or(file.sbm.as_ref()),
    ) {
        (Some(dir), None) => DataSource::Dataset(dir.clone()),
        (None, Some(preset)) => DataSource::SbmPreset(preset.clone()),
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "--dataset and --sbm are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --dataset or --sbm is required".into(),
            ))
        }
    };

    let method_name = args
        .method
        .clone()
        .or(file.method.clone())
        .unwrap_or_else(|| "gust".to_owned());
    let method = parse_method(&method_name)?;

    let seed_count = args.seeds.or(file.seeds).unwrap_or(5);
    if seed_count == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let base = config.seed;
    let seeds: Vec<u64> = (0..seed_count).map(|i| base + i).collect();

    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("runs"));

    let fractions = if cli_fractions.is_empty() {
        file.fractions.unwrap_or_default()
    } else {
        cli_fractions.to_vec()
    };

    Ok(ResolvedSpec {
        spec: RunSpec {
            data,
            method,
            config,
            seeds,
            out,
        },
        fractions,
    })
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Train(args) => {
            let resolved = resolve(&args, &[])?;
            cmd_train(&resolved.spec)?;
            Ok(0)
        }
        Command::Sweep(args) => {
            let resolved = resolve(&args.run, &args.fractions)?;
            cmd_sweep(&resolved.spec, &resolved.fractions)?;
            Ok(0)
        }
        Command::Ablate(args) => {
            let resolved = resolve(&args, &[])?;
            cmd_ablate(&resolved.spec)?;
            Ok(0)
        }
        Command::Gradcheck => {
            let outcome = cmd_gradcheck()?;
            Ok(if outcome.pass { 0 } else { EXIT_GRADCHECK_FAILED })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
