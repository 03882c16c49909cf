use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pukf::harness::{emit_report, run_campaign, CampaignConfig, OutputFormat, FILTER_TEMPLATES};
use pukf::scenarios::SCENARIO_NAMES;
use pukf::Error;

#[derive(Parser)]
#[command(version, about = "Monte-Carlo comparison of Kalman filter variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign and write the metrics report.
    Run(Box<RunArgs>),
    /// Print the built-in scenario names.
    ListScenarios,
    /// Print the accepted filter identifiers.
    ListFilters,
}

#[derive(Args)]
struct RunArgs {
    /// JSON campaign configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated filter identifiers, e.g. pukf:1,ekf2,ukf.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<String>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reference particle count for KL divergences (0 disables them).
    #[arg(long)]
    ref_particles: Option<usize>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Resume from and append to this JSON-lines file of finished runs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Add median update times to the report.
    #[arg(long)]
    timing: bool,
}

fn build_config(args: RunArgs) -> Result<CampaignConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => CampaignConfig::from_json_file(path).map_err(|e| match e {
            Error::Io(msg) => Error::Config(format!("cannot read {}: {msg}", path.display())),
            other => other,
        })?,
        None => {
            let scenario = args
                .scenario
                .clone()
                .ok_or_else(|| Error::Config("--scenario is required without --config".into()))?;
            let seed = args
                .seed
                .ok_or_else(|| Error::Config("--seed is required without --config".into()))?;
            serde_json::from_value(serde_json::json!({ "scenario": scenario, "seed": seed }))
                .map_err(|e| Error::Config(e.to_string()))?
        }
    };
    if let Some(v) = args.scenario {
        cfg.scenario = v;
    }
    if let Some(v) = args.filters {
        cfg.filters = v.into_iter().filter(|f| !f.trim().is_empty()).collect();
    }
    if let Some(v) = args.runs {
        cfg.runs = Some(v);
    }
    if let Some(v) = args.steps {
        cfg.steps = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.ref_particles {
        cfg.ref_particles = v;
    }
    if let Some(v) = args.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = args.out {
        cfg.out = Some(v);
    }
    if let Some(v) = args.format {
        cfg.format = v;
    }
    if let Some(v) = args.checkpoint {
        cfg.checkpoint = Some(v);
    }
    cfg.timing |= args.timing;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Error> {
    let cfg = build_config(args)?;
    cfg.validate()?;
    let output = run_campaign(&cfg)?;
    emit_report(&output.report, cfg.format, cfg.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::ListScenarios => {
            SCENARIO_NAMES.iter().for_each(|s| println!("{s}"));
            Ok(())
        }
        Command::ListFilters => {
            FILTER_TEMPLATES.iter().for_each(|(id, about)| println!("{id:<24} {about}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Io(_) => 3,
                _ => 1,
            })
        }
    }
}
