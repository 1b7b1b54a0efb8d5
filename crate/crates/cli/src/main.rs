use clap::{Parser, Subcommand};
use mvq_cli::{run_all, run_stage, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

/// Machine-vision-aware quality toolkit: builds compression-sweep corpora,
/// computes detection/recognition degradation targets, trains crop-level
/// quality models and benchmarks metrics against the targets.
#[derive(Parser)]
#[command(name = "mvq", version, about)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "mvq.toml")]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap intra-stage worker count.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override the output root.
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode the compression-sweep variants and write the manifest.
    Sweep,
    /// Auto-label frames (detection GT, plate strings, face pairs).
    Label,
    /// Compute ground-truth degradation targets per object and variant.
    Targets,
    /// Train the quality model for the configured target.
    Train,
    /// Correlate the trained model and baseline metrics with the targets.
    Eval,
    /// Render report CSV/JSON and SRCC charts.
    Report,
    /// Run every stage in order.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    if cfg.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
        {
            eprintln!("config error: cannot set worker count: {e}");
            return ExitCode::from(2);
        }
    }

    let run = |stage: &str| -> ExitCode {
        match run_stage(&cfg, stage) {
            Ok(outcome) => {
                println!(
                    "[{}] done: {}",
                    outcome.stage,
                    serde_json::to_string(&outcome.counts).unwrap_or_default()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("[{stage}] failed: {e:#}");
                ExitCode::from(1)
            }
        }
    };

    match cli.command {
        Command::Sweep => run("sweep"),
        Command::Label => run("label"),
        Command::Targets => run("targets"),
        Command::Train => run("train"),
        Command::Eval => run("eval"),
        Command::Report => run("report"),
        Command::All => match run_all(&cfg) {
            Ok(_) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("pipeline failed: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
