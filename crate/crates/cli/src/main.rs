use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memr::env::{evaluate_policy, make_env};
use memr::trainer::Trainer;
use memr::verify::{run_all, VerifyOptions};

mod ablate;
mod config;
mod plot;
mod run;

use ablate::AblateArgs;
use config::{out_root, TrainArgs};

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files: exit 2.
    Usage(String),
    /// Anything that went wrong while doing valid work: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "memr", version, about = "Maximum-entropy model rollouts: training, ablations, checks and plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write manifest, metrics CSV and checkpoints.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Directory name under the artifact root (default: the run id).
        #[arg(long)]
        name: Option<String>,
        /// Print the merged configuration and exit without training.
        #[arg(long)]
        print_config: bool,
    },
    /// Sweep prioritization strength, model dataset size and policy updates.
    Ablate(AblateArgs),
    /// Run the oracle suites and report each property.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        lemma_n: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        lemma_pairs: usize,
        #[arg(long, default_value_t = 100)]
        theorem_trials: usize,
        #[arg(long, default_value_t = 100)]
        gradient_configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render return and rollout curves (mean ± std across CSVs) as SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Output directory (default: <artifact root>/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the deterministic policy stored in a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn cmd_train(args: &TrainArgs, name: Option<&str>, print_config: bool) -> Result<bool, CliError> {
    let (cfg, settings) = args.resolve()?;
    print!("{}", cfg.to_toml());
    if print_config {
        return Ok(true);
    }
    let started = run::now();
    let dir = out_root().join(name.map(str::to_owned).unwrap_or_else(|| run::run_id(&cfg, &started)));
    println!("run directory: {}", dir.display());
    let outcome = run::execute(&cfg, &settings, &dir, started, |r| {
        println!(
            "step {:>8}  return {:>10.2}  holdout_mse {:>9.5}  entropy {:>8.3}  temperature {:.4}",
            r.step, r.eval_return, r.holdout_mse, r.model_entropy, r.temperature
        );
    })?;
    if let Some(e) = outcome.error {
        return Err(CliError::Runtime(e));
    }
    println!("metrics: {}", outcome.manifest.artifacts.metrics_csv.display());
    if let Some(ck) = outcome.manifest.artifacts.checkpoints.last() {
        println!("final checkpoint: {}", ck.display());
    }
    Ok(true)
}

fn cmd_verify(opts: VerifyOptions) -> Result<bool, CliError> {
    let results = run_all(&opts).map_err(CliError::runtime)?;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.property, r.observed);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.property.as_str()).collect();
    if !failed.is_empty() {
        eprintln!("violated: {}", failed.join("; "));
    }
    Ok(failed.is_empty())
}

/// A single CSV inside a run directory gets its plots next to it, and the
/// run manifest lists them.
fn cmd_plot(csv: &[PathBuf], out: Option<PathBuf>) -> Result<bool, CliError> {
    let runs = plot::load_runs(csv)?;
    let run_dir = match csv {
        [one] => one.parent().filter(|d| d.join("manifest.json").is_file()).map(PathBuf::from),
        _ => None,
    };
    let out = out.unwrap_or_else(|| match &run_dir {
        Some(d) => d.join("plots"),
        None => out_root().join("plots"),
    });
    let written = plot::write_plots(&runs, &out)?;
    for p in &written {
        println!("{}", p.display());
    }
    if let Some(d) = run_dir {
        let mut m = run::RunManifest::read(&d)?;
        for p in written {
            if !m.artifacts.plots.contains(&p) {
                m.artifacts.plots.push(p);
            }
        }
        m.write(&d)?;
    }
    Ok(true)
}

fn cmd_eval(path: &PathBuf, episodes: Option<usize>, seed: u64) -> Result<bool, CliError> {
    let trainer = Trainer::load_checkpoint(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let cfg = trainer.config();
    let env = make_env(&cfg.env).map_err(CliError::runtime)?;
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let res = evaluate_policy(env.as_ref(), trainer.agent(), episodes, cfg.sac.gamma, seed).map_err(CliError::runtime)?;
    println!("checkpoint step {} ({})", trainer.step(), cfg.env);
    println!("episodes {episodes}");
    println!("mean_return {:.4}", res.mean_return);
    println!("mean_discounted_return {:.4}", res.mean_discounted);
    println!("discounted_tail_bound {:.4}", res.tail_bound);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { args, name, print_config } => cmd_train(args, name.as_deref(), *print_config),
        Command::Ablate(args) => ablate::cmd_ablate(args),
        Command::Verify {
            lemma_n,
            lemma_pairs,
            theorem_trials,
            gradient_configs,
            seed,
        } => cmd_verify(VerifyOptions {
            lemma_ns: lemma_n.clone(),
            lemma_pairs: *lemma_pairs,
            theorem_trials: *theorem_trials,
            gradient_configs: *gradient_configs,
            seed: *seed,
        }),
        Command::Plot { csv, out } => cmd_plot(csv, out.clone()),
        Command::Eval { checkpoint, episodes, seed } => cmd_eval(checkpoint, *episodes, *seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
