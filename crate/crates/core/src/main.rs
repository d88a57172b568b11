use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iavae::experiments::{
    cmd_capacity_sweep, cmd_gap, cmd_generate, cmd_posterior_eval, cmd_report, cmd_robustness, cmd_significance, cmd_train,
    default_checkpoints, ExperimentConfig,
};

/// Instance-adaptive amortized inference on the oracle synthetic benchmark.
#[derive(Parser, Debug)]
#[command(name = "iavae", version)]
struct Cli {
    /// JSON experiment configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset seed (overrides `dataset.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs and per-point evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as CSV plus a JSON sidecar.
    Generate,
    /// Train one base VAE and one IA-VAE on top of it.
    Train {
        /// Base seed (default: the first configured base seed).
        #[arg(long)]
        base_seed: Option<u64>,
    },
    /// Seed-robustness table: base seeds × IA-VAE run seeds.
    Robustness,
    /// Compare two checkpoints against the true posterior.
    PosteriorEval(CheckpointArgs),
    /// VAE width sweep with the IA-VAE reference point.
    CapacitySweep,
    /// Paired significance test over robustness records.
    Significance {
        /// Directory of a robustness sweep (default: <out>/robustness).
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Per-point amortization gap of two checkpoints.
    Gap {
        #[command(flatten)]
        checkpoints: CheckpointArgs,
        /// Evaluate only the first N points.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Rebuild tables from record files and collect all summaries.
    Report,
}

#[derive(clap::Args, Debug)]
struct CheckpointArgs {
    /// VAE checkpoint (default: written by `train`).
    #[arg(long)]
    vae: Option<PathBuf>,
    /// IA-VAE checkpoint (default: written by `train`).
    #[arg(long)]
    iavae: Option<PathBuf>,
    /// Base seed whose `train` outputs are used by default.
    #[arg(long)]
    base_seed: Option<u64>,
}

fn load_config(cli: &Cli) -> iavae::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.dataset.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Gap { points: Some(p), .. } = &cli.command {
        cfg.gap.points = Some(*p);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoints(cfg: &ExperimentConfig, args: &CheckpointArgs) -> (PathBuf, PathBuf) {
    let (v, i) = default_checkpoints(cfg, args.base_seed.unwrap_or(cfg.base_seeds[0]));
    (args.vae.clone().unwrap_or(v), args.iavae.clone().unwrap_or(i))
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> iavae::Result<()> {
    match &cli.command {
        Command::Generate => {
            let path = cmd_generate(cfg)?;
            println!("wrote {} ({} rows)", path.display(), cfg.dataset.n);
        }
        Command::Train { base_seed } => {
            let (vae, ia) = cmd_train(cfg, base_seed.unwrap_or(cfg.base_seeds[0]))?;
            for r in [vae, ia] {
                println!(
                    "{:<7} base_seed={} run_seed={:?} elbo={:.4} kl={:.4} best_epoch={} params={}",
                    r.mode.to_string(),
                    r.base_seed,
                    r.run_seed,
                    r.elbo,
                    r.kl,
                    r.best_epoch,
                    r.inference_parameters()
                );
            }
        }
        Command::Robustness => {
            let rows = cmd_robustness(cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.experiment_dir("robustness").join("table.txt")).unwrap_or_default()
            );
            if rows.iter().any(|r| r.error.is_some()) {
                return Err(iavae::Error::InvalidArgument("one or more robustness rows failed".into()));
            }
        }
        Command::PosteriorEval(args) => {
            let (v, i) = checkpoints(cfg, args);
            cmd_posterior_eval(cfg, &v, &i)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.experiment_dir("posterior-eval").join("table.txt")).unwrap_or_default()
            );
        }
        Command::CapacitySweep => {
            let sweep = cmd_capacity_sweep(cfg)?;
            for r in sweep.best.iter().chain(std::iter::once(&sweep.iavae)) {
                println!(
                    "{:<7} h={:<3} params={:<4} elbo={:.4} elbo_no_const={:.4}",
                    r.mode.to_string(),
                    r.hidden_width,
                    r.parameters,
                    r.elbo,
                    r.elbo_no_const
                );
            }
        }
        Command::Significance { records } => {
            let report = cmd_significance(cfg, records.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", report.hypotheses());
        }
        Command::Gap { checkpoints: args, .. } => {
            let (v, i) = checkpoints(cfg, args);
            let s = cmd_gap(cfg, &v, &i)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report => {
            let path = cmd_report(cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("config error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
