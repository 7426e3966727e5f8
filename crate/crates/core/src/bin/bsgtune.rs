use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use bsgtune::harness::ablate::{ablate, parse_seeds, parse_variants};
use bsgtune::harness::evaluate::{evaluate, Scenario};
use bsgtune::harness::lut::{export, load_schedule, parse_samples};
use bsgtune::harness::{load_config, train, Checkpoint, Trainer};
use bsgtune::{Error, Result};

/// Gain-schedule autotuning with B-spline surfaces and an off-policy
/// actor-critic.
#[derive(Parser)]
#[command(name = "bsgtune", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `run.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `run.out_dir`, or the checkpoint's directory on resume.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace outputs of an earlier run in the output directory.
        #[arg(long)]
        overwrite: bool,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Adapt a schedule with a trained policy and compare it with the baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to `evaluate/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant on every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma list of react, droq, tqc, dropout=R.
        #[arg(long, default_value = "react,droq,tqc")]
        variants: String,
        /// Comma list; defaults to `run.seeds`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Override `run.total_env_steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Sample kP and kI surfaces into lookup tables.
    ExportLut {
        /// `schedule.json` from `evaluate`, or a checkpoint.
        #[arg(long)]
        input: PathBuf,
        /// Grid size as `N,M`.
        #[arg(long)]
        samples: String,
        /// Defaults to the input's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train {
            config,
            seed,
            out,
            overwrite,
            resume,
        } => {
            let summary = if let Some(ck) = resume {
                let out = out.unwrap_or_else(|| parent(&ck));
                let mut t = Trainer::resume(&ck)?;
                info!("resuming at env step {}", t.env_step());
                t.run(&out)?
            } else {
                let path = config.ok_or_else(|| Error::invalid("train needs --config or --resume"))?;
                let cfg = load_config(&path)?;
                let seed = seed.unwrap_or(cfg.run.seed);
                let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
                info!("training seed {seed} into {}", out.display());
                train(cfg, seed, &out, overwrite)?
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Evaluate { checkpoint, scenario, out } => {
            let sc = Scenario::load(&scenario)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let out = out.unwrap_or_else(|| parent(&checkpoint).join("evaluate"));
            let report = evaluate(&ck, &sc, &out)?;
            println!(
                "mean steady-state error: baseline {:.6}, adapted {:.6}; outputs in {}",
                report.baseline_mean_sse,
                report.adapted_mean_sse,
                out.display()
            );
        }
        Cmd::Ablate {
            config,
            variants,
            seeds,
            out,
            steps,
            overwrite,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.run.total_env_steps = s;
            }
            let variants = parse_variants(&variants)?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => cfg.run.seeds.clone(),
            };
            let outcome = ablate(&cfg, &variants, &seeds, &out, overwrite)?;
            for v in &outcome.variants {
                println!("{}: {:.4} +- {:.4} over {} seeds", v.variant, v.final_mean, v.final_std, v.seeds);
            }
            println!("ordering: {}", outcome.ordering.join(" > "));
            if !outcome.failures.is_empty() {
                return Err(Error::Fault(format!("{} runs failed", outcome.failures.len())));
            }
        }
        Cmd::ExportLut { input, samples, out } => {
            let samples = parse_samples(&samples)?;
            let sched = load_schedule(&input)?;
            let out = out.unwrap_or_else(|| parent(&input));
            let [kp, ki] = export(&sched, samples, &out)?;
            println!("{}\n{}", kp.display(), ki.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
