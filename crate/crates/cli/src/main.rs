//! Command-line driver for the adversarial-augmentation pipeline.
//!
//! Verbs cover the full workflow: `gendata` writes a desk-scale fixture,
//! `pretrain` builds the forward/backward pair, `attack` degrades the
//! shared embedding, `augment` (and its `finetune` shorthand) trains the
//! robustness variants, `noisegen` perturbs the test set, `evaluate` /
//! `report` produce the comparison tables, and `sweep` runs the two
//! hyperparameter grids.
//!
//! Exit codes: 0 success, 1 contract or usage error, 2 numeric failure,
//! 3 missing artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualnmt_core::eval::ModelKind;
use dualnmt_core::perturb::{NoiseSpec, NoiseType};
use dualnmt_core::pipeline::{
    cmd_attack, cmd_augment, cmd_evaluate, cmd_noisegen, cmd_pretrain, cmd_report, cmd_sweep,
    generate_fixture, Overrides, PipelineConfig, SweepGrid,
};
use dualnmt_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dualnmt",
    version,
    about = "Adversarial augmentation for translation models under a dual forward/backward constraint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the token-reversal fixture plus a ready-to-run config.json.
    Gendata {
        /// Directory to create (data/ and config.json land inside).
        #[arg(long)]
        dir: PathBuf,
        /// Fixture generation seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the forward and backward models from scratch.
    Pretrain(RunArgs),
    /// Fine-tune the forward model on clean augmentation data
    /// (shorthand for `augment --mode finetune`).
    Finetune(RunArgs),
    /// Degrade the shared source embedding against the pretrained pair.
    Attack(RunArgs),
    /// Train one augmentation variant on perturbed data.
    Augment {
        /// One of: finetune, simple_replacement, dual_nll, dual_bleu,
        /// dual_metric2.
        #[arg(long, value_parser = parse_mode)]
        mode: ModelKind,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write noisy copies of the test set's source side (the full
    /// deletion/replacement family, or one set via --noise-type/-ratio).
    Noisegen(RunArgs),
    /// Decode every built model on every test set and write the reports.
    Evaluate(RunArgs),
    /// Grid over the attack loss weight, or over the perturbation policy
    /// with --policy.
    Sweep {
        /// Comma-separated loss-weight grid, e.g. 0.2,0.5,0.8.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        lambdas: Vec<f64>,
        /// Comma-separated keep:replace probability pairs,
        /// e.g. 0.7:0.8,0.8:0.8.
        #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "lambdas")]
        policy: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-render the evaluation reports from cached decodes.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON document).
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the configured output directory.
    #[arg(long)]
    out: Option<String>,
    /// Primary metric: bleu or chrf.
    #[arg(long)]
    metric: Option<String>,
    /// Candidate-set size for the risk-based attack objective.
    #[arg(long)]
    mrt_k: Option<usize>,
    /// Forward/backward mix of the attack loss, in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Percentage of tokens perturbed during augmentation training.
    #[arg(long)]
    adv_percent: Option<f64>,
    /// Noise family for noisegen: rd (delete) or rp (replace).
    #[arg(long)]
    noise_type: Option<String>,
    /// Noise ratio for noisegen, e.g. 0.15.
    #[arg(long)]
    noise_ratio: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

impl RunArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        cfg.apply_overrides(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            metric: self.metric.clone(),
            mrt_k: self.mrt_k,
            lambda: self.lambda,
            adv_percent: self.adv_percent,
        })?;
        Ok(cfg)
    }

    /// The single noise spec named by --noise-type/--noise-ratio, if any.
    /// The flags come as a pair.
    fn noise_spec(&self) -> Result<Option<NoiseSpec>> {
        match (self.noise_type.as_deref(), self.noise_ratio) {
            (None, None) => Ok(None),
            (Some(ty), Some(ratio)) => {
                let ty = match ty {
                    "rd" => NoiseType::Rd,
                    "rp" => NoiseType::Rp,
                    other => {
                        return Err(Error::contract(format!(
                            "unknown noise type {other:?}; expected rd or rp"
                        )))
                    }
                };
                Ok(Some(NoiseSpec::new(ty, ratio)?))
            }
            _ => Err(Error::contract(
                "--noise-type and --noise-ratio come as a pair",
            )),
        }
    }

    /// The noise flags only steer noisegen; surface that instead of
    /// silently dropping them.
    fn warn_noise_flags_ignored(&self) {
        if self.noise_type.is_some() || self.noise_ratio.is_some() {
            eprintln!("warning: --noise-type/--noise-ratio only apply to noisegen; ignored");
        }
    }
}

fn parse_policy_grid(points: &[String]) -> Result<Vec<(f64, f64)>> {
    points
        .iter()
        .map(|p| {
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::contract(format!("{s:?} is not a probability")))
            };
            match p.split_once(':') {
                Some((np, rp)) => Ok((parse(np)?, parse(rp)?)),
                None => Err(Error::contract(format!(
                    "policy point {p:?} must look like keep:replace, e.g. 0.7:0.8"
                ))),
            }
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata { dir, seed } => {
            let cfg = generate_fixture(&dir, seed)?;
            println!(
                "fixture written: config {}, artifacts will go to {}",
                dir.join("config.json").display(),
                cfg.out().display()
            );
        }
        Command::Pretrain(args) => {
            args.warn_noise_flags_ignored();
            let cfg = args.load()?;
            let path = cmd_pretrain(&cfg)?;
            println!("pretrained pair at {}", path.display());
        }
        Command::Finetune(args) => {
            args.warn_noise_flags_ignored();
            let cfg = args.load()?;
            let path = cmd_augment(&cfg, ModelKind::Finetune)?;
            println!("fine-tuned model at {}", path.display());
        }
        Command::Attack(args) => {
            args.warn_noise_flags_ignored();
            let cfg = args.load()?;
            let path = cmd_attack(&cfg)?;
            println!("attacked embedding at {}", path.display());
        }
        Command::Augment { mode, run } => {
            run.warn_noise_flags_ignored();
            let cfg = run.load()?;
            let path = cmd_augment(&cfg, mode)?;
            println!("{mode} model at {}", path.display());
        }
        Command::Noisegen(args) => {
            let only = args.noise_spec()?;
            let cfg = args.load()?;
            let paths = cmd_noisegen(&cfg, only)?;
            println!(
                "{} noisy test set(s) under {}",
                paths.len(),
                cfg.out().display()
            );
        }
        Command::Evaluate(args) => {
            args.warn_noise_flags_ignored();
            let cfg = args.load()?;
            let report = cmd_evaluate(&cfg)?;
            for metric in &cfg.metrics {
                print!("{}", report.to_table(metric));
                println!();
            }
            println!("reports under {}", cfg.out().display());
        }
        Command::Sweep {
            lambdas,
            policy,
            run,
        } => {
            run.warn_noise_flags_ignored();
            let cfg = run.load()?;
            let grid = if !policy.is_empty() {
                SweepGrid::Policy(parse_policy_grid(&policy)?)
            } else if !lambdas.is_empty() {
                SweepGrid::Lambda(lambdas)
            } else {
                SweepGrid::default()
            };
            let table = cmd_sweep(&cfg, &grid)?;
            print!("{}", std::fs::read_to_string(&table)?);
            println!("sweep table at {}", table.display());
        }
        Command::Report(args) => {
            args.warn_noise_flags_ignored();
            let cfg = args.load()?;
            let report = cmd_report(&cfg)?;
            print!("{}", report.to_table(&cfg.metrics[0]));
            println!("reports under {}", cfg.out().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
