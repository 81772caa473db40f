//! Command-line driver for the unlearning pipeline and its diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgru_core::pipeline::diag::{self, FIDELITY_TOLERANCE};
use cgru_core::pipeline::phases::{self, tracked, write_config};
use cgru_core::pipeline::{emit_report, run_full, Method, RunConfig, RunLock};
use cgru_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cgru", version, about = "Critic-guided reinforcement unlearning on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `policy.iterations=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the diffusion model on the labelled mixture.
    Pretrain,
    /// Train the reward and evaluation classifier.
    Classifier,
    /// Fit the value critic on trajectories of the base model.
    Critic,
    /// Fine-tune the base model to forget the target class.
    Unlearn {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Score the base model and every unlearned checkpoint.
    Eval,
    /// Estimator and critic diagnostics.
    Diag {
        #[arg(value_enum)]
        experiment: Experiment,
    },
    /// Every phase in order, then evaluation.
    Full,
    /// Summarise the metrics of a finished run.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Ddpo,
    Cgru,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ddpo => Method::Ddpo,
            MethodArg::Cgru => Method::Cgru,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Experiment {
    /// Gradient variance of both estimators on paired batches.
    Variance,
    /// Toy-gradient checks and the baseline-term sweep.
    Unbiasedness,
    /// Timestep-aware against plain critic.
    Ablation,
    /// Constant-baseline variance around the mean reward.
    BaselineOptimum,
    /// Critic values against rollout estimates.
    Fidelity,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::Config {
                key: "--config".into(),
                reason: format!("no such file {}", p.display()),
            },
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("CGRU_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| Error::Config {
        key: "CGRU_THREADS".into(),
        reason: format!("expected a positive integer, found `{value}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config {
            key: "CGRU_THREADS".into(),
            reason: e.to_string(),
        })
}

/// Runs one phase under the directory lock and records it in the manifest.
fn phase<T>(
    cfg: &RunConfig,
    dir: &Path,
    name: &str,
    f: impl FnOnce() -> Result<(Vec<String>, T)>,
) -> Result<T> {
    let _lock = RunLock::acquire(dir)?;
    write_config(cfg, dir)?;
    tracked(cfg, dir, name, f)
}

fn run_diag(cfg: &RunConfig, dir: &Path, experiment: Experiment) -> Result<()> {
    match experiment {
        Experiment::Variance => {
            let v = phase(cfg, dir, "diag_variance", || {
                Ok((vec![diag::VARIANCE_CSV.into()], diag::variance_experiment(cfg, dir)?))
            })?;
            println!(
                "cgru variance below ddpo in {}/{} bootstrap replicates",
                v.cgru_wins(),
                v.replicates.len()
            );
        }
        Experiment::Unbiasedness => {
            let u = phase(cfg, dir, "diag_unbiasedness", || {
                Ok((vec![diag::TOY_CSV.into(), diag::BTERM_CSV.into()], diag::unbiasedness(cfg, dir)?))
            })?;
            for t in &u.toy {
                println!(
                    "toy {} b={}: {:.4} ± {:.4} (analytic {}, {:.2} se)",
                    t.estimator.name(),
                    t.baseline,
                    t.mean,
                    t.std_err,
                    t.analytic,
                    t.z()
                );
            }
            println!("n,b_norm,grad_norm,ratio");
            for b in &u.baseline_terms {
                println!("{},{},{},{}", b.n, b.b_norm, b.grad_norm, b.ratio);
            }
        }
        Experiment::Ablation => {
            let rows = phase(cfg, dir, "diag_ablation", || {
                Ok((vec![diag::ABLATION_CSV.into()], diag::ablation(cfg, dir)?))
            })?;
            let wins = rows.iter().filter(|r| r.aware_mse < r.plain_mse).count();
            println!("timestep-aware critic better on {wins}/{} seeds", rows.len());
        }
        Experiment::BaselineOptimum => {
            let b = phase(cfg, dir, "diag_baseline_optimum", || {
                Ok((vec![diag::BASELINE_CSV.into()], diag::baseline_optimum(cfg, dir)?))
            })?;
            for (b, v) in &b.grid {
                println!("b={b:.4}: variance {v:.4}");
            }
            println!("mean reward {:.4} is the best baseline: {}", b.mean_reward, b.mean_is_best());
        }
        Experiment::Fidelity => {
            let probes = phase(cfg, dir, "diag_fidelity", || {
                Ok((vec![diag::FIDELITY_CSV.into()], diag::critic_fidelity(cfg, dir)?))
            })?;
            let ok = probes.iter().filter(|p| p.abs_err() <= FIDELITY_TOLERANCE).count();
            println!("{ok}/{} probes within {FIDELITY_TOLERANCE} of the rollout value", probes.len());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    let dir = cfg.out_dir.clone();
    let dir = dir.as_path();
    match cli.command {
        Command::Pretrain => phase(&cfg, dir, "pretrain", || Ok((phases::run_pretrain(&cfg, dir)?, ()))),
        Command::Classifier => phase(&cfg, dir, "classifier", || Ok((phases::run_classifier(&cfg, dir)?, ()))),
        Command::Critic => phase(&cfg, dir, "critic", || Ok((phases::run_critic(&cfg, dir)?, ()))),
        Command::Unlearn { method } => {
            let m = Method::from(method);
            phase(&cfg, dir, &format!("unlearn_{m}"), || Ok((phases::run_unlearn(&cfg, dir, m)?, ())))
        }
        Command::Eval => {
            let reports = phase(&cfg, dir, "eval", || phases::run_eval(&cfg, dir))?;
            for (name, r) in reports {
                println!("[{name}]\n{r}");
            }
            Ok(())
        }
        Command::Diag { experiment } => run_diag(&cfg, dir, experiment),
        Command::Full => {
            let manifest = run_full(&cfg, dir)?;
            println!("{}", emit_report(dir)?);
            println!("{} artifacts recorded in {}", manifest.artifacts.len(), dir.display());
            Ok(())
        }
        Command::Report => {
            let _lock = RunLock::acquire(dir)?;
            println!("{}", emit_report(dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
