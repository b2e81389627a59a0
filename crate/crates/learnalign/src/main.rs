//! Command-line driver for the selection pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use learnalign::error::{Error, Result};
use learnalign::experiment::{self, EvalMode, Method};
use learnalign::features::{self, ProjectionScheme, ProjectionSpec};
use learnalign::grpo::{self, GRPOConfig};
use learnalign::mdp_env::{self, TaskEnv, TaskKind};
use learnalign::policy::PolicyParams;
use learnalign::scoring::{self, AblationScorer, ScoreMatrix};
use learnalign::seeding;
use learnalign::{baselines, Error as LaError};

#[derive(Parser)]
#[command(name = "learnalign", version, about = "Gradient-alignment data selection for RL post-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task set as line-delimited JSON.
    GenData(GenDataArgs),
    /// Warmup-train a policy on a random subset of the data.
    Warmup(WarmupArgs),
    /// Extract per-datum projected gradients and success rates.
    Features(FeaturesArgs),
    /// Build a score matrix from a feature store.
    Score(ScoreArgs),
    /// Select the top N data by a configured method.
    Select(SelectArgs),
    /// GRPO-train a policy, optionally restricted to a selection.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a task set.
    Eval(EvalArgs),
    /// Run the full pipeline for every configured method and size.
    Run(ConfigArg),
    /// Run the staged curriculum.
    Staged(ConfigArg),
    /// Emit the comparison table and training curves for an output dir.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct WarmupArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Base checkpoint; initialized fresh from the config when omitted.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Warmup subset size; defaults to the config's warmup size.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the warmup subset ids (JSON).
    #[arg(long)]
    ids_out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Warm-up checkpoint (gradient probe point).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Projected dimension.
    #[arg(long, default_value_t = 512)]
    d: usize,
    /// Rollouts per datum.
    #[arg(long, default_value_t = 8)]
    g: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Reference checkpoint for the KL coefficient; defaults to the probe
    /// checkpoint itself (making the KL term vanish).
    #[arg(long)]
    r#ref: Option<PathBuf>,
    #[arg(long, value_parser = parse_scheme, default_value = "rademacher")]
    scheme: ProjectionScheme,
    #[arg(long, default_value_t = 64)]
    horizon: usize,
    #[arg(long, default_value_t = 0.04)]
    kl_beta: f64,
}

fn parse_scheme(s: &str) -> std::result::Result<ProjectionScheme, String> {
    match s {
        "rademacher" => Ok(ProjectionScheme::Rademacher),
        "gaussian" => Ok(ProjectionScheme::Gaussian),
        other => Err(format!("unknown projection scheme: {other}")),
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// learnalign | no-learnability | feature-similarity
    #[arg(long, default_value = "learnalign")]
    mode: String,
    /// Checkpoint providing the embedding table (feature-similarity only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task set matching the store ids (feature-similarity only).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, default_value = "learnalign")]
    method: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Score matrix (matrix-based methods).
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Task set (baseline methods).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Probe checkpoint (perplexity/IFD baselines).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exclude the diagonal from row averages.
    #[arg(long)]
    exclude_diagonal: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict training to a persisted selection.
    #[arg(long)]
    subset: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Override the config's step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the derived training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// greedy | sampled
    #[arg(long, default_value = "greedy")]
    mode: String,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 64)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn write_json_line<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    std::fs::write(path, format!("{json}\n"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let kind: TaskKind = args.kind.parse()?;
            let tasks = mdp_env::generate_task_set(kind, args.count, args.seed)?;
            mdp_env::write_tasks(&args.out, &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), args.out.display());
            Ok(())
        }
        Command::Warmup(args) => {
            let cfg = experiment::load_config(&args.config)?;
            let data = mdp_env::read_tasks(&args.data)?;
            let base = match &args.base {
                Some(path) => PolicyParams::load(path)?,
                None => PolicyParams::init(cfg.policy.clone())?,
            };
            let m = args.m.unwrap_or_else(|| {
                cfg.warmup
                    .size
                    .unwrap_or_else(|| ((data.len() as f64 * 0.04).ceil() as usize).max(1))
            });
            let warm_cfg = GRPOConfig {
                steps: cfg.warmup.steps,
                ..cfg.grpo.clone()
            };
            let outcome = features::warmup(
                base,
                &data,
                m,
                &warm_cfg,
                &cfg.env,
                seeding::derive(cfg.master_seed, &[seeding::tag("warmup")]),
            )?;
            outcome.params.save(&args.out)?;
            if let Some(ids_out) = &args.ids_out {
                write_json_line(ids_out, &outcome.subset_ids)?;
            }
            if let Some(metrics) = &args.metrics {
                let lines: Vec<String> = outcome
                    .metrics
                    .iter()
                    .map(|m| serde_json::to_string(m).unwrap())
                    .collect();
                std::fs::write(metrics, lines.join("\n") + "\n")?;
            }
            println!("warmup checkpoint written to {}", args.out.display());
            Ok(())
        }
        Command::Features(args) => {
            let warm = PolicyParams::load(&args.checkpoint)?;
            let reference = match &args.r#ref {
                Some(path) => PolicyParams::load(path)?,
                None => warm.clone(),
            };
            let data = mdp_env::read_tasks(&args.data)?;
            let env = TaskEnv {
                horizon: args.horizon,
                ..TaskEnv::default()
            };
            let grpo_cfg = GRPOConfig {
                group_size: args.g,
                kl_beta: args.kl_beta,
                ..GRPOConfig::default()
            };
            let spec = ProjectionSpec {
                dim: args.d,
                seed: args.seed,
                scheme: args.scheme,
            };
            let store =
                features::extract_features(&warm, &reference, &data, &env, &grpo_cfg, &spec, args.seed)?;
            features::save_store(&store, &args.out)?;
            println!(
                "wrote {} feature records (d={}) to {}",
                store.len(),
                store.dim,
                args.out.display()
            );
            Ok(())
        }
        Command::Score(args) => {
            let store = features::load_store(&args.features)?;
            let matrix = match args.mode.as_str() {
                "learnalign" => scoring::score_matrix(&store),
                "no-learnability" | "ablation-no-learnability" => {
                    scoring::ablation_score(&store, &AblationScorer::NoLearnability)?
                }
                "feature-similarity" | "ablation-feature-similarity" => {
                    let ckpt = args.checkpoint.as_ref().ok_or_else(|| {
                        Error::Config("feature-similarity needs --checkpoint".into())
                    })?;
                    let data_path = args
                        .data
                        .as_ref()
                        .ok_or_else(|| Error::Config("feature-similarity needs --data".into()))?;
                    let params = PolicyParams::load(ckpt)?;
                    let data = mdp_env::read_tasks(data_path)?;
                    scoring::ablation_score(
                        &store,
                        &AblationScorer::FeatureSimilarity {
                            params: &params,
                            data: &data,
                        },
                    )?
                }
                other => return Err(Error::Config(format!("unknown score mode: {other}"))),
            };
            matrix.save(&args.out)?;
            println!("wrote {}x{} score matrix to {}", matrix.n(), matrix.n(), args.out.display());
            Ok(())
        }
        Command::Select(args) => {
            let method: Method = args.method.parse()?;
            let selection = match method {
                Method::Learnalign | Method::NoLearnability | Method::FeatureSimilarity => {
                    let matrix_path = args
                        .matrix
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("{method} needs --matrix")))?;
                    let matrix = ScoreMatrix::load(matrix_path)?;
                    scoring::select_top_n_opts(&matrix, args.n, !args.exclude_diagonal)?
                }
                baseline => {
                    let data_path = args
                        .data
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("{method} needs --data")))?;
                    let data = mdp_env::read_tasks(data_path)?;
                    match baseline {
                        Method::Random => baselines::random_select(&data, args.n, args.seed)?,
                        Method::TokenLength => baselines::token_length_select(
                            &data,
                            args.n,
                            baselines::LengthOrder::Descending,
                        )?,
                        Method::PplTop | Method::PplMiddle | Method::Ifd => {
                            let ckpt = args.checkpoint.as_ref().ok_or_else(|| {
                                Error::Config(format!("{method} needs --checkpoint"))
                            })?;
                            let params = PolicyParams::load(ckpt)?;
                            match baseline {
                                Method::PplTop => baselines::ppl_top_select(&data, &params, args.n)?,
                                Method::PplMiddle => {
                                    baselines::ppl_middle_select(&data, &params, args.n)?
                                }
                                _ => baselines::ifd_select(&data, &params, args.n)?,
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            };
            write_json_line(&args.out, &selection)?;
            println!("selected {} ids -> {}", selection.n, args.out.display());
            Ok(())
        }
        Command::Train(args) => {
            let cfg = experiment::load_config(&args.config)?;
            let data = mdp_env::read_tasks(&args.data)?;
            let params = PolicyParams::load(&args.checkpoint)?;
            let subset: Vec<mdp_env::TaskDatum> = match &args.subset {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    let selection: scoring::SelectionResult = serde_json::from_str(text.trim())
                        .map_err(|e| Error::Config(format!("bad selection {path:?}: {e}")))?;
                    let ids: HashSet<u64> = selection.ids.iter().copied().collect();
                    data.iter().filter(|d| ids.contains(&d.id)).cloned().collect()
                }
                None => data.clone(),
            };
            if subset.is_empty() {
                return Err(Error::Config("training subset is empty".into()));
            }
            let train_cfg = GRPOConfig {
                steps: args.steps.unwrap_or(cfg.grpo.steps),
                master_seed: args
                    .seed
                    .unwrap_or_else(|| seeding::derive(cfg.master_seed, &[seeding::tag("train")])),
                ..cfg.grpo.clone()
            };
            let (trained, metrics) = grpo::train(params, &subset, &train_cfg, &cfg.env)?;
            trained.save(&args.out)?;
            if let Some(path) = &args.metrics {
                let lines: Vec<String> = metrics
                    .iter()
                    .map(|m| serde_json::to_string(m).unwrap())
                    .collect();
                std::fs::write(path, lines.join("\n") + "\n")?;
            }
            let last = metrics.last();
            println!(
                "trained {} steps on {} data (final mean reward {:.4}) -> {}",
                metrics.len(),
                subset.len(),
                last.map_or(0.0, |m| m.mean_reward),
                args.out.display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            let params = PolicyParams::load(&args.checkpoint)?;
            let data = mdp_env::read_tasks(&args.data)?;
            let env = TaskEnv {
                horizon: args.horizon,
                ..TaskEnv::default()
            };
            let mode = match args.mode.as_str() {
                "greedy" => EvalMode::Greedy,
                "sampled" => EvalMode::Sampled {
                    k: args.k,
                    temperature: args.temperature,
                },
                other => return Err(Error::Config(format!("unknown eval mode: {other}"))),
            };
            let accuracy = experiment::evaluate(&params, &data, &env, mode, args.seed);
            let record = serde_json::json!({
                "mode": args.mode,
                "n_test": data.len(),
                "accuracy": accuracy,
            });
            if let Some(out) = &args.out {
                std::fs::write(out, format!("{record}\n"))?;
            }
            println!("{record}");
            Ok(())
        }
        Command::Run(args) => {
            let cfg = experiment::load_config(&args.config)?;
            let reports = experiment::run_pipeline(&cfg)?;
            for r in &reports {
                println!(
                    "{} N={}: greedy {:.4}, pass@1 {:.4}",
                    r.method, r.n_selected, r.greedy_accuracy, r.pass1_accuracy
                );
            }
            let paths = experiment::report(&cfg.resolved_out_dir())?;
            println!("table: {}", paths.table.display());
            Ok(())
        }
        Command::Staged(args) => {
            let cfg = experiment::load_config(&args.config)?;
            let stages = experiment::staged_run(&cfg)?;
            for s in &stages {
                println!(
                    "stage {} (N={}): greedy {:.4}, pass@1 {:.4}",
                    s.stage, s.selection.n, s.report.greedy_accuracy, s.report.pass1_accuracy
                );
            }
            Ok(())
        }
        Command::Report(args) => {
            let paths = experiment::report(&args.dir)?;
            println!("table: {}", paths.table.display());
            println!("curves: {}", paths.curves.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(u8::try_from(LaError::exit_code(&err)).unwrap_or(1))
        }
    }
}
