//! Experiment runner CLI: local / federated / centralized runs over the
//! fine-tuning strategies, rank ablations, and the full-scale parameter and
//! communication accounting table.
//!
//! Exit codes: 0 success, 2 config error, 3 training divergence, 4 i/o
//! error. Every random draw in a run derives from `--seed`.

use clap::{Args, Parser, Subcommand};
use fedsam_core::experiment::{
    counts_table, run_ablation, run_experiment, ExperimentConfig, RunError, Setting,
};
use fedsam_core::model::{ModelConfig, Strategy};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedsam", version, about = "Federated fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write results, ledger, and transcript.
    Run(RunArgs),
    /// Run one federated experiment per adapter rank.
    Ablation(AblationArgs),
    /// Print the full-scale parameter/communication table per strategy.
    Counts(CountsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Key = value file applied over the defaults; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    train_per_site: Option<usize>,
    #[arg(long)]
    test_per_site: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lora_scale: Option<f64>,
    /// Divide the adapter forward scale by the rank.
    #[arg(long)]
    scale_by_rank: bool,
    /// Weight clients uniformly instead of by sample count.
    #[arg(long)]
    uniform_weights: bool,
    /// Output directory for results.txt/csv, ledger.csv, transcript.log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated adapter ranks, one federated run each.
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
}

#[derive(Args)]
struct CountsArgs {
    #[arg(long, default_value_t = 32)]
    rank: usize,
    /// Labels including background; 1 and 2 both mean one foreground class.
    #[arg(long, default_value_t = 1)]
    num_classes: usize,
}

fn parse_config_file(path: &PathBuf, cfg: &mut ExperimentConfig) -> Result<Vec<String>, RunError> {
    let text = std::fs::read_to_string(path)?;
    let mut keys = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            RunError::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            RunError::Config(format!(
                "{}:{}: bad {what} value '{value}'",
                path.display(),
                lineno + 1
            ))
        };
        match key {
            "setting" => cfg.setting = Setting::parse(value).ok_or_else(|| bad("setting"))?,
            "strategy" => cfg.strategy = Strategy::parse(value).ok_or_else(|| bad("strategy"))?,
            "rank" => cfg.rank = value.parse().map_err(|_| bad("rank"))?,
            "sites" => cfg.sites = value.parse().map_err(|_| bad("sites"))?,
            "rounds" => cfg.rounds = value.parse().map_err(|_| bad("rounds"))?,
            "local_steps" => cfg.local_steps = value.parse().map_err(|_| bad("local_steps"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "model" => cfg.model = value.to_string(),
            "train_per_site" => {
                cfg.train_per_site = value.parse().map_err(|_| bad("train_per_site"))?
            }
            "test_per_site" => {
                cfg.test_per_site = value.parse().map_err(|_| bad("test_per_site"))?
            }
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
            "lora_scale" => cfg.lora_scale = value.parse().map_err(|_| bad("lora_scale"))?,
            "scale_by_rank" => {
                cfg.scale_by_rank = value.parse().map_err(|_| bad("scale_by_rank"))?
            }
            "uniform_weights" => {
                cfg.uniform_weights = value.parse().map_err(|_| bad("uniform_weights"))?
            }
            "out" => cfg.out = Some(PathBuf::from(value)),
            other => {
                return Err(RunError::Config(format!(
                    "{}:{}: unknown key '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
        keys.push(key.to_string());
    }
    Ok(keys)
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, RunError> {
    let mut cfg = ExperimentConfig::default();
    let file_keys = match &args.config {
        Some(path) => parse_config_file(path, &mut cfg)?,
        None => Vec::new(),
    };

    // Explicit flags override the file; warn when they conflict.
    let warn = |key: &str| {
        if file_keys.iter().any(|k| k == key) {
            eprintln!("warning: --{key} overrides '{key}' from the config file");
        }
    };
    macro_rules! apply {
        ($field:ident, $key:literal) => {
            if let Some(v) = &args.$field {
                warn($key);
                cfg.$field = v.clone();
            }
        };
    }
    if let Some(v) = &args.setting {
        warn("setting");
        cfg.setting = Setting::parse(v)
            .ok_or_else(|| RunError::Config(format!("unknown setting '{v}'")))?;
    }
    if let Some(v) = &args.strategy {
        warn("strategy");
        cfg.strategy = Strategy::parse(v)
            .ok_or_else(|| RunError::Config(format!("unknown strategy '{v}'")))?;
    }
    apply!(rank, "rank");
    apply!(sites, "sites");
    apply!(rounds, "rounds");
    apply!(local_steps, "local_steps");
    apply!(seed, "seed");
    apply!(model, "model");
    apply!(train_per_site, "train_per_site");
    apply!(test_per_site, "test_per_site");
    apply!(batch_size, "batch_size");
    apply!(lr, "lr");
    apply!(lora_scale, "lora_scale");
    if args.scale_by_rank {
        warn("scale_by_rank");
        cfg.scale_by_rank = true;
    }
    if args.uniform_weights {
        warn("uniform_weights");
        cfg.uniform_weights = true;
    }
    if let Some(out) = &args.out {
        warn("out");
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(args) => {
            let cfg = build_config(&args)?;
            let outcome = run_experiment(&cfg)?;
            print!("{}", fedsam_core::experiment::results_text(&outcome));
            if let Some(dir) = &cfg.out {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Ablation(args) => {
            let cfg = build_config(&args.run)?;
            let ranks = if args.ranks.is_empty() {
                let max = cfg.model_config()?.max_lora_rank().max(1);
                let mut defaults: Vec<usize> =
                    [1, 2, max].into_iter().filter(|&r| r <= max).collect();
                defaults.dedup();
                defaults
            } else {
                args.ranks.clone()
            };
            let outcome = run_ablation(&cfg, &ranks)?;
            print!("{}", fedsam_core::experiment::ablation_text(&outcome));
            if let Some(dir) = &cfg.out {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Counts(args) => {
            print!("{}", counts_table(args.rank, args.num_classes));
            let cfg = ModelConfig::vit_b_paper();
            let full_vs_ours = fedsam_core::comm::reduction_ratio(
                Strategy::FullFt,
                Strategy::FlapSam,
                &cfg,
                args.rank,
                args.num_classes,
            );
            let samed_vs_ours = fedsam_core::comm::reduction_ratio(
                Strategy::LoraDecFt,
                Strategy::FlapSam,
                &cfg,
                args.rank,
                args.num_classes,
            );
            println!(
                "full-ft vs flap-sam: {full_vs_ours:.2}x; lora-dec-ft vs flap-sam: {samed_vs_ours:.2}x"
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
