use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use slowfast::config::{DatasetFormat, ExperimentConfig, Variant};
use slowfast::data::phase_split;
use slowfast::gradcheck::standard_suite;
use slowfast::lifecycle::{load_dataset, prepare, run_lifecycle};
use slowfast::results::{format4, mean_delta, read_results, summarize, write_results_file, RunRecord};

#[derive(Parser)]
#[command(name = "slowfast", version, about = "Slow-fast collaborative sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full lifecycle and write a results CSV.
    Train(TrainArgs),
    /// Summarize a results CSV: per-cell means and the collaboration deltas.
    Eval {
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
    },
    /// Compare analytic and finite-difference gradients for every layer and both full graphs.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Load and split a dataset, then print its statistics.
    InspectSplit {
        #[command(flatten)]
        exp: ExpArgs,
        /// Write the dense-id maps (users.tsv, items.tsv) here.
        #[arg(long)]
        id_maps: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Run every variant (independent, f2s, s2f_full).
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Record real wall-clock seconds (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
    /// Write every exchanged frame (length-prefixed) to this file.
    #[arg(long)]
    message_log: Option<PathBuf>,
}

/// Experiment flags; each overrides the same key from `--config`.
#[derive(Args)]
struct ExpArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `ml-1m/ratings.dat`, used when no dataset path is given.
    #[arg(long, env = "SLOWFAST_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// ml1m, tsv or synthetic.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    l2: Option<String>,
    #[arg(long)]
    mlp_layers: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    slow_epochs: Option<String>,
    #[arg(long)]
    fast_epochs: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated subset of independent,f2s,s2f_full.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    pool_size: Option<String>,
    #[arg(long)]
    expose_k: Option<String>,
    /// simulated or column.
    #[arg(long)]
    exposure_source: Option<String>,
    #[arg(long)]
    n_eval_neg: Option<String>,
    #[arg(long)]
    max_users: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExpArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let flags = [
            ("dataset", &self.dataset),
            ("format", &self.format),
            ("dim", &self.dim),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("l2", &self.l2),
            ("mlp_layers", &self.mlp_layers),
            ("threshold", &self.threshold),
            ("slow_epochs", &self.slow_epochs),
            ("fast_epochs", &self.fast_epochs),
            ("seeds", &self.seeds),
            ("seed", &self.seed),
            ("variants", &self.variant),
            ("pool_size", &self.pool_size),
            ("expose_k", &self.expose_k),
            ("exposure_source", &self.exposure_source),
            ("n_eval_neg", &self.n_eval_neg),
            ("max_users", &self.max_users),
        ];
        let mut overrides: Vec<(String, String)> = flags
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }

        // Fill in the ML-1M path from the data directory before validation.
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_str(&text)?;
        }
        for (k, v) in &overrides {
            cfg.set(k, v)?;
        }
        if cfg.format == DatasetFormat::Ml1m && cfg.dataset.is_empty() {
            if let Some(dir) = &self.data_dir {
                cfg.dataset = dir.join("ml-1m").join("ratings.dat").to_string_lossy().into_owned();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.exp.load()?;
    if args.grid {
        cfg.variants = Variant::ALL.to_vec();
    }
    let prepared = prepare(&cfg)?;
    log::info!(
        "{}: {} users retained ({} dropped), {} items",
        prepared.dataset,
        prepared.split.users.len(),
        prepared.split.dropped_users,
        prepared.split.items.len()
    );
    let outcomes = run_lifecycle(&cfg, &prepared, args.timing)?;
    let records: Vec<RunRecord> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    write_results_file(&records, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.message_log {
        let frames: Vec<Vec<u8>> = outcomes
            .iter()
            .flat_map(|o| o.uplink.iter().chain(&o.downlink).cloned())
            .collect();
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        slowfast::exchange::write_log(std::io::BufWriter::new(f), &frames)?;
    }
    for o in &outcomes {
        println!(
            "{} seed {}: {} messages, {} uploading users",
            o.variant,
            o.seed,
            o.messages(),
            o.uploads.len()
        );
    }
    print_summary(&records);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn print_summary(records: &[RunRecord]) {
    let summaries = summarize(records);
    println!("{:<12} {:<9} {:<6} {:>3} {:>8} {:>5}", "variant", "component", "metric", "k", "mean", "seeds");
    for s in &summaries {
        println!(
            "{:<12} {:<9} {:<6} {:>3} {:>8} {:>5}",
            s.variant,
            s.component,
            s.metric,
            s.k,
            format4(s.mean),
            s.seeds
        );
    }
    let show = |label: &str, d: Option<f64>| {
        if let Some(d) = d {
            println!("{label}: {}", format4(d));
        }
    };
    show(
        "fast hr@5, s2f_full - independent",
        mean_delta(&summaries, "fast", "hr", 5, "s2f_full", "independent"),
    );
    show(
        "slow hr@5, f2s - independent",
        mean_delta(&summaries, "slow", "hr", 5, "f2s", "independent"),
    );
}

fn eval(results: &Path) -> anyhow::Result<()> {
    let f = std::fs::File::open(results).with_context(|| format!("opening {}", results.display()))?;
    let records = read_results(f)?;
    if records.is_empty() {
        bail!("{} has no rows", results.display());
    }
    print_summary(&records);
    Ok(())
}

fn gradcheck(dim: usize, seed: u64) -> anyhow::Result<()> {
    let checks = standard_suite(dim, seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.report.passed() { "ok" } else { "FAILED" };
        println!(
            "{:<20} max rel err {:.3e} (tol {:.0e}) {verdict}",
            c.fragment,
            c.report.max_rel_err(),
            c.report.tolerance
        );
        if !c.report.passed() {
            failed.push(c.fragment);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn inspect_split(exp: ExpArgs, id_maps: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = exp.load()?;
    let ds = load_dataset(&cfg)?;
    let mut split = phase_split(&ds, cfg.min_len);
    if cfg.max_users > 0 {
        split.truncate_users(cfg.max_users);
    }
    let sound = split.users.iter().filter(|u| u.is_temporally_sound()).count();
    let phases_ok = split
        .users
        .iter()
        .all(|u| u.fast().len() == 5 && u.test().len() == 5 && !u.slow().is_empty());
    let interactions = split.users.iter().map(|u| u.len()).sum::<usize>();
    let report = serde_json::json!({
        "dataset": ds.name,
        "parsed": {
            "users": ds.num_users(),
            "items": ds.num_items(),
            "interactions": ds.interactions.len(),
        },
        "split": {
            "users": split.users.len(),
            "items": split.items.len(),
            "clicks": interactions,
            "dropped_users": split.dropped_users,
            "dropped_items": split.dropped_items,
            "phase_sizes_ok": phases_ok,
            "temporally_sound_users": sound,
        },
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = id_maps {
        std::fs::create_dir_all(&dir)?;
        ds.users.write_tsv(std::io::BufWriter::new(std::fs::File::create(dir.join("users.tsv"))?))?;
        ds.items.write_tsv(std::io::BufWriter::new(std::fs::File::create(dir.join("items.tsv"))?))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Eval { results } => eval(&results),
        Command::Gradcheck { dim, seed } => gradcheck(dim, seed),
        Command::InspectSplit { exp, id_maps } => inspect_split(exp, id_maps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}
