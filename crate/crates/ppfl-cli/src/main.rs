//! `ppfl` — privacy-preserving federated load-forecasting simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ppfl_cli::configfile::RunSettings;
use ppfl_cli::manifest::RunManifest;
use ppfl_cli::{csvio, report, runner};
use ppfl_core::data::synth_generate_profiles;
use ppfl_core::federation::Mode;

#[derive(Parser)]
#[command(
    name = "ppfl",
    version,
    about = "Federated training of short-term load forecasters with personalization layers and Laplace-obfuscated shared updates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic heterogeneous client CSVs.
    GenData(GenDataArgs),
    /// Train one scheme and write metrics, telemetry, and a checkpoint.
    Train(TrainArgs),
    /// Train across a privacy-budget grid with shared seed and data.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint against a data directory.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of clients (calibration profiles 1..=8, used in order).
    #[arg(long, default_value_t = 4)]
    clients: usize,
    /// Days of 15-minute data per client.
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Explicit calibration profiles (1-based rows), e.g. `1,2,6,8`.
    #[arg(long, value_delimiter = ',')]
    profiles: Option<Vec<usize>>,
}

#[derive(Args, Clone)]
struct CommonTrainArgs {
    /// Data directory of client_*.csv files.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat key-value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full-scale profile (30-wide states, 4000 rounds) instead of desk scale.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client execution.
    #[arg(long)]
    workers: Option<usize>,
    /// Server rounds K.
    #[arg(long)]
    server_epochs: Option<usize>,
    /// Local minibatch steps per round.
    #[arg(long)]
    client_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    fc_hidden: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    stack: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Interval checkpoint cadence in rounds (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    pooled_batch: Option<usize>,
    /// Partition override: encoder_shared | all_shared.
    #[arg(long)]
    partition: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training scheme: ppfl | local | pooled | fl | personalized.
    #[arg(long)]
    mode: String,
    /// Privacy budget: a positive number, or `off`.
    #[arg(long)]
    epsilon: Option<String>,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Privacy budgets to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0])]
    epsilons: Vec<f64>,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only each client's final N APE points.
    #[arg(long)]
    last_n: Option<usize>,
    /// Evaluate the server's shared block with each client's personal block.
    #[arg(long)]
    server_phi: bool,
}

fn out_dir_override(requested: PathBuf) -> PathBuf {
    match std::env::var_os("PPFL_OUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => requested,
    }
}

fn resolve_settings(common: &CommonTrainArgs, mode: Mode) -> Result<RunSettings> {
    let mut settings = RunSettings::desk(mode, 1);
    if common.paper_scale {
        settings.apply("profile", "full")?;
        settings.apply("mode", mode.as_str())?;
    }
    if let Some(path) = &common.config {
        settings.apply_file(path)?;
    }
    // Flags win over the file.
    settings.apply("mode", mode.as_str())?;
    let mut flag = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            settings.apply(key, &v)?;
        }
        Ok(())
    };
    flag("seed", common.seed.map(|v| v.to_string()))?;
    flag("workers", common.workers.map(|v| v.to_string()))?;
    flag("server_epochs", common.server_epochs.map(|v| v.to_string()))?;
    flag("client_epochs", common.client_epochs.map(|v| v.to_string()))?;
    flag("batch", common.batch.map(|v| v.to_string()))?;
    flag("clip", common.clip.map(|v| v.to_string()))?;
    flag("hidden", common.hidden.map(|v| v.to_string()))?;
    flag("fc_hidden", common.fc_hidden.map(|v| v.to_string()))?;
    flag("window", common.window.map(|v| v.to_string()))?;
    flag("horizon", common.horizon.map(|v| v.to_string()))?;
    flag("stack", common.stack.map(|v| v.to_string()))?;
    flag("eval_every", common.eval_every.map(|v| v.to_string()))?;
    flag("checkpoint_every", common.checkpoint_every.map(|v| v.to_string()))?;
    flag("pooled_batch", common.pooled_batch.map(|v| v.to_string()))?;
    flag("partition", common.partition.clone())?;
    Ok(settings)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let out = out_dir_override(args.out);
    let profiles: Vec<usize> = match &args.profiles {
        Some(rows) => {
            for r in rows {
                if *r == 0 {
                    bail!("profiles are 1-based calibration rows");
                }
            }
            rows.iter().map(|r| r - 1).collect()
        }
        None => (0..args.clients).collect(),
    };
    let series = synth_generate_profiles(&profiles, args.days, args.seed)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut config = std::collections::BTreeMap::new();
    config.insert("clients".to_string(), series.len().to_string());
    config.insert("days".to_string(), args.days.to_string());
    config.insert(
        "profiles".to_string(),
        profiles.iter().map(|p| (p + 1).to_string()).collect::<Vec<_>>().join(","),
    );
    let mut manifest = RunManifest::new("gen-data", args.seed, 1, config);
    for s in &series {
        let name = format!("client_{}.csv", s.client_id);
        let path = out.join(&name);
        csvio::write_series(&path, s)?;
        manifest.fingerprint_file(&path)?;
        manifest.artifacts.push(name);
        println!("wrote client_{}.csv ({} rows)", s.client_id, s.len());
    }
    manifest.artifacts.push("manifest.json".to_string());
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mode: Mode = args.mode.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut settings = resolve_settings(&args.common, mode)?;
    if let Some(eps) = &args.epsilon {
        settings.apply("epsilon", eps)?;
    }
    settings.cfg.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let out = out_dir_override(args.common.out.clone());
    let datasets = runner::load_datasets(&settings, &args.common.data)?;
    println!(
        "training mode={} epsilon={} clients={} rounds={} workers={}",
        settings.cfg.mode,
        settings.cfg.dp.epsilon,
        datasets.len(),
        settings.cfg.server_epochs,
        settings.workers
    );
    let outcome = runner::train_and_evaluate(&settings, datasets)?;
    runner::write_train_outputs(&out, &settings, &outcome, &args.common.data)?;
    println!(
        "done: aggregate MASE {:.4}, MAPE {:.2}% -> {}",
        outcome.report_own.aggregate_mase,
        outcome.report_own.aggregate_mape,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.epsilons.is_empty() {
        bail!("sweep needs at least one privacy budget");
    }
    for eps in &args.epsilons {
        if *eps <= 0.0 {
            bail!("privacy budget must be positive, got {eps}");
        }
    }
    let settings = resolve_settings(&args.common, Mode::Ppfl)?;
    let out = out_dir_override(args.common.out.clone());
    let datasets = runner::load_datasets(&settings, &args.common.data)?;
    println!(
        "sweeping {} budgets, clients={} rounds={} workers={}",
        args.epsilons.len(),
        datasets.len(),
        settings.cfg.server_epochs,
        settings.workers
    );
    let rows = runner::sweep(&settings, &args.epsilons, &datasets)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest =
        RunManifest::new("sweep", settings.cfg.seed, settings.workers, settings.to_entries());
    for path in std::fs::read_dir(&args.common.data)? {
        let path = path?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            manifest.fingerprint_file(&path)?;
        }
    }
    let sweep_rows: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|(eps, report)| (*eps, report.aggregate_mase, report.aggregate_mape))
        .collect();
    report::write_sweep(&out.join("sweep.csv"), &sweep_rows)?;
    manifest.artifacts.push("sweep.csv".to_string());
    for (eps, report) in &rows {
        let name = format!("eval_report_eps_{eps}.csv");
        report::write_eval_report(&out.join(&name), report)?;
        manifest.artifacts.push(name);
        println!("epsilon={eps}: MASE {:.4}, MAPE {:.2}%", report.aggregate_mase, report.aggregate_mape);
    }
    manifest.artifacts.push("manifest.json".to_string());
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let settings = RunSettings::desk(Mode::Ppfl, 1);
    let out = out_dir_override(args.out);
    let outcome =
        runner::evaluate_checkpoint(&settings, &args.checkpoint, &args.data, args.server_phi)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    report::write_eval_report(&out.join("eval_report.csv"), &outcome.report)?;
    report::write_ape(&out.join("ape.csv"), &outcome.ape, args.last_n)?;
    println!(
        "evaluated {} clients: aggregate MASE {:.4}, MAPE {:.2}%",
        outcome.report.rows.len(),
        outcome.report.aggregate_mase,
        outcome.report.aggregate_mape
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
