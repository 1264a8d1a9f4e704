//! Command line shell over the harness library. Progress goes to stderr;
//! data (CSV, report tables) goes to stdout or the requested file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use apfed_cli::config::{parse_f64_list, resolve_seed, ConfigError, ExperimentConfig};
use apfed_cli::metrics::{render_csv, write_csv, CsvTable};
use apfed_cli::report::summarize;
use apfed_cli::runner::{
    run_ablation, run_experiment, serve_passive, sweep_csv, sweep_lambda, PassiveEndpoint,
    RunOutput,
};
use apfed_core::checkpoint::Checkpoint;
use apfed_core::protocol::{AblateMode, PassiveObjective};

type CmdError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "apfed", version, about = "Vertical federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; write metrics CSV and a model checkpoint.
    Train(TrainArgs),
    /// Run one passive participant over TCP until its session ends.
    ServePassive(ServePassiveArgs),
    /// Score a stored feature-concatenation model with clients absent.
    Ablate(AblateArgs),
    /// Train once per gradient weight, tabulate final accuracy.
    SweepLambda(SweepArgs),
    /// Summarize metrics CSVs into a per-method accuracy table.
    Report(ReportArgs),
}

/// Experiment settings. Every flag overrides the config file; omitted
/// flags keep the file's values, or the defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// apfed-r | apfed-c | tvfl | singlevl.
    #[arg(long)]
    method: Option<String>,
    /// mnist | fmnist | synthetic.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the IDX files.
    #[arg(long)]
    data_dir: Option<String>,
    /// Party count and 1-based label holder, e.g. 2-1.
    #[arg(long)]
    split: Option<String>,
    /// Gradient weight(s), comma separated; a single value broadcasts.
    #[arg(long)]
    lambda: Option<String>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Falls back to the config file, then APFED_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    /// inproc | tcp.
    #[arg(long)]
    transport: Option<String>,
    /// Bind here and wait for passives to dial in (tcp train).
    #[arg(long)]
    listen: Option<String>,
    /// Peer endpoints, comma separated (tcp).
    #[arg(long)]
    connect: Option<String>,
    /// Representation width crossing the wire.
    #[arg(long)]
    latent: Option<usize>,
    /// Hidden layer width of every MLP.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Training samples to keep; 0 keeps all.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Test samples to keep; 0 keeps all.
    #[arg(long)]
    test_limit: Option<usize>,
}

/// True if the text sets `seed` itself, which outranks the env fallback.
fn file_sets_seed(text: &str) -> bool {
    text.lines().any(|line| {
        let line = line.trim();
        !line.starts_with('#')
            && line
                .split_once('=')
                .is_some_and(|(k, _)| k.trim() == "seed")
    })
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig, CmdError> {
        let (mut cfg, file_seed) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                let cfg = ExperimentConfig::parse(&text)?;
                let file_seed = file_sets_seed(&text).then_some(cfg.seed);
                (cfg, file_seed)
            }
            None => (ExperimentConfig::default(), None),
        };
        cfg.seed = resolve_seed(self.seed, file_seed);

        let overrides: [(&str, Option<String>); 18] = [
            ("method", self.method.clone()),
            ("dataset", self.dataset.clone()),
            ("data_dir", self.data_dir.clone()),
            ("split", self.split.clone()),
            ("lambda", self.lambda.clone()),
            ("tau", self.tau.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("transport", self.transport.clone()),
            ("listen", self.listen.clone()),
            ("connect", self.connect.clone()),
            ("latent", self.latent.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("momentum", self.momentum.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("train_limit", self.train_limit.map(|v| v.to_string())),
            ("test_limit", self.test_limit.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                cfg.apply(key, &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Metrics CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<String>,
    /// Model checkpoint path.
    #[arg(long)]
    model_out: Option<String>,
}

#[derive(Args)]
struct ServePassiveArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// recon | contrastive.
    #[arg(long)]
    loss: String,
    /// Port to listen on; the active dials in.
    #[arg(long)]
    port: Option<u16>,
    /// 1-based view this process holds (default: first passive view).
    #[arg(long)]
    view: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// zero | avg | random.
    #[arg(long)]
    mode: String,
    /// Checkpoint written by train --model-out.
    #[arg(long)]
    model: PathBuf,
    /// Substitution noise seed (random mode).
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Override the stored dataset directory.
    #[arg(long)]
    data_dir: Option<String>,
    /// Result CSV path (stdout summary otherwise).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Weights to sweep, comma separated.
    #[arg(long)]
    values: String,
    /// Sweep CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSVs from train runs.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn print_progress(output: &RunOutput) {
    for r in &output.records {
        eprintln!(
            "[{}] epoch {:>3}  loss {:.5}  test acc {:.4}  ({} ms, {} B out, {} B in)",
            r.method,
            r.epoch,
            r.loss_active,
            r.test_accuracy,
            r.wall_ms,
            r.bytes_sent,
            r.bytes_received
        );
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CmdError> {
    let mut cfg = args.config.build()?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(path) = &args.model_out {
        cfg.model_out = path.clone();
    }
    let output = run_experiment(&cfg)?;
    print_progress(&output);
    if cfg.out.is_empty() {
        print!("{}", render_csv(&output.records)?);
    } else {
        write_csv(&cfg.out, &output.records)?;
        eprintln!("metrics written to {}", cfg.out);
    }
    if !cfg.model_out.is_empty() {
        output.checkpoint.save(&cfg.model_out)?;
        eprintln!("model written to {}", cfg.model_out);
    }
    eprintln!("final test accuracy {:.4}", output.final_accuracy());
    Ok(())
}

fn cmd_serve_passive(args: &ServePassiveArgs) -> Result<(), CmdError> {
    let cfg = args.config.build()?;
    let objective = match args.loss.as_str() {
        "recon" => PassiveObjective::Reconstruction,
        "contrastive" => PassiveObjective::Contrastive { tau: cfg.tau },
        other => {
            return Err(
                ConfigError(format!("unknown loss {other:?}, expected recon|contrastive")).into(),
            )
        }
    };
    let active_view = cfg.split.active_index() + 1;
    let view = match args.view {
        Some(v) => v,
        None => (1..=cfg.split.views)
            .find(|&v| v != active_view)
            .expect("a valid split has at least two views"),
    };
    if view == active_view {
        return Err(ConfigError(format!("view {view} belongs to the active party")).into());
    }
    // Position of `view` among the passive views, for the default seed.
    let p = (1..=cfg.split.views)
        .filter(|&v| v != active_view)
        .position(|v| v == view)
        .ok_or_else(|| ConfigError(format!("view {view} out of range")))?;
    let init_seed = match args.config.seed {
        Some(seed) => seed,
        None => cfg.passive_seed(p),
    };
    let endpoint = match (args.port, cfg.connect.first()) {
        (Some(port), _) => PassiveEndpoint::Listen(port),
        (None, Some(addr)) => PassiveEndpoint::Connect(addr.clone()),
        (None, None) => {
            return Err(ConfigError("give --port to listen or --connect to dial".into()).into())
        }
    };
    match &endpoint {
        PassiveEndpoint::Listen(port) => {
            eprintln!("serving view {view} ({}) on 127.0.0.1:{port}", args.loss)
        }
        PassiveEndpoint::Connect(addr) => {
            eprintln!("serving view {view} ({}), dialing {addr}", args.loss)
        }
    }
    serve_passive(&cfg, view, endpoint, objective, init_seed)?;
    eprintln!("session complete");
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), CmdError> {
    let mode = AblateMode::parse(&args.mode).ok_or_else(|| {
        ConfigError(format!(
            "unknown mode {:?}, expected zero|avg|random",
            args.mode
        ))
    })?;
    let ckpt = Checkpoint::load(&args.model)?;
    let report = run_ablation(&ckpt, mode, args.noise_seed, args.data_dir.as_deref())?;
    let csv = format!(
        "method,mode,present_view,full_accuracy,ablated_accuracy\n{},{},{},{},{}\n",
        report.method_name(),
        report.mode.as_str(),
        report.present_view,
        report.full_accuracy,
        report.ablated_accuracy
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            eprintln!("ablation written to {path}");
        }
        None => print!("{csv}"),
    }
    eprintln!(
        "full {:.4} -> {} {:.4} with only view {} present",
        report.full_accuracy,
        report.method_name(),
        report.ablated_accuracy,
        report.present_view
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CmdError> {
    let cfg = args.config.build()?;
    let values = parse_f64_list(&args.values)?;
    let runs = sweep_lambda(&cfg, &values)?;
    for run in &runs {
        let rec = run.output.records.last().expect("at least one epoch");
        eprintln!(
            "lambda {:<6} final test acc {:.4}",
            run.lambda, rec.test_accuracy
        );
    }
    let csv = sweep_csv(&runs);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            eprintln!("sweep written to {path}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CmdError> {
    let tables = args
        .files
        .iter()
        .map(CsvTable::load)
        .collect::<Result<Vec<_>, _>>()?;
    let report = summarize(&tables)?;
    print!("{}", report.render());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::ServePassive(args) => cmd_serve_passive(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::SweepLambda(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
