use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fed3cr::datasets::{load_dataset, DataFormat};
use fed3cr::degradation::{
    default_toy_vectors, sweep_random_fixtures, toy_example_report, verify_bound, QuadraticClient,
};
use fed3cr::experiment::{self, load_config, parse_config, ExperimentConfig, SweepParam};
use fed3cr::numerics::DenseMatrix;
use fed3cr::toy::{generate_toy, write_csv, ToySpec};
use fed3cr::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fed3cr", version, about = "Federated recommendation simulator")]
struct Cli {
    /// Bound on parallel client workers (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML config or a manifest.json from an earlier run. Defaults to the toy setup.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,

    /// Dotted overrides, e.g. `--training.lr=0.05` or `eval.top_k=5`. Must follow all other flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration and write manifest, metrics, record and checkpoints.
    Run(ConfigArgs),
    /// Train several variants on the same split and write ablation.csv.
    Ablate {
        /// Comma-separated labels: C0..C6, Fed3CR, Fed3CR-L2, consensus-transfer,
        /// unified-transfer, FedMF, FedMF+ACE.
        #[arg(long, value_delimiter = ',', default_value = "C0,C1,C2,C3,C4,C5,C6,Fed3CR")]
        variants: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One run per value of a hyperparameter; writes sweep.csv.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Consensus-degradation diagnostics; prints a JSON report.
    Degradation(DegradationArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Print client/item/interaction statistics as JSON.
    Stats {
        path: PathBuf,
        #[arg(long, default_value = "movielens-dat")]
        format: String,
        #[arg(long, default_value_t = 1)]
        min_interactions: usize,
    },
    /// Write the synthetic planted-block dataset as CSV.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ToySpec::default().clients)]
        clients: usize,
        #[arg(long, default_value_t = ToySpec::default().items)]
        items: usize,
        #[arg(long, default_value_t = ToySpec::default().blocks)]
        blocks: usize,
        #[arg(long, default_value_t = ToySpec::default().positives)]
        positives: usize,
        #[arg(long, default_value_t = ToySpec::default().noise)]
        noise: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DegradationMode {
    /// Distance bound on quadratic clients.
    Bound,
    /// 2-D aggregation example.
    Toy,
    /// Gradient heterogeneity of a trained model.
    Probe,
}

#[derive(Args, Debug)]
struct DegradationArgs {
    #[arg(long, value_enum, default_value = "bound")]
    mode: DegradationMode,
    /// JSON list of client optima (each a flat vector) for `bound`.
    #[arg(long)]
    optima: Option<PathBuf>,
    /// Check this many random quadratic fixtures instead of one instance.
    #[arg(long)]
    random: Option<usize>,
    #[arg(long, default_value_t = 20)]
    max_clients: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the δ matrix as CSV.
    #[arg(long)]
    delta_csv: Option<PathBuf>,
    /// Config for `probe`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let tok = tok.trim_start_matches('-');
        match tok.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override `{tok}` has no value")))?;
                out.push((tok.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let ov = parse_overrides(overrides)?;
    match path {
        Some(p) => load_config(p, &ov),
        None => parse_config("", false, &ov),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))
}

fn read_optima(path: &Path) -> Result<Vec<QuadraticClient>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
    rows.into_iter()
        .map(|r| Ok(QuadraticClient::new(DenseMatrix::new(1, r.len(), r)?)))
        .collect()
}

fn degradation(args: &DegradationArgs, workers: Option<usize>) -> Result<()> {
    let write_delta = |rows: &[Vec<f64>]| -> Result<()> {
        if let Some(p) = &args.delta_csv {
            std::fs::write(p, experiment::matrix_csv(rows)).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };
    match args.mode {
        DegradationMode::Bound => {
            if let Some(n) = args.random {
                return print_json(&sweep_random_fixtures(args.seed, n, args.max_clients, args.max_dim)?);
            }
            let clients = match &args.optima {
                Some(p) => read_optima(p)?,
                None => [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]
                    .iter()
                    .map(|r| Ok(QuadraticClient::new(DenseMatrix::from_rows(&[*r])?)))
                    .collect::<Result<_>>()?,
            };
            let report = verify_bound(&clients)?;
            write_delta(&report.delta)?;
            print_json(&report)
        }
        DegradationMode::Toy => print_json(&toy_example_report(&default_toy_vectors())?),
        DegradationMode::Probe => {
            let cfg = config(args.config.as_deref(), &args.overrides)?;
            let out = experiment::heterogeneity_probe(&cfg, workers)?;
            write_delta(&out.report.gradient_difference)?;
            print_json(&out)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    if workers == Some(0) {
        return Err(Error::Config("--workers must be >= 1".into()));
    }
    match cli.command {
        Command::Run(a) => {
            let cfg = config(a.config.as_deref(), &a.overrides)?;
            let rec = experiment::run(&cfg, workers, a.force)?;
            print_json(&rec.summary)
        }
        Command::Ablate { variants, cfg: a } => {
            let cfg = config(a.config.as_deref(), &a.overrides)?;
            let rows = experiment::ablate(&cfg, &variants, workers, a.force)?;
            print_json(&rows)
        }
        Command::Sweep { param, values, cfg: a } => {
            let param: SweepParam = param.parse()?;
            let cfg = config(a.config.as_deref(), &a.overrides)?;
            let rows = experiment::sweep(&cfg, param, &values, workers, a.force)?;
            print_json(&rows)
        }
        Command::Dataset { command } => match command {
            DatasetCommand::Stats {
                path,
                format,
                min_interactions,
            } => {
                let format: DataFormat = format.parse()?;
                print_json(&load_dataset(&path, format, min_interactions)?.stats())
            }
            DatasetCommand::Toy {
                out,
                clients,
                items,
                blocks,
                positives,
                noise,
                seed,
            } => {
                let spec = ToySpec {
                    clients,
                    items,
                    blocks,
                    positives,
                    noise,
                    seed,
                };
                write_csv(&out, &generate_toy(&spec)?)
            }
        },
        Command::Degradation(args) => degradation(&args, workers),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
