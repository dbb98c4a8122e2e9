use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eoslab::runner::{self, Experiment, ModelKind, RunConfig, RunDir, Scale};

#[derive(Parser)]
#[command(
    name = "eoslab",
    version,
    about = "Synthetic eosinophil cohorts and domain-adaptive segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Defaults to the echo in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Overrides the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Models to train: baseline, mdan, ddpm or all.
    #[arg(long)]
    experiment: Option<Experiment>,
    /// Apply the [desk] overrides (patch size, chain length, epochs).
    #[arg(long, conflicts_with = "full_scale")]
    desk_scale: bool,
    /// Use patch size, chain length and epochs exactly as configured.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort.
    GenData(Common),
    /// Train the scoring network and rank patients by expected entropy.
    Uncertainty(Common),
    /// Build the patient similarity graph (DOT and TSV).
    Graph(Common),
    /// Split patients into uncertainty tertiles.
    Partition(Common),
    /// Train the MC-dropout baseline on every combination.
    TrainBaseline(Common),
    /// Train the multi-source adversarial network on every combination.
    TrainMdan(Common),
    /// Train the diffusion models on every combination.
    TrainDdpm(Common),
    /// Average the per-combination metrics into the results table.
    Evaluate(Common),
    /// Print the results of a finished run.
    Report {
        #[arg(long, default_value = "runs/default")]
        out: PathBuf,
    },
    /// Every stage in order.
    RunAll(Common),
}

fn open(c: &Common) -> eoslab::Result<RunDir> {
    let has_overrides = c.seed.is_some() || c.experiment.is_some() || c.desk_scale || c.full_scale;
    let config = match (&c.config, has_overrides) {
        (Some(path), _) => Some(RunConfig::load(path)?),
        (None, true) => {
            let echo = c.out.join(runner::CONFIG_FILE);
            Some(if echo.exists() {
                RunConfig::load(&echo)?
            } else {
                RunConfig::default()
            })
        }
        (None, false) => None,
    };
    let config = config.map(|mut cfg| {
        if let Some(s) = c.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(e) = c.experiment {
            cfg.experiment = e;
        }
        if c.desk_scale {
            cfg.scale = Scale::Desk;
        }
        if c.full_scale {
            cfg.scale = Scale::Full;
        }
        cfg
    });
    RunDir::open(&c.out, config)
}

fn print_results(records: &[eoslab::metrics::MetricsRecord]) {
    print!("{}", eoslab::metrics::results_table(records));
}

fn run(cli: Cli) -> eoslab::Result<()> {
    match cli.command {
        Command::GenData(c) => runner::gen_data(&open(&c)?),
        Command::Uncertainty(c) => runner::uncertainty(&open(&c)?).map(drop),
        Command::Graph(c) => runner::graph(&open(&c)?),
        Command::Partition(c) => runner::partition(&open(&c)?).map(drop),
        Command::TrainBaseline(c) => {
            runner::train(&open(&c)?, ModelKind::Baseline).map(|r| print_results(&r))
        }
        Command::TrainMdan(c) => {
            runner::train(&open(&c)?, ModelKind::Mdan).map(|r| print_results(&r))
        }
        Command::TrainDdpm(c) => {
            runner::train(&open(&c)?, ModelKind::Ddpm).map(|r| print_results(&r))
        }
        Command::Evaluate(c) => runner::evaluate(&open(&c)?).map(|r| print_results(&r)),
        Command::Report { out } => runner::report(&out).map(|text| print!("{text}")),
        Command::RunAll(c) => runner::run_all(&open(&c)?).map(|r| print_results(&r)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
