use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use psofed::analysis::{self, ConvergenceConfig, ConvergenceSetup};
use psofed::experiment::{self, ExperimentConfig, Preset};
use psofed::fed::Algorithm;
use psofed::masks::Scheme;
use psofed::Error;

#[derive(Parser)]
#[command(name = "psofed", version, about = "Online federated learning with partial model sharing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its averaged learning curve.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fail when more than this many runs diverge.
        #[arg(long)]
        max_excluded: Option<usize>,
    },
    /// Step-size bound and mean-convergence check at desk scale.
    Analyze(AnalyzeArgs),
    /// Merge learning-curve CSVs into one wide table.
    Compare {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the raw training streams of the first run as CSV.
    DumpData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Samples per client (defaults to the configured round count).
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// TOML file with any subset of the experiment fields; applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Coordinates exchanged per direction (M).
    #[arg(long)]
    shared: Option<usize>,
    #[arg(long)]
    shift: Option<usize>,
    /// Clients selected per round.
    #[arg(long)]
    per_round: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, value_enum)]
    scheme: Option<Scheme>,
    #[arg(long, value_enum)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    test_per_client: Option<usize>,
    #[arg(long)]
    noisy_test: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let preset = toml::to_string(&ExperimentConfig::preset(self.preset))?;
                let mut merged: toml::Table = toml::from_str(&preset)?;
                merged.extend(toml::from_str::<toml::Table>(&text)?);
                ExperimentConfig::from_toml(&toml::to_string(&merged)?)?
            }
            None => ExperimentConfig::preset(self.preset),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(clients, dim, window, shared, per_round, step, scheme, algorithm, rounds, runs, seed, bandwidth, test_per_client, workers);
        if self.shift.is_some() {
            cfg.shift = self.shift;
        }
        if self.noisy_test {
            cfg.noisy_test = true;
        }
        if self.out.is_some() {
            cfg.output = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Step size to check; defaults to half the computed bound.
    #[arg(long)]
    step: Option<f64>,
    /// Step size as a multiple of the computed bound.
    #[arg(long, conflicts_with = "step")]
    step_factor: Option<f64>,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    shared: Option<usize>,
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    per_round: Option<usize>,
    #[arg(long, value_enum)]
    scheme: Option<Scheme>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    correlation_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the trial-averaged error norm per round as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn open_output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, max_excluded } => {
            let cfg = config.resolve()?;
            let result = experiment::run_experiment(&cfg)?;
            match &cfg.output {
                Some(path) => {
                    let meta = result.save(path)?;
                    eprintln!(
                        "{}: {} rounds, {} runs completed, {} excluded -> {} ({})",
                        result.label,
                        cfg.rounds,
                        result.completed_runs,
                        result.excluded.len(),
                        path.display(),
                        meta.display()
                    );
                }
                None => experiment::write_curve_csv(&result.curve(), io::stdout().lock())?,
            }
            if !result.excluded.is_empty() {
                eprintln!("warning: {} diverged runs excluded from the average", result.excluded.len());
            }
            if let Some(limit) = max_excluded {
                if result.excluded.len() > limit {
                    return Err(Error::InvalidArgument(format!(
                        "{} runs diverged, more than the allowed {limit}",
                        result.excluded.len()
                    )));
                }
            }
            Ok(())
        }
        Command::Analyze(args) => analyze(args),
        Command::Compare { inputs, out } => {
            let curves = inputs.iter().map(|p| experiment::load_curve(p)).collect::<Result<Vec<_>, _>>()?;
            experiment::compare_runs(&curves, open_output(out.as_ref())?)
        }
        Command::DumpData { config, samples } => {
            let cfg = config.resolve()?;
            let samples = samples.unwrap_or(cfg.rounds);
            experiment::dump_data(&cfg, samples, open_output(cfg.output.as_ref())?)
        }
    }
}

fn analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let mut cfg = ConvergenceConfig::default();
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(clients, dim, shared, shift, per_round, scheme, rounds, bandwidth, correlation_samples, seed);
    let setup = ConvergenceSetup::new(&cfg)?;
    let bound = setup.bound.value();
    let step = match (args.step, args.step_factor) {
        (Some(s), _) => s,
        (None, Some(f)) => f * bound,
        (None, None) => 0.5 * bound,
    };
    let recursion = setup.expected_recursion(step)?;
    let report = analysis::verify_with_setup(&setup, step, args.trials)?;

    if let Some(path) = &args.trace {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "mean_error_norm"])?;
        for (n, norm) in report.trajectory.iter().enumerate() {
            w.write_record([(n + 1).to_string(), norm.to_string()])?;
        }
        w.flush()?;
    }

    let mut out = io::stdout().lock();
    writeln!(out, "clients = {}", cfg.clients)?;
    writeln!(out, "dim = {}", cfg.dim)?;
    writeln!(out, "shared = {}", cfg.shared)?;
    writeln!(out, "per_round = {}", cfg.per_round)?;
    writeln!(out, "scheme = \"{}\"", cfg.scheme)?;
    writeln!(out, "step_size_bound = {bound}")?;
    writeln!(out, "step = {step}")?;
    writeln!(out, "step_inside_bound = {}", setup.bound.admits(step))?;
    writeln!(out, "spectral_radius = {}", analysis::spectral_radius(&recursion))?;
    writeln!(out, "two_norm = {}", analysis::two_norm(&recursion))?;
    writeln!(out, "trials = {}", report.trials)?;
    writeln!(out, "rounds = {}", cfg.rounds)?;
    writeln!(out, "diverged_trials = {}", report.diverged_trials)?;
    writeln!(out, "initial_error_norm = {}", report.initial_norm)?;
    writeln!(out, "final_error_norm = {}", report.final_norm)?;
    writeln!(out, "verdict = \"{}\"", report.verdict())?;
    Ok(())
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
