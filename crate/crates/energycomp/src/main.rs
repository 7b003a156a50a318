use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use energycomp::config::{DatasetSpec, ExperimentConfig, Method};
use energycomp::dataset::{write_synthetic, DatasetFormat, SynthSpec};
use energycomp::harness::{collect_records, emit_report, run_experiment, ExperimentRecord};

#[derive(Parser)]
#[command(name = "energycomp", version, about = "Train, compress and energy-meter small neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model.
    Train(RunArgs),
    /// Compress the baseline model and retrain it.
    Compress {
        #[arg(long, value_enum)]
        method: CompressMethod,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Collect the records in the output directory into report.csv and report.json.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the records; also where the report goes.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic MNIST-shaped dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 9000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 28)]
        side: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = SynthFormat::Idx)]
        format: SynthFormat,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CompressMethod {
    Stego,
    Prune,
    Lowrank,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthFormat {
    Idx,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Baseline model to compress (defaults to <out>/baseline.nncm).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory; the format is detected from its files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(self, method: Method) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.data) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(data)) => ExperimentConfig::new(DatasetSpec::detect(data)),
            (None, None) => bail!("either --config or --data is required"),
        };
        if let Some(data) = self.data {
            let format = cfg.dataset.format;
            cfg.dataset = DatasetSpec::detect(data);
            if self.config.is_some() {
                cfg.dataset.format = format;
            }
        }
        if let Some(out) = self.out {
            cfg.out = out;
        }
        if self.model.is_some() {
            cfg.model = self.model;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        cfg.method = method;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => print_record(&run_experiment(&args.resolve(Method::Baseline)?)?),
        Command::Compress { method, run } => {
            let method = match method {
                CompressMethod::Stego => Method::Stego,
                CompressMethod::Prune => Method::Prune,
                CompressMethod::Lowrank => Method::Lowrank,
            };
            print_record(&run_experiment(&run.resolve(method)?)?)
        }
        Command::Report { config, out } => {
            let dir = match (out, config) {
                (Some(out), _) => out,
                (None, Some(cfg)) => ExperimentConfig::load(&cfg)?.out,
                (None, None) => bail!("either --config or --out is required"),
            };
            let records = collect_records(&dir)?;
            if records.is_empty() {
                bail!("no *.record.json files in {}", dir.display());
            }
            let (csv_path, json_path) = (dir.join("report.csv"), dir.join("report.json"));
            emit_report(&records, &csv_path, &json_path)?;
            println!("{}", csv_path.display());
            println!("{}", json_path.display());
            Ok(())
        }
        Command::Synth {
            out,
            train,
            test,
            side,
            classes,
            format,
            seed,
        } => {
            if !(2..=256).contains(&classes) {
                bail!("--classes must lie in 2..=256");
            }
            let spec = SynthSpec {
                train,
                test,
                side,
                classes,
                seed,
            };
            let format = match format {
                SynthFormat::Idx => DatasetFormat::Idx,
                SynthFormat::Csv => DatasetFormat::Csv,
            };
            for path in write_synthetic(&out, &spec, format).context("writing synthetic dataset")? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn print_record(r: &ExperimentRecord) -> anyhow::Result<()> {
    println!(
        "{} {}: compression {:.4}, accuracy {:.4} -> {:.4}, {} epochs, {:.1}s, {:.3e} kWh (dc {:.3e})",
        r.model,
        r.method,
        r.compression_rate,
        r.accuracy_baseline,
        r.accuracy_compressed,
        r.epochs,
        r.train_seconds,
        r.kwh_it,
        r.kwh_dc
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
