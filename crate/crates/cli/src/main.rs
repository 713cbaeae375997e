//! `spikefed` experiment runner.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on an invalid
//! configuration or command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikefed::data::{export_dataset, synth_generate, Dataset, Sample};
use spikefed::energy::{count_ops, estimate_energy, measure_rates};
use spikefed::experiment::{run_to_dir, write_atomic};
use spikefed::model::SavedModel;
use spikefed::{Error, ExperimentConfig, Regime, Result};

#[derive(Parser)]
#[command(name = "spikefed", version, about = "Personalized federated learning with spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured regimes and write all artifacts.
    Run(Overrides),
    /// Check a configuration and print it with defaults resolved.
    Validate(Overrides),
    /// Generate the configured synthetic dataset as a container file.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        /// Destination container file.
        #[arg(long)]
        file: PathBuf,
    },
    /// Price inference energy from a saved SNN on the configured test splits,
    /// or from explicit rates.
    Energy {
        #[command(flatten)]
        overrides: Overrides,
        /// Saved model (`models/*.json` from a run).
        #[arg(long, conflicts_with = "rates")]
        model: Option<PathBuf>,
        /// Comma-separated hidden-layer firing rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct Overrides {
    /// Config file, or a preset name (`default`, `smoke`).
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of pfl-snn, pfl-ann, fl-snn, fl-ann.
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<String>>,
    /// Output directory (for `energy`, a JSON file).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(names) = &self.regimes {
            cfg.regimes = names
                .iter()
                .map(|n| n.parse::<Regime>().map_err(|e| Error::config("regimes", e.to_string())))
                .collect::<Result<_>>()?;
        }
        if let Some(rounds) = self.rounds {
            cfg.train.rounds = rounds;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn test_samples(data: &Dataset) -> Vec<Sample> {
    data.clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let outcome = run_to_dir(&cfg)?;
            println!("{:<8} {:>14}", "regime", "final_accuracy");
            for r in &outcome.runs {
                println!("{:<8} {:>14.4}", r.regime.name(), r.final_accuracy());
            }
            for m in &outcome.energy.measured {
                println!(
                    "{}: aggregate rate {:.4}, E_ann/E_snn {:.3}",
                    m.regime, m.rates.aggregate, m.report.ratio
                );
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Validate(o) => {
            let cfg = o.resolve()?;
            println!("valid");
            print!("{}", cfg.to_toml()?);
        }
        Command::GenData { overrides, file } => {
            let cfg = overrides.resolve()?;
            let spikefed::config::DataConfig::Synthetic(synth) = &cfg.data else {
                return Err(Error::config("data.source", "gen-data needs a synthetic data source"));
            };
            let data = synth_generate(synth, cfg.seed)?.dataset;
            export_dataset(&file, &data)?;
            println!(
                "wrote {} clients, {} records to {}",
                data.clients.len(),
                data.clients.iter().map(|c| c.train.len() + c.test.len()).sum::<usize>(),
                file.display()
            );
        }
        Command::Energy { overrides, model, rates } => {
            let cfg = overrides.resolve()?;
            let (spec, rates) = match (model, rates) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path)?;
                    let saved: SavedModel = serde_json::from_str(&text)
                        .map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
                    let model = saved.into_model()?;
                    let data = cfg.load_data()?;
                    let report = measure_rates(model.network(), &model.params().values, &test_samples(&data))?;
                    (model.spec().clone(), report.per_layer)
                }
                (None, Some(rates)) => {
                    let shape = cfg.data_shape()?;
                    (cfg.architecture(shape, spikefed::Backbone::Snn), rates)
                }
                (None, None) => return Err(Error::Usage("energy needs --model or --rates".into())),
            };
            let ops = count_ops(&spec)?;
            let report = estimate_energy(
                &ops,
                &rates,
                spec.lif.time_steps,
                &cfg.energy.constants(),
                cfg.energy.options(),
            )?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Argument(e.to_string()))?;
            if let Some(out) = &overrides.out {
                write_atomic(out, text.as_bytes())?;
            }
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("invalid configuration: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
