use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sigla::config::{self, Format};
use sigla::core::aggregation::AggregationStrategy;
use sigla::core::comms::{success_probability, ChannelConfig};
use sigla::core::dataset::generate;
use sigla::core::orchestrator::{run_centralized, run_on, ComparisonRow, RunConfig, RunOutput};
use sigla::report::{self, RunRecord, RunSummary};
use sigla::{dataset_io, model_io};

#[derive(Parser)]
#[command(name = "sigla", version, about = "Clustered layer-wise federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigFormat {
    Toml,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print or write a default configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "toml")]
        format: ConfigFormat,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate per-vehicle datasets into a directory.
    GenerateData {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run one strategy.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `generate-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the strategy in the config: sigla, fedavg, mbp[:fraction], fedlama, centralized.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write each vehicle's final model.
        #[arg(long)]
        save_models: bool,
    },
    /// Run several strategies on the same data and tabulate them.
    Compare {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "sigla,fedavg,mbp:0.3,fedlama,centralized"
        )]
        strategies: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Re-serialize a `run.json` record into CSV and JSON files.
    ExportMetrics {
        #[arg(long)]
        run: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Success probability of a transfer against model fraction.
    CalibrateChannel {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Model fractions to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.478,0.5,0.75,1.0")]
        fractions: Vec<f64>,
    },
}

enum Choice {
    Federated(AggregationStrategy),
    Centralized,
}

fn parse_strategy(s: &str) -> sigla::Result<Choice> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let bad = || sigla::Error::Config(format!("unknown strategy `{s}`"));
    let choice = match (name.trim().to_ascii_lowercase().as_str(), arg) {
        ("sigla", None) => Choice::Federated(AggregationStrategy::Sigla),
        ("fedavg" | "flash", None) => Choice::Federated(AggregationStrategy::Fedavg),
        ("mbp", a) => {
            let prune_fraction = match a {
                Some(a) => a.parse().map_err(|_| bad())?,
                None => 0.3,
            };
            Choice::Federated(AggregationStrategy::Mbp { prune_fraction })
        }
        ("fedlama", None) => Choice::Federated(AggregationStrategy::Fedlama {
            schedule: Default::default(),
        }),
        ("centralized", None) => Choice::Centralized,
        _ => return Err(bad()),
    };
    if let Choice::Federated(st) = &choice {
        st.validate()?;
    }
    Ok(choice)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> sigla::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Datasets from `dir`, or generated from the config. A directory's
/// generator settings replace the config's.
fn datasets(cfg: &mut RunConfig, dir: Option<&Path>) -> sigla::Result<Vec<sigla::core::dataset::VehicleDataset>> {
    match dir {
        Some(d) => {
            let (manifest, ds) = dataset_io::read_dir(d)?;
            cfg.data = manifest.generator;
            cfg.data.n_vehicles = ds.len();
            cfg.validate()?;
            Ok(ds)
        }
        None => Ok(generate(&cfg.data)?.datasets),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_run(dir: &Path, cfg: &RunConfig, run: &RunOutput) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    report::write_metrics_csv(create(&dir.join("metrics.csv"))?, &run.metrics)?;
    report::write_transfers_csv(create(&dir.join("transfers.csv"))?, &run.transfers)?;
    write_json(&dir.join("summary.json"), &RunSummary::of(run))?;
    write_json(&dir.join("run.json"), &RunRecord::new(cfg, run))?;
    if let Some(imp) = &run.importance {
        write_json(&dir.join("importance.json"), imp)?;
    }
    if let Some(sim) = &run.similarity {
        report::write_similarity_csv(create(&dir.join("similarity.csv"))?, sim)?;
    }
    if let Some(h) = run.clusterings.last().and_then(|c| c.hierarchy.as_ref()) {
        report::write_merge_tree_csv(create(&dir.join("merge_tree.csv"))?, h)?;
    }
    Ok(())
}

fn run_choice(
    cfg: &RunConfig,
    choice: Choice,
    ds: &[sigla::core::dataset::VehicleDataset],
) -> sigla::Result<(RunConfig, RunOutput)> {
    match choice {
        Choice::Federated(st) => {
            let c = cfg.clone().with_strategy(st);
            let out = run_on(&c, ds)?;
            Ok((c, out))
        }
        Choice::Centralized => Ok((cfg.clone(), run_centralized(cfg, ds)?)),
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::InitConfig { format, out } => {
            let format = match format {
                ConfigFormat::Toml => Format::Toml,
                ConfigFormat::Json => Format::Json,
            };
            let text = config::render(&RunConfig::default(), format)?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().write_all(text.as_bytes())?,
            }
        }
        Command::GenerateData { config, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let data = generate(&cfg.data)?;
            dataset_io::write_dir(&out, &data.datasets, &cfg.data)?;
            eprintln!("wrote {} vehicles to {}", data.datasets.len(), out.display());
        }
        Command::Run {
            config,
            data,
            strategy,
            seed,
            out,
            save_models,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            let ds = datasets(&mut cfg, data.as_deref())?;
            let choice = match strategy {
                Some(s) => parse_strategy(&s)?,
                None => Choice::Federated(cfg.strategy.clone()),
            };
            let (cfg, run) = run_choice(&cfg, choice, &ds)?;
            write_run(&out, &cfg, &run)?;
            if save_models {
                let dir = out.join("models");
                fs::create_dir_all(&dir)?;
                for (v, m) in run.final_models.iter().enumerate() {
                    model_io::save(m, &dir.join(format!("vehicle_{v:03}.sglm")))?;
                }
            }
            eprintln!(
                "{}: final accuracy {:.4}, {} params transmitted",
                run.strategy,
                run.final_accuracy(),
                run.total_params()
            );
        }
        Command::Compare {
            config,
            data,
            strategies,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            let ds = datasets(&mut cfg, data.as_deref())?;
            let choices = strategies
                .iter()
                .map(|s| parse_strategy(s))
                .collect::<sigla::Result<Vec<_>>>()?;
            if choices.is_empty() {
                bail!(sigla::Error::Config("no strategies given".into()));
            }
            let mut rows = Vec::new();
            for (i, choice) in choices.into_iter().enumerate() {
                let (c, run) = run_choice(&cfg, choice, &ds)?;
                write_run(&out.join(format!("{i:02}_{}", run.strategy)), &c, &run)?;
                rows.push(ComparisonRow::of(&run));
            }
            report::write_comparison_csv(create(&out.join("comparison.csv"))?, &rows)?;
            report::write_comparison_csv(io::stdout().lock(), &rows)?;
        }
        Command::ExportMetrics { run, out } => {
            let text = fs::read(&run).with_context(|| format!("reading {}", run.display()))?;
            let record: RunRecord = serde_json::from_slice(&text).map_err(|e| sigla::Error::Format {
                path: run.clone(),
                msg: e.to_string(),
            })?;
            fs::create_dir_all(&out)?;
            report::write_metrics_csv(create(&out.join("metrics.csv"))?, &record.metrics)?;
            report::write_transfers_csv(create(&out.join("transfers.csv"))?, &record.transfers)?;
            write_json(&out.join("summary.json"), &record.summary)?;
            if let Some(imp) = &record.importance {
                write_json(&out.join("importance.json"), imp)?;
            }
        }
        Command::CalibrateChannel { config, fractions } => {
            let cfg = load_config(config.as_deref(), None)?;
            let full = sigla::core::orchestrator::initial_model(&cfg)?.total_params();
            let channel: ChannelConfig = cfg.channel.resolve(full);
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["fraction", "params", "bytes", "success_probability"])?;
            for f in fractions {
                if !(0.0..=1.0).contains(&f) {
                    bail!(sigla::Error::Config(format!("fraction {f} outside [0, 1]")));
                }
                let params = (f * full as f64).round() as usize;
                let bytes = channel.bytes_for(params);
                w.write_record([
                    f.to_string(),
                    params.to_string(),
                    bytes.to_string(),
                    success_probability(bytes, &channel).to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match (e.downcast_ref::<sigla::Error>(), e.downcast_ref::<sigla::core::Error>()) {
                (Some(e), _) => e.exit_code(),
                (None, Some(e)) if matches!(e.root(), sigla::core::Error::Config(_)) => 1,
                _ => 2,
            };
            ExitCode::from(code as u8)
        }
    }
}
