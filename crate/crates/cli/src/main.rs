use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use rareseek_core::bench::{self, ExperimentConfig, ExportFormat, SyntheticSpec};
use rareseek_core::dataset::{self, class_stats};
use rareseek_core::par::Parallelism;
use rareseek_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "rareseek", version, about = "Interactive rare-class retrieval over embedding datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect embedding datasets
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Synthetic data, benchmark sweeps and result export
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run the HTTP feedback service
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Load a manifest and check every file against it
    Validate {
        manifest: PathBuf,
        /// Skip L2 row normalization
        #[arg(long)]
        raw: bool,
    },
    /// Class-frequency summary as CSV (percentages of the pool)
    Stats {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// One row per class instead of the summary
        #[arg(long)]
        per_class: bool,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Generate a synthetic long-tailed dataset
    Synth {
        /// JSON file with SyntheticSpec fields; omitted fields take defaults
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run a class × query × strategy sweep
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run every cell on the calling thread
        #[arg(long)]
        sequential: bool,
        /// Where to write the row table; defaults to <output_dir>/results.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert or filter an exported result table
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// csv or jsonl
        #[arg(long, default_value = "csv")]
        format: String,
        /// Keep only these iterations, e.g. 5,15,25
        #[arg(long, value_delimiter = ',')]
        iterations: Vec<usize>,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Dataset manifests to serve (repeatable)
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Allow oracle-answered `{"auto": true}` label submissions
    #[arg(long)]
    demo: bool,
    /// Directory for session event logs, replayed on startup
    #[arg(long)]
    journal: Option<PathBuf>,
    /// JSON file with ServiceConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
}

fn format_of(path: &std::path::Path) -> ExportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => ExportFormat::Jsonl,
        _ => ExportFormat::Csv,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn dataset_cmd(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Validate { manifest, raw } => {
            let ds = dataset::load_dataset(&manifest, !raw)
                .with_context(|| format!("validating {}", manifest.display()))?;
            println!(
                "ok {}: {} samples x {} dims, {} classes, pool {}, test {}",
                ds.name(),
                ds.num_samples(),
                ds.dim(),
                ds.num_classes(),
                ds.pool().len(),
                ds.test().len()
            );
        }
        DatasetCmd::Stats { manifests, per_class } => {
            let mut out = csv::Writer::from_writer(std::io::stdout());
            if per_class {
                out.write_record(["dataset", "class", "name", "pool_size", "frequency_pct"])?;
            } else {
                out.write_record(["dataset", "classes", "pool_size", "min_pct", "max_pct", "mean_pct", "median_pct"])?;
            }
            for m in manifests {
                let ds = dataset::load_dataset(&m, false).with_context(|| format!("loading {}", m.display()))?;
                let s = class_stats(&ds)?;
                let pct = |v: f64| format!("{:.3}", 100.0 * v);
                if per_class {
                    for (c, (&size, &f)) in s.sizes.iter().zip(&s.frequencies).enumerate() {
                        let name = ds.manifest().class_names.get(c).cloned().unwrap_or_default();
                        out.write_record([ds.name().to_owned(), c.to_string(), name, size.to_string(), pct(f)])?;
                    }
                } else {
                    out.write_record([
                        ds.name().to_owned(),
                        s.present_classes.to_string(),
                        s.pool_size.to_string(),
                        pct(s.min),
                        pct(s.max),
                        pct(s.mean),
                        pct(s.median),
                    ])?;
                }
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn bench_cmd(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Synth { params, out } => {
            let synth: SyntheticSpec = match params {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            let manifest = bench::write_synthetic(&synth, &out)?;
            println!("{}", manifest.display());
        }
        BenchCmd::Run { config, sequential, out } => {
            let config = ExperimentConfig::read(&config)?;
            let ds = dataset::load_dataset(&config.dataset, config.normalize)
                .with_context(|| format!("loading {}", config.dataset.display()))?;
            let policy = if sequential { Parallelism::Sequential } else { Parallelism::default() };
            let started = std::time::Instant::now();
            let table = bench::run_experiment_with(&ds, &config, policy)?;
            tracing::info!(rows = table.rows.len(), secs = started.elapsed().as_secs_f64(), "sweep done");
            if let Some(out) = out {
                bench::export(&table, format_of(&out), &out)?;
            } else if config.output_dir.is_none() {
                bench::export_to(&table, ExportFormat::Csv, std::io::stdout())?;
                return Ok(());
            }
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for s in table.mean_by_iteration() {
                if [5, 15, 25].contains(&s.iteration) {
                    w.serialize(s)?;
                }
            }
            w.flush()?;
        }
        BenchCmd::Export { input, out, format, iterations } => {
            let format: ExportFormat = format.parse()?;
            let mut table = bench::import(&input, format_of(&input))?;
            if !iterations.is_empty() {
                table = table.filter_iterations(&iterations);
            }
            if table.rows.is_empty() {
                bail!("no rows left to export");
            }
            bench::export(&table, format, &out)?;
        }
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config: ServiceConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => ServiceConfig::default(),
    };
    config.demo |= args.demo;
    if args.journal.is_some() {
        config.journal_dir = args.journal;
    }
    let state = AppState::load(config, &args.datasets)?;
    tokio::runtime::Runtime::new()?.block_on(rareseek_service::serve(state, args.addr))?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Dataset(cmd) => dataset_cmd(cmd),
        Command::Bench(cmd) => bench_cmd(cmd),
        Command::Serve(args) => serve(args),
    }
}
