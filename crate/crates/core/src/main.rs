use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use pricesentry::bundle::BundleStore;
use pricesentry::datagen::{generate_catalog, train_test_split, CatalogConfig, LabeledDataset};
use pricesentry::eval::{log_spaced_rates, write_csv, write_json};
use pricesentry::experiments::{compare_models, hierarchy_levels, rate_sweep, score_models, ExperimentConfig};
use pricesentry::train::{train_bundle, TrainConfig};

#[derive(Parser)]
#[command(name = "pricesentry", version, about = "Pricing anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic catalog.
    Datagen {
        /// Catalog config (JSON, or TOML by extension); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a labeled catalog into train and test directories.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        test_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model bundle and publish it to a bundle directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bundle_dir: PathBuf,
    },
    /// Run the offline experiments on a train/test split.
    Evaluate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Experiment config (JSON, or TOML by extension).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the hierarchy-level and anomaly-rate experiments.
        #[arg(long)]
        models_only: bool,
    },
    /// Score a catalog file and write capacity-capped ranked alerts.
    BatchScore {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        output: PathBuf,
        /// Also ingest the alerts into this alert store.
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// Run the streaming scoring and alert HTTP service.
    Serve {
        #[arg(long)]
        bundle_dir: PathBuf,
        #[arg(long, default_value_t = 7200)]
        ttl_seconds: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store_dir: Option<PathBuf>,
    },
    /// Alert store maintenance.
    Alerts {
        #[command(subcommand)]
        command: AlertsCommand,
    },
}

#[derive(Subcommand)]
enum AlertsCommand {
    /// Ingest a ranked alert file (line-delimited JSON).
    Ingest {
        #[arg(long)]
        store_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        batch_id: String,
    },
    /// Print review statistics.
    Stats {
        #[arg(long)]
        store_dir: PathBuf,
    },
    /// Export resolved alerts as labeled rows.
    Export {
        #[arg(long)]
        store_dir: PathBuf,
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fold the event log into a snapshot.
    Compact {
        #[arg(long)]
        store_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Datagen { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => CatalogConfig::from_file(&p)?,
                None => CatalogConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = generate_catalog(&cfg)?;
            data.write(&out)?;
            println!(
                "wrote {} records ({} anomalies) to {}",
                data.len(),
                data.n_positive(),
                out.display()
            );
        }
        Command::Split {
            data,
            test_rate,
            seed,
            out,
        } => {
            let data = LabeledDataset::read(&data)?;
            let (train, test) = train_test_split(&data, test_rate, seed)?;
            train.write(&out.join("train"))?;
            test.write(&out.join("test"))?;
            println!(
                "train: {} rows ({} anomalies); test: {} rows ({} anomalies)",
                train.len(),
                train.n_positive(),
                test.len(),
                test.n_positive()
            );
        }
        Command::Train {
            data,
            config,
            bundle_dir,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::from_file(&p)?,
                None => TrainConfig::default(),
            };
            let data = LabeledDataset::read(&data)?;
            let mut bundle = train_bundle(&data, &cfg)?;
            let version = BundleStore::new(&bundle_dir).publish(&mut bundle)?;
            println!("published {version} to {}", bundle_dir.display());
        }
        Command::Evaluate {
            train,
            test,
            config,
            out,
            models_only,
        } => evaluate(&train, &test, config.as_deref(), &out, models_only)?,
        Command::BatchScore {
            input,
            bundle_dir,
            capacity,
            output,
            store_dir,
        } => return pricesentry::serving::batch::run_cli(&input, &bundle_dir, capacity, &output, store_dir.as_deref()),
        Command::Serve {
            bundle_dir,
            ttl_seconds,
            port,
            store_dir,
        } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(pricesentry::serving::http::serve(
                bundle_dir,
                ttl_seconds,
                port,
                store_dir,
            ))?;
        }
        Command::Alerts { command } => alerts(command)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(train: &Path, test: &Path, config: Option<&Path>, out: &Path, models_only: bool) -> Result<()> {
    let cfg: ExperimentConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "toml") {
                toml::from_str(&text)?
            } else {
                serde_json::from_str(&text)?
            }
        }
        None => ExperimentConfig::default(),
    };
    let train = LabeledDataset::read(train)?;
    let test = LabeledDataset::read(test)?;
    if test.n_positive() < cfg.folds {
        bail!(
            "test set has {} anomalies, fewer than {} folds",
            test.n_positive(),
            cfg.folds
        );
    }
    std::fs::create_dir_all(out)?;

    let scores = score_models(&train, &test, &cfg.train)?;
    let models = compare_models(&scores, &test.labels, &cfg)?;
    println!(
        "{:<18} {:>9} {:>9} {:>9} {:>9}",
        "model", "precision", "recall", "f1", "auc_pr"
    );
    for m in &models {
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            m.model, m.precision, m.recall, m.f1, m.auc_pr
        );
    }
    write_json(&out.join("models.json"), &models)?;
    write_csv(
        &out.join("models.csv"),
        &models.iter().map(ModelRow::from).collect::<Vec<_>>(),
    )?;
    if models_only {
        return Ok(());
    }

    let levels = hierarchy_levels(&train, &test, &cfg)?;
    println!(
        "\n{:<18} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "gnb level", "nodes", "precision", "recall", "f1", "auc_pr"
    );
    for l in &levels {
        println!(
            "{:<18} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            l.level.as_str(),
            l.nodes,
            l.precision,
            l.recall,
            l.f1,
            l.auc_pr
        );
    }
    write_json(&out.join("levels.json"), &levels)?;
    write_csv(&out.join("levels.csv"), &levels)?;

    let rates = log_spaced_rates(0.001, 0.25, 10);
    let (rows, summary) = rate_sweep(&scores, &test.labels, &rates, &cfg)?;
    println!("\n{:<18} {:>8}", "rate sweep", "spearman");
    for s in &summary {
        println!("{:<18} {:>8.3}", s.model, s.spearman);
    }
    write_csv(&out.join("rate_sweep.csv"), &rows)?;
    write_json(&out.join("rate_sweep_summary.json"), &summary)?;
    Ok(())
}

/// Flat CSV form of a model result.
#[derive(serde::Serialize)]
struct ModelRow {
    model: String,
    precision: f64,
    recall: f64,
    f1: f64,
    auc_pr: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
    fit_seconds: f64,
}

impl From<&pricesentry::experiments::ModelResult> for ModelRow {
    fn from(m: &pricesentry::experiments::ModelResult) -> Self {
        ModelRow {
            model: m.model.clone(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc_pr: m.auc_pr,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            fit_seconds: m.fit_seconds,
        }
    }
}

fn alerts(command: AlertsCommand) -> Result<()> {
    use pricesentry::alerts::AlertStore;
    match command {
        AlertsCommand::Ingest {
            store_dir,
            input,
            batch_id,
        } => {
            let rows = pricesentry::serving::batch::read_alert_rows(&input)?;
            let store = AlertStore::open(&store_dir)?;
            let created = store.ingest(&rows, pricesentry::alerts::Source::Batch, &batch_id)?;
            println!("created {} alerts ({} rows)", created.len(), rows.len());
        }
        AlertsCommand::Stats { store_dir } => {
            let store = AlertStore::open(&store_dir)?;
            println!("{}", serde_json::to_string_pretty(&store.review_stats(None))?);
        }
        AlertsCommand::Export {
            store_dir,
            since,
            output,
        } => {
            let since = since
                .map(|s| chrono::DateTime::parse_from_rfc3339(&s).map(|d| d.with_timezone(&chrono::Utc)))
                .transpose()
                .context("--since must be an RFC 3339 timestamp")?;
            let store = AlertStore::open(&store_dir)?;
            let rows = store.export_labels(since);
            let mut text = String::new();
            for r in &rows {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            std::fs::write(&output, text)?;
            println!("exported {} labeled rows", rows.len());
        }
        AlertsCommand::Compact { store_dir } => {
            let store = AlertStore::open(&store_dir)?;
            let n = store.compact()?;
            println!("compacted {n} alerts into snapshot");
        }
    }
    Ok(())
}
