use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use roomroam_core::dataset::{
    self, read_dataset, read_layouts, write_dataset, write_layouts, DatasetError, Sample, Split,
};
use roomroam_core::layout::{Layout, LayoutError};
use roomroam_core::model::{import_pretrained, serialize, ModelConfig, ModelError};
use roomroam_core::rdwsim::{path_seed, run_episode_with, Arena, EpisodeOptions, SimConfig, SimError};
use roomroam_core::training::{evaluate, train, write_history_csv, TrainConfig, TrainError};
use roomroam_service::{model_path, AppState, LoadedModel, ServiceConfig, ServiceError, MODEL_ENV};
use serde::Serialize;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "roomroam", version, about = "Reset simulation and prediction for redirected walking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample random layouts.
    Gen {
        /// Layouts per object count, e.g. `3:100,4:100,5:100`.
        #[arg(long, value_parser = parse_counts)]
        counts: BTreeMap<usize, usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate every layout of a layouts file and write a split dataset.
    Simulate {
        #[arg(long)]
        layouts: PathBuf,
        #[arg(long, default_value_t = 30)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: SimOpts,
        /// Write the first path of every layout as `<id>.csv` here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Generate and simulate in one pass.
    BuildDataset {
        #[arg(long, value_parser = parse_counts)]
        counts: BTreeMap<usize, usize>,
        #[arg(long, default_value_t = 30)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Train a model on the train split, early-stopping on val.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Model TOML; ViT-B/16 when omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training TOML; defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Backbone weights in safetensors format.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Print RMSE, MAE and R² on one split as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print the prediction and heatmap for a layout file as JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layout: PathBuf,
    },
    /// Write the attention heatmap for a layout as a PGM image.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print group statistics of a dataset as JSON.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        /// Overridden by the ROOMROAM_MODEL environment variable.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 2)]
        sim_workers: usize,
        #[arg(long, default_value_t = 30_000)]
        time_budget_ms: u64,
        #[arg(long)]
        sim_config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct SimOpts {
    /// Simulator TOML; protocol defaults when omitted.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// train:val:test proportions.
    #[arg(long, default_value = "6:2:2", value_parser = parse_ratios)]
    ratios: [f64; 3],
    /// Seed of the split; `--seed` when omitted.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Dataset { path: PathBuf, source: DatasetError },
    #[error(transparent)]
    DatasetOp(#[from] DatasetError),
    #[error("{path}: {source}")]
    Layout { path: PathBuf, source: LayoutError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Dataset { .. } | CliError::DatasetOp(_) => "dataset",
            CliError::Layout { .. } => "layout",
            CliError::Sim(_) => "simulation",
            CliError::Model(_) => "model",
            CliError::Train(_) => "training",
            CliError::Service(_) => "service",
            CliError::Invalid(_) => "invalid_input",
        }
    }
}

fn parse_pairs(s: &str) -> Result<Vec<(String, String)>, String> {
    s.split(',')
        .map(|part| {
            part.split_once(':')
                .map(|(a, b)| (a.trim().to_owned(), b.trim().to_owned()))
                .ok_or_else(|| format!("expected key:value, got `{part}`"))
        })
        .collect()
}

fn parse_counts(s: &str) -> Result<BTreeMap<usize, usize>, String> {
    let mut out = BTreeMap::new();
    for (k, v) in parse_pairs(s)? {
        let n: usize = k.parse().map_err(|_| format!("bad object count `{k}`"))?;
        if !(3..=5).contains(&n) {
            return Err(format!("object count must be 3, 4 or 5, got {n}"));
        }
        let c: usize = v.parse().map_err(|_| format!("bad layout count `{v}`"))?;
        if out.insert(n, c).is_some() {
            return Err(format!("object count {n} given twice"));
        }
    }
    Ok(out)
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad ratio `{p}`")))
        .collect::<Result<_, _>>()?;
    let total: f64 = parts.iter().sum();
    match parts[..] {
        [a, b, c] if parts.iter().all(|r| r.is_finite() && *r >= 0.0) && total > 0.0 => {
            Ok([a / total, b / total, c / total])
        }
        _ => Err(format!("expected three non-negative ratios like 6:2:2, got `{s}`")),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn load_dataset(path: &Path) -> Result<Vec<Sample>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file)).map_err(|source| CliError::Dataset {
        path: path.to_owned(),
        source,
    })
}

fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), CliError> {
    let mut out = create(path)?;
    write_dataset(&mut out, samples)?;
    out.flush().map_err(io_err(path))
}

fn load_layout(path: &Path) -> Result<Layout, CliError> {
    Layout::from_json(&read_text(path)?).map_err(|source| CliError::Layout {
        path: path.to_owned(),
        source,
    })
}

fn load_sim_config(path: Option<&Path>) -> Result<SimConfig, CliError> {
    match path {
        Some(p) => Ok(SimConfig::from_toml(&read_text(p)?)?),
        None => Ok(SimConfig::default()),
    }
}

/// One JSON line on stdout. A closed pipe (`| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|_| writeln!(out))
        .and_then(|_| out.flush());
    match written {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(io_err(Path::new("<stdout>"))(e)),
        _ => Ok(()),
    }
}

fn finish_split(samples: &mut [Sample], opts: &SimOpts, seed: u64) -> Result<(), CliError> {
    dataset::split(samples, opts.ratios, opts.split_seed.unwrap_or(seed))?;
    let count = |s| samples.iter().filter(|x| x.split == s).count();
    eprintln!(
        "{} samples: {} train, {} val, {} test",
        samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    predicted_resets: f64,
    heatmap: &'a [Vec<f64>],
    model_version: &'a str,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
    parameters: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { counts, seed, out } => {
            let layouts = dataset::generate_layouts(&counts, seed)?;
            let mut w = create(&out)?;
            write_layouts(&mut w, &layouts)?;
            w.flush().map_err(io_err(&out))?;
            eprintln!("wrote {} layouts to {}", layouts.len(), out.display());
        }
        Command::Simulate {
            layouts,
            paths,
            seed,
            out,
            opts,
            trace_dir,
        } => {
            let cfg = load_sim_config(opts.sim_config.as_deref())?;
            let file = File::open(&layouts).map_err(io_err(&layouts))?;
            let named = read_layouts(BufReader::new(file)).map_err(|source| CliError::Dataset {
                path: layouts.clone(),
                source,
            })?;
            let mut samples = dataset::simulate_layouts(&named, &cfg, paths, seed)?;
            finish_split(&mut samples, &opts, seed)?;
            save_dataset(&out, &samples)?;
            if let Some(dir) = trace_dir {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                for (i, n) in named.iter().enumerate() {
                    let s = path_seed(dataset::sample_sim_seed(seed, i), 0);
                    let opts = EpisodeOptions {
                        record_trace: true,
                        quarter_turns: 0,
                    };
                    let ep = run_episode_with(&Arena::from_layout(&n.layout), &cfg, s, opts)?;
                    let path = dir.join(format!("{}.csv", n.id));
                    let mut w = create(&path)?;
                    ep.write_trace_csv(&mut w)
                        .and_then(|_| w.flush())
                        .map_err(io_err(&path))?;
                }
            }
        }
        Command::BuildDataset {
            counts,
            paths,
            seed,
            out,
            opts,
        } => {
            let cfg = load_sim_config(opts.sim_config.as_deref())?;
            let mut samples = dataset::build_dataset(&counts, &cfg, paths, seed)?;
            finish_split(&mut samples, &opts, seed)?;
            save_dataset(&out, &samples)?;
        }
        Command::Train {
            dataset,
            model_config,
            train_config,
            pretrained,
            out,
            history,
        } => {
            let samples = load_dataset(&dataset)?;
            let model_cfg = match model_config {
                Some(p) => ModelConfig::from_toml(&read_text(&p)?)?,
                None => ModelConfig::vit_b16(),
            };
            let train_cfg = match train_config {
                Some(p) => TrainConfig::from_toml(&read_text(&p)?)?,
                None => TrainConfig::default(),
            };
            let initial = match pretrained {
                Some(p) => {
                    let bytes = std::fs::read(&p).map_err(io_err(&p))?;
                    Some(import_pretrained(&bytes, &model_cfg, train_cfg.seed, 0.0)?)
                }
                None => None,
            };
            let outcome = train(&samples, &model_cfg, &train_cfg, initial)?;
            let mut params = outcome.params;
            params.round_to_f32();
            std::fs::write(&out, serialize(&params, &model_cfg)).map_err(io_err(&out))?;
            if let Some(h) = history {
                let mut w = create(&h)?;
                write_history_csv(&outcome.history, &mut w)
                    .and_then(|_| w.flush())
                    .map_err(io_err(&h))?;
            }
            eprintln!(
                "best val loss {:.6} at epoch {}, model written to {}",
                outcome.best_val_loss,
                outcome.best_epoch,
                out.display()
            );
            print_json(&TrainSummary {
                best_epoch: outcome.best_epoch,
                best_val_loss: outcome.best_val_loss,
                epochs_run: outcome.history.len(),
                parameters: params.parameter_count(),
            })?;
        }
        Command::Eval {
            model,
            dataset,
            split,
        } => {
            let (params, cfg) = roomroam_core::model::load(&model)?;
            let samples: Vec<Sample> = load_dataset(&dataset)?
                .into_iter()
                .filter(|s| s.split == split)
                .collect();
            if samples.is_empty() {
                return Err(CliError::Invalid(format!(
                    "no {} samples in {}",
                    split.as_str(),
                    dataset.display()
                )));
            }
            print_json(&evaluate(&params, &cfg, &samples)?)?;
        }
        Command::Predict { model, layout } => {
            let loaded = LoadedModel::load(&model)?;
            let pred = loaded.predictor.predict(&load_layout(&layout)?)?;
            print_json(&PredictOutput {
                predicted_resets: pred.resets,
                heatmap: &pred.heatmap.values,
                model_version: &loaded.version,
            })?;
        }
        Command::Rollout { model, layout, out } => {
            let loaded = LoadedModel::load(&model)?;
            let pred = loaded.predictor.predict(&load_layout(&layout)?)?;
            std::fs::write(&out, pred.heatmap.to_pgm()).map_err(io_err(&out))?;
            eprintln!("heatmap written to {}", out.display());
        }
        Command::Analyze { dataset } => {
            let samples = load_dataset(&dataset)?;
            print_json(&dataset::analyze(&samples)?)?;
        }
        Command::Serve {
            model,
            port,
            host,
            sim_workers,
            time_budget_ms,
            sim_config,
        } => {
            let path = model_path(model, std::env::var_os(MODEL_ENV));
            let loaded = path.as_deref().map(LoadedModel::load).transpose()?;
            match &loaded {
                Some(m) => eprintln!("model {} loaded", m.version),
                None => eprintln!("no model given, /api/predict will answer 503"),
            }
            let config = ServiceConfig {
                sim_workers,
                time_budget: Duration::from_millis(time_budget_ms),
                sim: load_sim_config(sim_config.as_deref())?,
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Service(e.into()))?;
            let addr = SocketAddr::new(host, port);
            runtime.block_on(roomroam_service::serve(addr, AppState::new(loaded, config)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({"code": e.code(), "message": e.to_string()});
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
