//! Command implementations behind the `geowalk` binary. Every command that
//! writes files also writes a `manifest.json` that `geowalk replay` can run
//! again.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use geowalk::evalbench::{
    ablate_captures, ablate_fov, ablate_walk_length, run_benchmark, BenchError, Experiment, ReportTable,
};
use geowalk::geograph::{load_graph, split_graph, CityGraph, GeoCoord, GraphError};
use geowalk::gnnembed::{load_checkpoint, save_checkpoint, train, write_log_csv, ModelError, TrainConfig};
use geowalk::synthfeat::{generate_city, generate_features, load_features, FeatureError, FeatureSet};
use geowalk::walker::{count_walks, WalkError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod config;
pub mod manifest;

pub use config::{BenchSettings, ExperimentConfig};
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const GRAPH_FILE: &str = "graph.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const CHECKPOINT_FILE: &str = "model.sgbm";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}\n\nusage: {usage}")]
    Usage { message: String, usage: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "geowalk",
    version,
    about = "Walk-based cross-view geo-localisation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city graph and its features.
    Synth {
        #[arg(long, default_value_t = 400)]
        nodes: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        /// Angular sectors per panorama.
        #[arg(long, default_value_t = 8)]
        sectors: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print node, edge and walk counts of a graph.
    Stats {
        /// A graph JSON file, or a directory holding graph.json.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 4)]
        walk_length: usize,
    },
    /// Train the two-branch network on a city.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        walk_length: Option<usize>,
        #[arg(long)]
        captures: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localise every node of a test city and write a recall report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated fields of view in degrees.
        #[arg(long, value_delimiter = ',')]
        fov: Vec<f64>,
        /// Comma-separated filter modes: none, bvm, bvm-yaw.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        /// Bearing-vector bins.
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        walk_length: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain and evaluate across one varied setting.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated values; defaults to 1..5 or 360,180,90.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        test_graph: PathBuf,
        #[arg(long)]
        test_features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a command again from its manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    WalkLength,
    Captures,
    Fov,
}

const STATS_USAGE: &str = "geowalk stats --graph <graph.json | dir> [--walk-length N]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub nodes: usize,
    pub noise: f64,
    pub seed: u64,
    pub dim: usize,
    pub sectors: usize,
    pub jitter: f64,
    pub drop_prob: f64,
    pub spacing_m: f64,
    pub origin: [f64; 2],
}

impl SynthParams {
    pub fn new(nodes: usize, noise: f64, seed: u64) -> Self {
        Self {
            nodes,
            noise,
            seed,
            dim: 768,
            sectors: 8,
            jitter: 0.25,
            drop_prob: 0.15,
            spacing_m: 100.0,
            origin: [51.5, -0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub graph: PathBuf,
    pub features: PathBuf,
    pub val_fraction: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub checkpoint: PathBuf,
    pub graph: PathBuf,
    pub features: PathBuf,
    pub bench: BenchSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateParams {
    pub sweep: Sweep,
    pub values: Vec<f64>,
    pub graph: PathBuf,
    pub features: PathBuf,
    pub test_graph: PathBuf,
    pub test_features: PathBuf,
    pub val_fraction: f64,
    pub train: TrainConfig,
    pub bench: BenchSettings,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn to_value<T: Serialize>(t: &T) -> serde_json::Value {
    serde_json::to_value(t).expect("parameters serialise")
}

fn from_value<T: for<'de> Deserialize<'de>>(v: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("manifest parameters: {e}")))
}

/// Accepts a graph file, or a directory holding `graph.json`.
fn resolve_graph(path: &Path, usage: &'static str) -> Result<PathBuf, CliError> {
    if path.is_dir() {
        let candidate = path.join(GRAPH_FILE);
        if !candidate.is_file() {
            return Err(CliError::Usage {
                message: format!(
                    "no {GRAPH_FILE} in {}; create one with `geowalk synth --out {}`",
                    path.display(),
                    path.display()
                ),
                usage,
            });
        }
        return Ok(candidate);
    }
    if !path.exists() {
        return Err(CliError::Usage {
            message: format!("{} does not exist", path.display()),
            usage,
        });
    }
    Ok(path.to_path_buf())
}

fn load_city(graph: &Path, features: &Path) -> Result<(CityGraph, FeatureSet), CliError> {
    let g = load_graph(graph)?;
    let f = load_features(features, &g)?;
    Ok((g, f))
}

pub fn cmd_synth(p: &SynthParams, out: &Path) -> Result<RunManifest, CliError> {
    create_dir(out)?;
    let origin = GeoCoord::new(p.origin[0], p.origin[1]).map_err(|e| CliError::Config(e.to_string()))?;
    let city = generate_city(p.nodes, p.jitter, p.drop_prob, origin, p.spacing_m, p.seed)?;
    let feats = generate_features(&city, p.dim, p.sectors, p.noise, p.seed)?;
    let graph_path = out.join(GRAPH_FILE);
    let feat_path = out.join(FEATURES_FILE);
    city.save(&graph_path)?;
    feats.save(&feat_path)?;
    let mut m = RunManifest::new("synth", to_value(p), p.seed, out);
    m.add_artifact(&graph_path)?;
    m.add_artifact(&feat_path)?;
    m.add_artifact(&FeatureSet::sidecar_path(&feat_path))?;
    m.write()?;
    Ok(m)
}

/// Node, edge and walk counts laid out one per line.
pub fn cmd_stats(graph: &Path, walk_length: usize) -> Result<String, CliError> {
    let path = resolve_graph(graph, STATS_USAGE)?;
    let g = load_graph(&path)?;
    let walks = count_walks(&g, walk_length)?;
    let degree = if g.is_empty() {
        0.0
    } else {
        2.0 * g.edge_count() as f64 / g.len() as f64
    };
    let mut s = String::new();
    writeln!(s, "graph           {}", g.name()).unwrap();
    writeln!(s, "nodes           {}", g.len()).unwrap();
    writeln!(s, "edges           {}", g.edge_count()).unwrap();
    writeln!(s, "mean degree     {degree:.3}").unwrap();
    writeln!(s, "walks (n={walk_length})     {walks}").unwrap();
    Ok(s)
}

pub fn cmd_train(p: &TrainParams, out: &Path, config_path: Option<&Path>) -> Result<RunManifest, CliError> {
    let (graph, feats) = load_city(&p.graph, &p.features)?;
    let split = split_graph(&graph, p.val_fraction, p.train.seed)?;
    let outcome = train(&split, &feats, &p.train)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.params, &ckpt)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let f = File::create(&log_path).map_err(io_err(&log_path))?;
    write_log_csv(&outcome.log, BufWriter::new(f)).map_err(io_err(&log_path))?;

    let mut m = RunManifest::new("train", to_value(p), p.train.seed, out);
    m.config_path = config_path.map(Path::to_path_buf);
    m.add_input(&p.graph)?;
    m.add_input(&p.features)?;
    m.add_artifact(&ckpt)?;
    m.add_artifact(&log_path)?;
    m.write()?;
    Ok(m)
}

fn write_report(
    table: &ReportTable,
    out: &Path,
    csv_name: &str,
    text_name: &str,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    let csv = out.join(csv_name);
    let f = File::create(&csv).map_err(io_err(&csv))?;
    table.write_csv(BufWriter::new(f)).map_err(io_err(&csv))?;
    let txt = out.join(text_name);
    fs::write(&txt, table.to_text()).map_err(io_err(&txt))?;
    m.add_artifact(&csv)?;
    m.add_artifact(&txt)?;
    Ok(())
}

pub fn cmd_eval(
    p: &EvalParams,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<(RunManifest, ReportTable), CliError> {
    let bench = p.bench.to_config()?;
    bench.validate()?;
    let params = load_checkpoint(&p.checkpoint)?;
    let (graph, feats) = load_city(&p.graph, &p.features)?;
    let table = run_benchmark(&graph, &feats, &params, &bench)?;
    create_dir(out)?;
    let seed = p.bench.seeds.first().copied().unwrap_or(0);
    let mut m = RunManifest::new("eval", to_value(p), seed, out);
    m.config_path = config_path.map(Path::to_path_buf);
    m.add_input(&p.checkpoint)?;
    m.add_input(&p.graph)?;
    m.add_input(&p.features)?;
    write_report(&table, out, REPORT_FILE, REPORT_TEXT_FILE, &mut m)?;
    m.write()?;
    Ok((m, table))
}

pub fn cmd_ablate(
    p: &AblateParams,
    out: &Path,
    config_path: Option<&Path>,
) -> Result<(RunManifest, ReportTable), CliError> {
    let bench = p.bench.to_config()?;
    let (graph, feats) = load_city(&p.graph, &p.features)?;
    let (test_graph, test_feats) = load_city(&p.test_graph, &p.test_features)?;
    let split = split_graph(&graph, p.val_fraction, p.train.seed)?;
    let exp = Experiment {
        split: &split,
        train_features: &feats,
        test_graph: &test_graph,
        test_features: &test_feats,
        train_config: &p.train,
        bench_config: &bench,
    };
    let counts = || -> Result<Vec<usize>, CliError> {
        p.values
            .iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(CliError::Config(format!("sweep value {v} must be a positive integer")))
                }
            })
            .collect()
    };
    let table = match p.sweep {
        Sweep::WalkLength => ablate_walk_length(&exp, &counts()?)?,
        Sweep::Captures => ablate_captures(&exp, &counts()?)?,
        Sweep::Fov => ablate_fov(&exp, &p.values)?,
    };
    create_dir(out)?;
    let mut m = RunManifest::new("ablate", to_value(p), p.train.seed, out);
    m.config_path = config_path.map(Path::to_path_buf);
    for input in [&p.graph, &p.features, &p.test_graph, &p.test_features] {
        m.add_input(input)?;
    }
    write_report(&table, out, "ablation.csv", "ablation.txt", &mut m)?;
    m.write()?;
    Ok((m, table))
}

/// Re-runs the command recorded in `manifest`, writing into `out`.
pub fn cmd_replay(manifest: &Path, out: &Path) -> Result<RunManifest, CliError> {
    let m = RunManifest::load(manifest)?;
    let cfg = m.config_path.as_deref();
    match m.command.as_str() {
        "synth" => cmd_synth(&from_value(m.params)?, out),
        "train" => cmd_train(&from_value(m.params)?, out, cfg),
        "eval" => cmd_eval(&from_value(m.params)?, out, cfg).map(|r| r.0),
        "ablate" => cmd_ablate(&from_value(m.params)?, out, cfg).map(|r| r.0),
        other => Err(CliError::Config(format!("manifest names unknown command {other:?}"))),
    }
}

fn adapt_input_width(cfg: &mut TrainConfig, pinned: bool, features: &Path, graph: &Path) -> Result<(), CliError> {
    if pinned {
        return Ok(());
    }
    let (_, feats) = load_city(graph, features)?;
    cfg.layer_dims[0] = feats.dim();
    Ok(())
}

fn default_sweep_values(sweep: Sweep) -> Vec<f64> {
    match sweep {
        Sweep::WalkLength | Sweep::Captures => vec![1.0, 2.0, 3.0, 4.0, 5.0],
        Sweep::Fov => vec![360.0, 180.0, 90.0],
    }
}

/// Runs a parsed command line and returns what should be printed.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Synth {
            nodes,
            noise,
            seed,
            dim,
            sectors,
            out,
        } => {
            let p = SynthParams {
                dim,
                sectors,
                ..SynthParams::new(nodes, noise, seed)
            };
            let m = cmd_synth(&p, &out)?;
            Ok(format!("wrote {} files to {}\n", m.artifacts.len(), out.display()))
        }
        Command::Stats { graph, walk_length } => cmd_stats(&graph, walk_length),
        Command::Train {
            graph,
            features,
            config,
            epochs,
            lr,
            walk_length,
            captures,
            seed,
            out,
        } => {
            let (exp, pinned) = ExperimentConfig::load(config.as_deref())?;
            let mut t = exp.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.walk_length = walk_length.unwrap_or(t.walk_length);
            t.captures = captures.or(t.captures);
            t.seed = seed.unwrap_or(t.seed);
            adapt_input_width(&mut t, pinned, &features, &graph)?;
            let p = TrainParams {
                graph,
                features,
                val_fraction: exp.val_fraction,
                train: t,
            };
            cmd_train(&p, &out, config.as_deref())?;
            Ok(format!(
                "wrote {} and {} to {}\n",
                CHECKPOINT_FILE,
                TRAIN_LOG_FILE,
                out.display()
            ))
        }
        Command::Eval {
            checkpoint,
            graph,
            features,
            config,
            fov,
            mode,
            bins,
            walk_length,
            seeds,
            out,
        } => {
            let (exp, _) = ExperimentConfig::load(config.as_deref())?;
            let mut b = exp.bench;
            if !fov.is_empty() {
                b.fovs = fov;
            }
            if !mode.is_empty() {
                b.modes = mode;
            }
            if !seeds.is_empty() {
                b.seeds = seeds;
            }
            b.bins = bins.unwrap_or(b.bins);
            b.walk_length = walk_length.unwrap_or(b.walk_length);
            let p = EvalParams {
                checkpoint,
                graph,
                features,
                bench: b,
            };
            let (_, table) = cmd_eval(&p, &out, config.as_deref())?;
            Ok(table.to_text())
        }
        Command::Ablate {
            sweep,
            values,
            graph,
            features,
            test_graph,
            test_features,
            config,
            epochs,
            out,
        } => {
            let (exp, pinned) = ExperimentConfig::load(config.as_deref())?;
            let mut t = exp.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            adapt_input_width(&mut t, pinned, &features, &graph)?;
            let p = AblateParams {
                sweep,
                values: if values.is_empty() {
                    default_sweep_values(sweep)
                } else {
                    values
                },
                graph,
                features,
                test_graph,
                test_features,
                val_fraction: exp.val_fraction,
                train: t,
                bench: exp.bench,
            };
            let (_, table) = cmd_ablate(&p, &out, config.as_deref())?;
            Ok(table.to_text())
        }
        Command::Replay { manifest, out } => {
            let m = cmd_replay(&manifest, &out)?;
            Ok(format!("replayed {} into {}\n", m.command, out.display()))
        }
    }
}
