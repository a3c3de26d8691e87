//! Recall metrics and the benchmark protocol: one seeded query walk per test
//! node against every reference walk, optionally filtered by bearing vectors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::Rng;
use thiserror::Error;

use crate::bvm::{
    filter_retrievals, quantise_bearings, BearingNoise, BearingVector, BvmError, FilterMode, QueryBearings,
};
use crate::geograph::{CityGraph, GraphSplit, NodeIdx};
use crate::gnnembed::{
    embed_queries, embed_references, train, walk_headings, ModelError, ModelParams, QueryWalk, TrainConfig, YawMode,
};
use crate::retrieval::{build_index, query_distinct_nodes, Embedding, EmbeddingIndex, RetrievalError, RetrievalResult};
use crate::seed;
use crate::synthfeat::FeatureSet;
use crate::walker::{sample_walk, WalkError};

/// Over-fetch factor applied before bearing filtering.
pub const OVERFETCH: usize = 4;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no ground truth for query {0}")]
    MissingTruth(usize),
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("bearing filtering is not used below a 180 degree field of view (got {0})")]
    BvmNarrowFov(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Bvm(#[from] BvmError),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub walk_length: usize,
    pub fovs: Vec<f64>,
    pub modes: Vec<FilterMode>,
    pub k_list: Vec<usize>,
    pub percent_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub bins: usize,
    pub yaw_mode: YawMode,
    /// Corruption of the query-side bearings; zero gives oracle bearings.
    pub bearing_noise: BearingNoise,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            walk_length: 4,
            fovs: vec![360.0],
            modes: vec![FilterMode::None],
            k_list: vec![1, 5, 10],
            percent_list: vec![1.0],
            seeds: vec![0, 1, 2],
            bins: crate::bvm::DEFAULT_BINS,
            yaw_mode: YawMode::Travel,
            bearing_noise: BearingNoise::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.walk_length == 0 {
            return bad("walk_length must be at least 1");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("k_list needs at least one k >= 1");
        }
        if self.percent_list.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            return bad("percentages must lie in (0, 100]");
        }
        if self.seeds.is_empty() || self.fovs.is_empty() || self.modes.is_empty() {
            return bad("seeds, fovs and modes must be non-empty");
        }
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        for &fov in &self.fovs {
            if !(fov > 0.0 && fov <= 360.0) {
                return bad("fov must lie in (0, 360]");
            }
            if fov < 180.0 && self.modes.iter().any(|m| *m != FilterMode::None) {
                return Err(BenchError::BvmNarrowFov(fov));
            }
        }
        Ok(())
    }
}

/// Share of queries whose true node is among the first `k` distinct nodes.
pub fn recall_at_k(results: &[RetrievalResult], truth: &HashMap<usize, NodeIdx>, k: usize) -> Result<f64, BenchError> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in results {
        let t = *truth.get(&r.query_walk).ok_or(BenchError::MissingTruth(r.query_walk))?;
        if r.node_ranking().iter().take(k).any(|&n| n == t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// `k` for a percentage of the reference database, floored and at least 1.
pub fn percent_k(pct: f64, database_nodes: usize) -> usize {
    ((pct / 100.0 * database_nodes as f64).floor() as usize).max(1)
}

pub fn recall_at_percent(
    results: &[RetrievalResult],
    truth: &HashMap<usize, NodeIdx>,
    pct: f64,
    database_nodes: usize,
) -> Result<f64, BenchError> {
    recall_at_k(results, truth, percent_k(pct, database_nodes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub city: String,
    pub walk_length: usize,
    pub fov: f64,
    pub mode: FilterMode,
    pub bins: usize,
    /// `None` marks the mean over seeds.
    pub seed: Option<u64>,
    /// Captures per node used in training, when restricted.
    pub train_captures: Option<usize>,
    pub recall_k: Vec<(usize, f64)>,
    pub recall_pct: Vec<(f64, f64)>,
    pub n_queries: usize,
    /// Distinct candidate nodes left after filtering, averaged over queries.
    pub mean_candidates: f64,
}

impl ReportRow {
    /// Every recall value, `k` columns first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.recall_k
            .iter()
            .map(|r| r.1)
            .chain(self.recall_pct.iter().map(|r| r.1))
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_k.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    /// Rows averaged over seeds.
    pub fn means(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.seed.is_none())
    }

    pub fn find(&self, fov: f64, mode: FilterMode, seed: Option<u64>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.fov == fov && r.mode == mode && r.seed == seed)
    }

    pub fn extend(&mut self, other: ReportTable) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let Some(first) = self.rows.first() else {
            return writeln!(
                out,
                "city,walk_length,fov,mode,V,seed,n_queries,mean_candidates,train_captures"
            );
        };
        let mut header = String::from("city,walk_length,fov,mode,V,seed");
        for (k, _) in &first.recall_k {
            write!(header, ",recall@{k}").unwrap();
        }
        for (p, _) in &first.recall_pct {
            write!(header, ",recall@{p}pct").unwrap();
        }
        header.push_str(",n_queries,mean_candidates,train_captures");
        writeln!(out, "{header}")?;
        for r in &self.rows {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            write!(
                out,
                "{},{},{},{},{},{}",
                r.city, r.walk_length, r.fov, r.mode, r.bins, seed
            )?;
            for v in r.values() {
                write!(out, ",{v:.6}")?;
            }
            let caps = r.train_captures.map_or_else(String::new, |c| c.to_string());
            writeln!(out, ",{},{:.4},{}", r.n_queries, r.mean_candidates, caps)?;
        }
        Ok(())
    }

    /// Mean rows laid out with one line per mode and a column group per FOV.
    pub fn to_text(&self) -> String {
        let mut fovs: Vec<f64> = Vec::new();
        let mut modes: Vec<FilterMode> = Vec::new();
        for r in self.means() {
            if !fovs.contains(&r.fov) {
                fovs.push(r.fov);
            }
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        let Some(first) = self.means().next() else {
            return String::from("(empty report)\n");
        };
        let labels: Vec<String> = first
            .recall_k
            .iter()
            .map(|(k, _)| format!("Top-{k}"))
            .chain(first.recall_pct.iter().map(|(p, _)| format!("Top-{p}%")))
            .collect();
        let mut s = String::new();
        write!(s, "{:<10}", "").unwrap();
        for f in &fovs {
            write!(s, "| {:<width$}", format!("{f} deg"), width = labels.len() * 8).unwrap();
        }
        s.push('\n');
        write!(s, "{:<10}", "mode").unwrap();
        for _ in &fovs {
            s.push_str("| ");
            for l in &labels {
                write!(s, "{l:<8}").unwrap();
            }
        }
        s.push('\n');
        for m in &modes {
            write!(s, "{:<10}", m.as_str()).unwrap();
            for f in &fovs {
                s.push_str("| ");
                match self.find(*f, *m, None) {
                    Some(r) => {
                        for v in r.values() {
                            write!(s, "{:<8.2}", v * 100.0).unwrap();
                        }
                    }
                    None => {
                        for _ in &labels {
                            write!(s, "{:<8}", "-").unwrap();
                        }
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Reference side of the pipeline: the walk index plus each node's
/// north-aligned bearing vector.
pub struct ReferenceSet {
    pub index: EmbeddingIndex,
    pub bearings: HashMap<NodeIdx, BearingVector>,
}

pub fn build_references(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    walk_length: usize,
    bins: usize,
) -> Result<ReferenceSet, BenchError> {
    let refs = embed_references(params, graph, features, walk_length)?;
    let index = build_index(
        refs.into_iter()
            .enumerate()
            .map(|(i, r)| Embedding {
                walk: i,
                node: r.node,
                vector: r.vector,
            })
            .collect(),
    )?;
    let bearings = (0..graph.len())
        .map(|n| Ok((n, quantise_bearings(&graph.node(n).neighbour_bearings, bins, 0.0)?)))
        .collect::<Result<_, BvmError>>()?;
    Ok(ReferenceSet { index, bearings })
}

/// The seeded query walk and capture choices for every node of `graph`.
/// Each node draws from its own stream, so the queries do not depend on FOV
/// or filter mode.
pub fn benchmark_queries(
    graph: &CityGraph,
    features: &FeatureSet,
    walk_length: usize,
    seed: u64,
) -> Result<Vec<QueryWalk>, BenchError> {
    (0..graph.len())
        .map(|t| {
            let mut rng = seed::indexed_stream(seed, "bench-query", t as u64);
            let walk = sample_walk(graph, t, walk_length, &mut rng)?;
            let captures = (0..walk.len())
                .map(|_| rng.random_range(0..features.captures()))
                .collect();
            Ok(QueryWalk { walk, captures })
        })
        .collect()
}

/// Retrieval results of one (fov, mode, seed) cell, in query order.
pub struct CellResults {
    pub results: Vec<RetrievalResult>,
    pub truth: HashMap<usize, NodeIdx>,
    /// Queries whose true node was in the unfiltered pool but filtered out.
    pub truth_filtered: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    refs: &ReferenceSet,
    queries: &[QueryWalk],
    fov: f64,
    mode: FilterMode,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<CellResults, BenchError> {
    let db_nodes = refs.index.distinct_nodes();
    let max_k = config
        .k_list
        .iter()
        .copied()
        .chain(config.percent_list.iter().map(|&p| percent_k(p, db_nodes)))
        .max()
        .unwrap_or(1);
    let pool = max_k * OVERFETCH;
    let emb = embed_queries(params, graph, features, queries, fov, config.yaw_mode)?;
    let mut results = Vec::with_capacity(queries.len());
    let mut truth = HashMap::with_capacity(queries.len());
    let mut truth_filtered = 0usize;
    for (qi, (q, e)) in queries.iter().zip(emb.rows()).enumerate() {
        let target = q.walk.target();
        truth.insert(qi, target);
        let mut raw = query_distinct_nodes(&refs.index, e.as_slice().unwrap(), pool)?;
        raw.query_walk = qi;
        let filtered = if mode == FilterMode::None {
            raw.clone()
        } else {
            let heading = *walk_headings(graph, &q.walk, config.yaw_mode).last().unwrap();
            let mut rng = seed::indexed_stream(seed, "bench-bearing-noise", qi as u64);
            let observed = QueryBearings::observe(
                &graph.node(target).neighbour_bearings,
                heading,
                config.bins,
                fov,
                config.bearing_noise,
                &mut rng,
            )?;
            filter_retrievals(&raw, &observed, &refs.bearings, mode, Some(heading), usize::MAX)?
        };
        let before = raw.ranked.iter().any(|c| c.node == target);
        let after = filtered.ranked.iter().any(|c| c.node == target);
        if before && !after {
            truth_filtered += 1;
        }
        results.push(filtered);
    }
    Ok(CellResults {
        results,
        truth,
        truth_filtered,
    })
}

/// Recall at each k, recall at each percent, mean surviving candidates.
type Scores = (Vec<(usize, f64)>, Vec<(f64, f64)>, f64);

fn score(cell: &CellResults, config: &BenchmarkConfig, db_nodes: usize) -> Result<Scores, BenchError> {
    let rk = config
        .k_list
        .iter()
        .map(|&k| Ok((k, recall_at_k(&cell.results, &cell.truth, k)?)))
        .collect::<Result<Vec<_>, BenchError>>()?;
    let rp = config
        .percent_list
        .iter()
        .map(|&p| Ok((p, recall_at_percent(&cell.results, &cell.truth, p, db_nodes)?)))
        .collect::<Result<Vec<_>, BenchError>>()?;
    let n = cell.results.len().max(1) as f64;
    let cands = cell.results.iter().map(|r| r.node_ranking().len() as f64).sum::<f64>() / n;
    Ok((rk, rp, cands))
}

/// Evaluates `params` on the test city: a row per (fov, mode, seed) followed
/// by the mean over seeds for each (fov, mode).
pub fn run_benchmark(
    graph: &CityGraph,
    features: &FeatureSet,
    params: &ModelParams,
    config: &BenchmarkConfig,
) -> Result<ReportTable, BenchError> {
    config.validate()?;
    let refs = build_references(params, graph, features, config.walk_length, config.bins)?;
    let db_nodes = refs.index.distinct_nodes();
    let queries: Vec<Vec<QueryWalk>> = config
        .seeds
        .iter()
        .map(|&s| benchmark_queries(graph, features, config.walk_length, s))
        .collect::<Result<_, _>>()?;
    let mut table = ReportTable::default();
    for &fov in &config.fovs {
        for &mode in &config.modes {
            let mut per_seed = Vec::new();
            for (&s, qs) in config.seeds.iter().zip(&queries) {
                let cell = run_cell(params, graph, features, &refs, qs, fov, mode, config, s)?;
                let (recall_k, recall_pct, mean_candidates) = score(&cell, config, db_nodes)?;
                per_seed.push(ReportRow {
                    city: graph.name().to_string(),
                    walk_length: config.walk_length,
                    fov,
                    mode,
                    bins: config.bins,
                    seed: Some(s),
                    train_captures: None,
                    recall_k,
                    recall_pct,
                    n_queries: cell.results.len(),
                    mean_candidates,
                });
            }
            let n = per_seed.len() as f64;
            let avg = |f: &dyn Fn(&ReportRow) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
            let first = &per_seed[0];
            let mean = ReportRow {
                seed: None,
                recall_k: (0..first.recall_k.len())
                    .map(|i| (first.recall_k[i].0, avg(&|r| r.recall_k[i].1)))
                    .collect(),
                recall_pct: (0..first.recall_pct.len())
                    .map(|i| (first.recall_pct[i].0, avg(&|r| r.recall_pct[i].1)))
                    .collect(),
                mean_candidates: avg(&|r| r.mean_candidates),
                n_queries: per_seed.iter().map(|r| r.n_queries).sum::<usize>() / per_seed.len(),
                ..first.clone()
            };
            table.rows.extend(per_seed);
            table.rows.push(mean);
        }
    }
    Ok(table)
}

/// Training inputs and the held-out test city, for sweeps that retrain.
pub struct Experiment<'a> {
    pub split: &'a GraphSplit,
    pub train_features: &'a FeatureSet,
    pub test_graph: &'a CityGraph,
    pub test_features: &'a FeatureSet,
    pub train_config: &'a TrainConfig,
    pub bench_config: &'a BenchmarkConfig,
}

/// Retrains and evaluates once per walk length.
pub fn ablate_walk_length(exp: &Experiment<'_>, lengths: &[usize]) -> Result<ReportTable, BenchError> {
    let mut table = ReportTable::default();
    for &l in lengths {
        let tc = TrainConfig {
            walk_length: l,
            ..exp.train_config.clone()
        };
        let bc = BenchmarkConfig {
            walk_length: l,
            ..exp.bench_config.clone()
        };
        let model = train(exp.split, exp.train_features, &tc)?;
        table.extend(run_benchmark(exp.test_graph, exp.test_features, &model.params, &bc)?);
    }
    Ok(table)
}

/// Retrains on the first `c` captures per node for each `c`.
pub fn ablate_captures(exp: &Experiment<'_>, captures: &[usize]) -> Result<ReportTable, BenchError> {
    let mut table = ReportTable::default();
    for &c in captures {
        let tc = TrainConfig {
            captures: Some(c),
            ..exp.train_config.clone()
        };
        let model = train(exp.split, exp.train_features, &tc)?;
        let mut t = run_benchmark(exp.test_graph, exp.test_features, &model.params, exp.bench_config)?;
        t.rows.iter_mut().for_each(|r| r.train_captures = Some(c));
        table.extend(t);
    }
    Ok(table)
}

/// Trains once and evaluates at every FOV of the bench config.
pub fn ablate_fov(exp: &Experiment<'_>, fovs: &[f64]) -> Result<ReportTable, BenchError> {
    let model = train(exp.split, exp.train_features, exp.train_config)?;
    let bc = BenchmarkConfig {
        fovs: fovs.to_vec(),
        ..exp.bench_config.clone()
    };
    run_benchmark(exp.test_graph, exp.test_features, &model.params, &bc)
}
