//! Triplet training loop: one random query walk per training node per epoch,
//! decoupled-weight-decay Adam, and a reduce-on-plateau learning rate driven
//! by validation Top-1.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::{embed_queries, embed_references, sat_rows, street_rows, QueryWalk, YawMode};
use super::network::{backward, batch_loss, Aggregator, ModelParams, WalkBatch, WalkInputs};
use super::ModelError;
use crate::geograph::{CityGraph, GraphSplit, NodeIdx};
use crate::retrieval::{build_index, query_topk, Embedding};
use crate::seed;
use crate::synthfeat::FeatureSet;
use crate::walker::sample_walk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub walk_length: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub layer_dims: Vec<usize>,
    pub aggregator: Aggregator,
    /// Field of view of the training queries, degrees.
    pub fov: f64,
    pub yaw_mode: YawMode,
    /// Train on the first `c` captures per node only; `None` uses all.
    pub captures: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-4,
            margin: 0.2,
            walk_length: 4,
            batch_size: 16,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            plateau_patience: 5,
            plateau_factor: 0.5,
            layer_dims: vec![768, 256, 64],
            aggregator: Aggregator::Mean,
            fov: 360.0,
            yaw_mode: YawMode::Travel,
            captures: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.walk_length == 0 || self.batch_size == 0 {
            return bad("walk_length and batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be >= 0 and betas in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("epsilon must be positive and plateau_factor in (0, 1]");
        }
        if !(self.fov > 0.0 && self.fov <= 360.0) {
            return bad("fov must lie in (0, 360]");
        }
        if self.captures == Some(0) {
            return bad("captures must be at least 1");
        }
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return bad("layer_dims needs at least two positive widths");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Top-1.
    pub params: ModelParams,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub final_params: ModelParams,
    /// Epoch 0 holds the untrained network's loss and validation score.
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log[0].train_loss
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().unwrap().train_loss
    }
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], mut out: W) -> io::Result<()> {
    writeln!(out, "epoch,train_loss,val_top1,learning_rate")?;
    for e in log {
        writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_top1, e.learning_rate)?;
    }
    Ok(())
}

struct AdamW {
    m: ModelParams,
    v: ModelParams,
    steps: i32,
}

impl AdamW {
    fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, cfg: &TrainConfig) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps);
        let decay = 1.0 - lr * cfg.weight_decay;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] = p[i] * decay - lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Halves (by `factor`) the rate once the metric has failed to improve for
/// more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
            factor,
        }
    }

    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

fn other_node<R: Rng>(n: usize, not: NodeIdx, rng: &mut R) -> NodeIdx {
    let r = rng.random_range(0..n - 1);
    if r >= not {
        r + 1
    } else {
        r
    }
}

/// Triplets for `targets`: a streetview query walk, the same walk seen from
/// the satellite, and a satellite walk ending at a different random node.
pub fn sample_batch<R: Rng>(
    graph: &CityGraph,
    features: &FeatureSet,
    targets: &[NodeIdx],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<WalkBatch, ModelError> {
    let captures = config.captures.unwrap_or(features.captures()).min(features.captures());
    let (mut anchors, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
    for &t in targets {
        let walk = sample_walk(graph, t, config.walk_length, rng)?;
        let picks: Vec<usize> = (0..walk.len()).map(|_| rng.random_range(0..captures)).collect();
        anchors.push(street_rows(
            graph,
            features,
            &walk,
            &picks,
            config.fov,
            config.yaw_mode,
        )?);
        positives.push(sat_rows(features, &walk));
        let other = other_node(graph.len(), t, rng);
        let neg = sample_walk(graph, other, config.walk_length, rng)?;
        negatives.push(sat_rows(features, &neg));
    }
    let dim = features.dim();
    Ok(WalkBatch {
        anchors: WalkInputs::from_walks(dim, &anchors)?,
        positives: WalkInputs::from_walks(dim, &positives)?,
        negatives: WalkInputs::from_walks(dim, &negatives)?,
    })
}

/// Fraction of nodes whose nearest reference walk ends at the node itself,
/// one fixed random query walk per node.
pub fn validation_top1(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    config: &TrainConfig,
) -> Result<f64, ModelError> {
    if graph.is_empty() {
        return Ok(0.0);
    }
    let mut rng = seed::stream(config.seed, "validation-queries");
    let mut queries = Vec::with_capacity(graph.len());
    for t in 0..graph.len() {
        let walk = sample_walk(graph, t, config.walk_length, &mut rng)?;
        let captures = (0..walk.len())
            .map(|_| rng.random_range(0..features.captures()))
            .collect();
        queries.push(QueryWalk { walk, captures });
    }
    let refs = embed_references(params, graph, features, config.walk_length)?;
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
    let emb = embed_queries(params, graph, features, &queries, config.fov, config.yaw_mode)?;
    let mut hits = 0usize;
    for (q, e) in queries.iter().zip(emb.rows()) {
        let r = query_topk(&index, e.as_slice().unwrap(), 1)?;
        if r.ranked.first().map(|c| c.node) == Some(q.walk.target()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / graph.len() as f64)
}

fn epoch_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<NodeIdx>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<NodeIdx> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[NodeIdx]>::to_vec).collect()
}

/// Trains both branches on `split.train`, scoring `split.validation` after
/// every epoch. Deterministic for a fixed config.
pub fn train(split: &GraphSplit, features: &FeatureSet, config: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let graph = &split.train;
    if graph.len() < 2 {
        return Err(ModelError::EmptyTraining);
    }
    if config.layer_dims[0] != features.dim() {
        return Err(ModelError::Dimension(format!(
            "layer_dims starts at {} but features are {}-wide",
            config.layer_dims[0],
            features.dim()
        )));
    }
    let train_feats = features.restrict_to(graph)?;
    let val_feats = features.restrict_to(&split.validation)?;

    let mut params = ModelParams::init(&config.layer_dims, config.aggregator, config.seed)?;
    let mut adam = AdamW::new(&params);
    let mut lr = config.learning_rate;
    let mut plateau = PlateauScheduler::new(config.plateau_patience, config.plateau_factor);

    // epoch 0: the untrained network
    let mut rng = seed::indexed_stream(config.seed, "epoch", 0);
    let (mut total, mut count) = (0.0, 0usize);
    for targets in epoch_batches(graph.len(), config.batch_size, &mut rng) {
        let batch = sample_batch(graph, &train_feats, &targets, config, &mut rng)?;
        total += batch_loss(&params, &batch, config.margin)? * batch.len() as f64;
        count += batch.len();
    }
    let val = validation_top1(&params, &split.validation, &val_feats, config)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: total / count as f64,
        val_top1: val,
        learning_rate: lr,
    }];
    let (mut best, mut best_epoch, mut best_val) = (params.clone(), 0, val);

    for epoch in 1..=config.epochs {
        let mut rng = seed::indexed_stream(config.seed, "epoch", epoch as u64);
        let (mut total, mut count) = (0.0, 0usize);
        for targets in epoch_batches(graph.len(), config.batch_size, &mut rng) {
            let batch = sample_batch(graph, &train_feats, &targets, config, &mut rng)?;
            let (loss, grads) = backward(&batch, &params, config.margin)?;
            adam.step(&mut params, &grads, lr, config);
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let val = validation_top1(&params, &split.validation, &val_feats, config)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_top1: val,
            learning_rate: lr,
        });
        if val > best_val {
            best_val = val;
            best_epoch = epoch;
            best = params.clone();
        }
        lr = plateau.step(val, lr);
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        final_params: params,
        log,
    })
}
