//! Message passing over walk subgraphs and its reverse pass.
//!
//! Each layer computes `h' = act(W * AGG(closed neighbourhood of h) + b)` with
//! ReLU on hidden layers and identity on the output layer. The walk's
//! adjacency is its own path, so node `j` aggregates `j - 1`, `j` and `j + 1`.
//! Walks are processed in stacked batches: every matrix holds the rows of all
//! walks back to back, delimited by `starts`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Street,
    Sat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `d_out x d_in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Two independent message-passing stacks with a shared layer schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_dims: Vec<usize>,
    pub aggregator: Aggregator,
    pub street_branch: Vec<LayerParams>,
    pub sat_branch: Vec<LayerParams>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases; the branches draw from separate
    /// streams.
    pub fn init(layer_dims: &[usize], aggregator: Aggregator, seed: u64) -> Result<Self, ModelError> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(ModelError::Config(format!("invalid layer schedule {layer_dims:?}")));
        }
        let branch = |label: &str| {
            let mut rng = seed::stream(seed, label);
            layer_dims
                .windows(2)
                .map(|w| {
                    let (d_in, d_out) = (w[0], w[1]);
                    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
                    LayerParams {
                        weights: Array2::from_shape_simple_fn((d_out, d_in), || {
                            rand::Rng::random_range(&mut rng, -limit..limit)
                        }),
                        bias: Array1::zeros(d_out),
                    }
                })
                .collect()
        };
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            aggregator,
            street_branch: branch("init-street"),
            sat_branch: branch("init-sat"),
        })
    }

    pub fn branch(&self, b: Branch) -> &[LayerParams] {
        match b {
            Branch::Street => &self.street_branch,
            Branch::Sat => &self.sat_branch,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layer_dims: self.layer_dims.clone(),
            aggregator: self.aggregator,
            street_branch: self.street_branch.iter().map(LayerParams::zeros_like).collect(),
            sat_branch: self.sat_branch.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Shapes agree with the schedule and every entry is finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        for layers in [&self.street_branch, &self.sat_branch] {
            if layers.len() + 1 != self.layer_dims.len() {
                return Err(ModelError::Dimension("layer count disagrees with schedule".into()));
            }
            for (k, l) in layers.iter().enumerate() {
                if l.d_in() != self.layer_dims[k] || l.d_out() != self.layer_dims[k + 1] || l.bias.len() != l.d_out() {
                    return Err(ModelError::Dimension(format!("layer {k} has the wrong shape")));
                }
                if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                    return Err(ModelError::Dimension(format!("layer {k} has non-finite entries")));
                }
            }
        }
        Ok(())
    }

    /// Every weight and bias, street branch first, as flat slices.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.street_branch
            .iter()
            .chain(&self.sat_branch)
            .flat_map(|l| [l.weights.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.street_branch
            .iter_mut()
            .chain(self.sat_branch.iter_mut())
            .flat_map(|l| [l.weights.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Input rows of several walks stacked back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkInputs {
    features: Array2<f64>,
    starts: Vec<usize>,
}

impl WalkInputs {
    pub fn new(dim: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            starts: vec![0],
        }
    }

    /// Stacks walks given as `(length x dim)` row blocks.
    pub fn from_walks(dim: usize, walks: &[Array2<f64>]) -> Result<Self, ModelError> {
        let rows: usize = walks.iter().map(|w| w.nrows()).sum();
        let mut data = Vec::with_capacity(rows * dim);
        let mut starts = Vec::with_capacity(walks.len() + 1);
        starts.push(0);
        for w in walks {
            if w.ncols() != dim || w.nrows() == 0 {
                return Err(ModelError::Dimension(format!(
                    "walk block is {}x{}, expected nx{dim} with n >= 1",
                    w.nrows(),
                    w.ncols()
                )));
            }
            data.extend(w.iter());
            starts.push(starts.last().unwrap() + w.nrows());
        }
        Ok(Self {
            features: Array2::from_shape_vec((rows, dim), data).unwrap(),
            starts,
        })
    }

    pub fn walk_count(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    fn target_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.starts[1..].iter().map(|&e| e - 1)
    }
}

/// Closed path neighbourhood of row `j` within the walk `[a, b)`.
fn neighbourhood(j: usize, a: usize, b: usize) -> (usize, usize) {
    (j.saturating_sub(1).max(a), (j + 1).min(b - 1))
}

pub(crate) fn aggregate(h: &Array2<f64>, starts: &[usize], agg: Aggregator) -> Array2<f64> {
    let mut z = Array2::zeros(h.raw_dim());
    for w in starts.windows(2) {
        let (a, b) = (w[0], w[1]);
        for j in a..b {
            let (lo, hi) = neighbourhood(j, a, b);
            let mut row = z.row_mut(j);
            for u in lo..=hi {
                row += &h.row(u);
            }
            if agg == Aggregator::Mean {
                row /= (hi - lo + 1) as f64;
            }
        }
    }
    z
}

fn aggregate_adjoint(g: &Array2<f64>, starts: &[usize], agg: Aggregator) -> Array2<f64> {
    let mut out = Array2::zeros(g.raw_dim());
    for w in starts.windows(2) {
        let (a, b) = (w[0], w[1]);
        for j in a..b {
            let (lo, hi) = neighbourhood(j, a, b);
            let scale = match agg {
                Aggregator::Mean => 1.0 / (hi - lo + 1) as f64,
                Aggregator::Sum => 1.0,
            };
            for u in lo..=hi {
                out.row_mut(u).scaled_add(scale, &g.row(j));
            }
        }
    }
    out
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Intermediate values kept for the reverse pass.
pub(crate) struct Trace {
    /// Aggregated inputs per layer.
    zs: Vec<Array2<f64>>,
    /// Pre-activations per layer.
    us: Vec<Array2<f64>>,
    /// Final-layer output at each walk's target, before normalisation.
    pub raw: Array2<f64>,
    /// Unit-length embeddings.
    pub emb: Array2<f64>,
    norms: Array1<f64>,
}

impl Trace {
    /// Final-layer outputs for every row.
    pub fn node_outputs(&self) -> &Array2<f64> {
        self.us.last().unwrap()
    }
}

const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn check_layers(layers: &[LayerParams], input_dim: usize) -> Result<(), ModelError> {
    let mut d = input_dim;
    for (k, l) in layers.iter().enumerate() {
        if l.d_in() != d {
            return Err(ModelError::Dimension(format!(
                "layer {k} expects {} inputs, got {d}",
                l.d_in()
            )));
        }
        d = l.d_out();
    }
    if layers.is_empty() {
        return Err(ModelError::Dimension("branch has no layers".into()));
    }
    Ok(())
}

pub(crate) fn forward_trace(layers: &[LayerParams], agg: Aggregator, inputs: &WalkInputs) -> Trace {
    let last = layers.len() - 1;
    let mut zs = Vec::with_capacity(layers.len());
    let mut us = Vec::with_capacity(layers.len());
    let mut h: Option<Array2<f64>> = None;
    for (k, layer) in layers.iter().enumerate() {
        let z = aggregate(h.as_ref().unwrap_or(&inputs.features), &inputs.starts, agg);
        let mut u = z.dot(&layer.weights.t());
        u += &layer.bias;
        h = Some(if k == last { u.clone() } else { u.mapv(relu) });
        zs.push(z);
        us.push(u);
    }
    let out = us.last().unwrap();
    let targets: Vec<usize> = inputs.target_rows().collect();
    let raw = out.select(Axis(0), &targets);
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_FLOOR));
    let emb = &raw / &norms.view().insert_axis(Axis(1));
    Trace {
        zs,
        us,
        raw,
        emb,
        norms,
    }
}

/// Parameter gradients given the loss gradient w.r.t. the unit embeddings.
pub(crate) fn backward_trace(
    layers: &[LayerParams],
    agg: Aggregator,
    inputs: &WalkInputs,
    trace: &Trace,
    grad_emb: &Array2<f64>,
) -> Vec<LayerParams> {
    // through the L2 normalisation: (g - e (e.g)) / |y|
    let dots = (&trace.emb * grad_emb).sum_axis(Axis(1));
    let grad_raw = (grad_emb - &trace.emb * &dots.insert_axis(Axis(1))) / &trace.norms.view().insert_axis(Axis(1));

    let last = layers.len() - 1;
    let mut g_h = Array2::zeros(trace.us[last].raw_dim());
    for (w, row) in inputs.target_rows().enumerate() {
        g_h.row_mut(row).assign(&grad_raw.row(w));
    }
    let mut grads: Vec<LayerParams> = layers.iter().map(LayerParams::zeros_like).collect();
    for k in (0..layers.len()).rev() {
        let g_u = if k == last {
            g_h
        } else {
            let mut g = g_h;
            g.zip_mut_with(&trace.us[k], |gv, &u| {
                if u <= 0.0 {
                    *gv = 0.0;
                }
            });
            g
        };
        grads[k].weights = g_u.t().dot(&trace.zs[k]);
        grads[k].bias = g_u.sum_axis(Axis(0));
        if k == 0 {
            break;
        }
        g_h = aggregate_adjoint(&g_u.dot(&layers[k].weights), &inputs.starts, agg);
    }
    grads
}

/// Final-layer output of one walk: every node's embedding and the target's.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub nodes: Array2<f64>,
    pub target: Array1<f64>,
}

/// Runs one branch over a single walk (`length x d_in` features, last row the
/// target). Outputs are not normalised.
pub fn forward_branch(
    layers: &[LayerParams],
    walk_features: &Array2<f64>,
    aggregator: Aggregator,
) -> Result<BranchOutput, ModelError> {
    check_layers(layers, walk_features.ncols())?;
    let inputs = WalkInputs::from_walks(walk_features.ncols(), std::slice::from_ref(walk_features))?;
    let trace = forward_trace(layers, aggregator, &inputs);
    Ok(BranchOutput {
        nodes: trace.node_outputs().clone(),
        target: trace.raw.row(0).to_owned(),
    })
}

/// Unit-length target embeddings for a stack of walks.
pub fn embed_walks(
    layers: &[LayerParams],
    aggregator: Aggregator,
    inputs: &WalkInputs,
) -> Result<Array2<f64>, ModelError> {
    check_layers(layers, inputs.dim())?;
    if inputs.walk_count() == 0 {
        return Ok(Array2::zeros((0, layers.last().unwrap().d_out())));
    }
    Ok(forward_trace(layers, aggregator, inputs).emb)
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (d(anchor, positive) - d(anchor, negative) + margin).max(0.0)
}

/// Streetview anchor walks with their satellite positives and negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkBatch {
    pub anchors: WalkInputs,
    pub positives: WalkInputs,
    pub negatives: WalkInputs,
}

impl WalkBatch {
    pub fn len(&self) -> usize {
        self.anchors.walk_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, params: &ModelParams) -> Result<(), ModelError> {
        let n = self.len();
        if self.positives.walk_count() != n || self.negatives.walk_count() != n {
            return Err(ModelError::Dimension("batch parts differ in walk count".into()));
        }
        if n == 0 {
            return Err(ModelError::Dimension("empty batch".into()));
        }
        for (i, (a, p)) in self
            .anchors
            .starts
            .windows(2)
            .zip(self.positives.starts.windows(2))
            .enumerate()
        {
            if a[1] - a[0] != p[1] - p[0] {
                return Err(ModelError::Dimension(format!(
                    "anchor {i} and its positive differ in length"
                )));
            }
        }
        check_layers(&params.street_branch, self.anchors.dim())?;
        check_layers(&params.sat_branch, self.positives.dim())?;
        check_layers(&params.sat_branch, self.negatives.dim())
    }
}

struct Triplets {
    street: Trace,
    pos: Trace,
    neg: Trace,
    losses: Vec<f64>,
}

fn forward_batch(params: &ModelParams, batch: &WalkBatch, margin: f64) -> Triplets {
    let agg = params.aggregator;
    let street = forward_trace(&params.street_branch, agg, &batch.anchors);
    let pos = forward_trace(&params.sat_branch, agg, &batch.positives);
    let neg = forward_trace(&params.sat_branch, agg, &batch.negatives);
    let losses = (0..batch.len())
        .map(|i| {
            triplet_loss(
                street.emb.row(i).as_slice().unwrap(),
                pos.emb.row(i).as_slice().unwrap(),
                neg.emb.row(i).as_slice().unwrap(),
                margin,
            )
        })
        .collect();
    Triplets {
        street,
        pos,
        neg,
        losses,
    }
}

/// Mean triplet loss over the batch.
pub fn batch_loss(params: &ModelParams, batch: &WalkBatch, margin: f64) -> Result<f64, ModelError> {
    batch.check(params)?;
    let t = forward_batch(params, batch, margin);
    Ok(t.losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Smallest distance from a point where the loss is not differentiable: the
/// least `|pre-activation|` over hidden ReLUs, the least `|hinge argument|`
/// over triplets, and the least output norm (normalising a zero vector has no
/// derivative). Finite-difference checks need this well above their step.
pub fn kink_clearance(params: &ModelParams, batch: &WalkBatch, margin: f64) -> Result<f64, ModelError> {
    batch.check(params)?;
    let t = forward_batch(params, batch, margin);
    let mut least = f64::INFINITY;
    for trace in [&t.street, &t.pos, &t.neg] {
        for u in &trace.us[..trace.us.len() - 1] {
            least = u.iter().fold(least, |m, v| m.min(v.abs()));
        }
        least = trace.norms.iter().fold(least, |m, v| m.min(*v));
    }
    for i in 0..batch.len() {
        let d = |x: ArrayView1<f64>, y: ArrayView1<f64>| (&x - &y).mapv(|v| v * v).sum();
        let arg = d(t.street.emb.row(i), t.pos.emb.row(i)) - d(t.street.emb.row(i), t.neg.emb.row(i)) + margin;
        least = least.min(arg.abs());
    }
    Ok(least)
}

/// Mean batch loss and its gradient with respect to every parameter.
/// Triplets whose hinge is inactive contribute nothing.
pub fn backward(batch: &WalkBatch, params: &ModelParams, margin: f64) -> Result<(f64, ModelParams), ModelError> {
    batch.check(params)?;
    let t = forward_batch(params, batch, margin);
    let n = batch.len();
    let loss = t.losses.iter().sum::<f64>() / n as f64;
    let mut grads = params.zeros_like();
    if t.losses.iter().all(|&l| l <= 0.0) {
        return Ok((loss, grads));
    }

    let d = params.output_dim();
    let (mut g_a, mut g_p, mut g_n) = (Array2::zeros((n, d)), Array2::zeros((n, d)), Array2::zeros((n, d)));
    let scale = 2.0 / n as f64;
    for i in 0..n {
        if t.losses[i] <= 0.0 {
            continue;
        }
        let (a, p, q) = (t.street.emb.row(i), t.pos.emb.row(i), t.neg.emb.row(i));
        g_a.row_mut(i).assign(&((&q - &p) * scale));
        g_p.row_mut(i).assign(&((&p - &a) * scale));
        g_n.row_mut(i).assign(&((&a - &q) * scale));
    }
    let agg = params.aggregator;
    grads.street_branch = backward_trace(&params.street_branch, agg, &batch.anchors, &t.street, &g_a);
    grads.sat_branch = backward_trace(&params.sat_branch, agg, &batch.positives, &t.pos, &g_p);
    let neg = backward_trace(&params.sat_branch, agg, &batch.negatives, &t.neg, &g_n);
    for (acc, g) in grads.sat_branch.iter_mut().zip(neg) {
        acc.weights += &g.weights;
        acc.bias += &g.bias;
    }
    Ok((loss, grads))
}
