//! Turning walks into embeddings: streetview queries through the street
//! branch, exhaustive satellite references through the satellite branch.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::network::{check_layers, embed_walks, Aggregator, LayerParams, ModelParams, WalkInputs};
use super::ModelError;
use crate::geograph::{CityGraph, NodeIdx};
use crate::synthfeat::FeatureSet;
use crate::walker::{enumerate_or_longest, Walk};

/// How the camera heading at each walk node is chosen for FOV windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum YawMode {
    /// Facing along the direction of travel: away from the previous node, or
    /// toward the next one at the start of a walk. Single-node walks fall
    /// back to the stored yaw.
    #[default]
    Travel,
    /// Always the node's stored capture yaw.
    Stored,
}

/// Heading of the camera at every node of `walk`.
pub fn walk_headings(graph: &CityGraph, walk: &Walk, mode: YawMode) -> Vec<f64> {
    let nodes = walk.nodes();
    (0..nodes.len())
        .map(|j| match mode {
            YawMode::Stored => graph.node(nodes[j]).yaw,
            YawMode::Travel if nodes.len() == 1 => graph.node(nodes[0]).yaw,
            YawMode::Travel if j == 0 => graph.bearing(nodes[0], nodes[1]),
            YawMode::Travel => graph.bearing(nodes[j - 1], nodes[j]),
        })
        .collect()
}

/// Street-branch input rows for `walk`, one capture index per node.
pub fn street_rows(
    graph: &CityGraph,
    features: &FeatureSet,
    walk: &Walk,
    captures: &[usize],
    fov: f64,
    yaw_mode: YawMode,
) -> Result<Array2<f64>, ModelError> {
    if captures.len() != walk.len() {
        return Err(ModelError::Dimension(format!(
            "{} capture choices for a walk of {} nodes",
            captures.len(),
            walk.len()
        )));
    }
    let headings = walk_headings(graph, walk, yaw_mode);
    let mut rows = Array2::zeros((walk.len(), features.dim()));
    for (j, &node) in walk.nodes().iter().enumerate() {
        if captures[j] >= features.captures() {
            return Err(ModelError::Dimension(format!("capture {} out of range", captures[j])));
        }
        rows.row_mut(j)
            .assign(&features.street_input(node, captures[j], fov, headings[j])?);
    }
    Ok(rows)
}

/// Satellite-branch input rows for `walk`.
pub fn sat_rows(features: &FeatureSet, walk: &Walk) -> Array2<f64> {
    features.sat_matrix().select(Axis(0), walk.nodes())
}

/// A query walk with the capture observed at each of its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWalk {
    pub walk: Walk,
    pub captures: Vec<usize>,
}

/// Unit-length street embedding of one query walk.
pub fn embed_query(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    query: &QueryWalk,
    fov: f64,
    yaw_mode: YawMode,
) -> Result<Array1<f64>, ModelError> {
    let emb = embed_queries(params, graph, features, std::slice::from_ref(query), fov, yaw_mode)?;
    Ok(emb.row(0).to_owned())
}

/// Street embeddings for many queries in one stacked pass.
pub fn embed_queries(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    queries: &[QueryWalk],
    fov: f64,
    yaw_mode: YawMode,
) -> Result<Array2<f64>, ModelError> {
    let blocks = queries
        .iter()
        .map(|q| street_rows(graph, features, &q.walk, &q.captures, fov, yaw_mode))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = WalkInputs::from_walks(features.dim(), &blocks)?;
    embed_walks(&params.street_branch, params.aggregator, &inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedding {
    pub walk: Walk,
    pub node: NodeIdx,
    pub vector: Vec<f64>,
}

const REFERENCE_CHUNK: usize = 512;

/// Satellite embeddings of every reference walk of `walk_length` nodes (or the
/// longest available) ending at each node, in node order.
///
/// Aggregation is linear and precedes the first weight matrix, so each node's
/// satellite vector is projected once and walks average the projections.
pub fn embed_references(
    params: &ModelParams,
    graph: &CityGraph,
    features: &FeatureSet,
    walk_length: usize,
) -> Result<Vec<ReferenceEmbedding>, ModelError> {
    let layers = &params.sat_branch;
    check_layers(layers, features.dim())?;
    if features.len() != graph.len() {
        return Err(ModelError::Dimension("features not aligned with graph".into()));
    }
    let projected = features.sat_matrix().dot(&layers[0].weights.t());

    let mut walks = Vec::new();
    for t in 0..graph.len() {
        walks.extend(enumerate_or_longest(graph, t, walk_length)?);
    }
    let mut out = Vec::with_capacity(walks.len());
    for chunk in walks.chunks(REFERENCE_CHUNK) {
        let blocks: Vec<Array2<f64>> = chunk.iter().map(|w| projected.select(Axis(0), w.nodes())).collect();
        let inputs = WalkInputs::from_walks(projected.ncols(), &blocks)?;
        let emb = embed_projected(layers, params.aggregator, &inputs);
        for (w, row) in chunk.iter().zip(emb.rows()) {
            out.push(ReferenceEmbedding {
                node: w.target(),
                walk: w.clone(),
                vector: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Like `embed_walks`, for inputs already multiplied by the first layer's
/// weights.
fn embed_projected(layers: &[LayerParams], agg: Aggregator, inputs: &WalkInputs) -> Array2<f64> {
    use super::network::aggregate;
    let last = layers.len() - 1;
    let mut h = aggregate(inputs.features(), inputs.starts(), agg);
    h += &layers[0].bias;
    if last > 0 {
        h.mapv_inplace(|v| v.max(0.0));
    }
    for (k, layer) in layers.iter().enumerate().skip(1) {
        let z = aggregate(&h, inputs.starts(), agg);
        h = z.dot(&layer.weights.t());
        h += &layer.bias;
        if k != last {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    let targets: Vec<usize> = inputs.starts()[1..].iter().map(|&e| e - 1).collect();
    let mut raw = h.select(Axis(0), &targets);
    for mut r in raw.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    raw
}
