//! Road-graph data model: junction nodes, undirected road edges, north-aligned
//! neighbour bearings and train/validation splitting.
//!
//! Nodes are stored sorted by id, so a node's index doubles as its handle into
//! a [`FeatureSet`](crate::synthfeat::FeatureSet) and index order equals the
//! lexicographic order of ids.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub type NodeIdx = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("non-finite value")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Malformed(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("node {node:?}: {source}")]
    Coordinate {
        node: String,
        #[source]
        source: CoordError,
    },
    #[error("edge ({from}, {to}) references unknown node {missing:?}")]
    DanglingEdge { from: String, to: String, missing: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("self-loop on node {0:?}")]
    SelfLoop(String),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(String, String),
    #[error("edge ({0}, {1}) joins nodes with identical coordinates")]
    DegenerateEdge(String, String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("degenerate pair: identical coordinates")]
    DegeneratePair,
    #[error("validation fraction {0} outside (0, 0.5)")]
    FractionOutOfRange(f64),
    #[error("graph too small to split: {0} nodes, need at least 8")]
    TooSmall(usize),
    #[error("graph {0:?} is not connected")]
    Disconnected(String),
}

/// Wraps any angle into (-180, 180].
pub fn wrap_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// A geographic position in degrees; longitude is wrapped on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    pub lat: f64,
    pub lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self, CoordError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(CoordError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(CoordError::Latitude(lat));
        }
        Ok(Self {
            lat,
            lon: wrap_degrees(lon),
        })
    }

    /// Moves `north_m` / `east_m` metres on the local tangent plane.
    pub fn offset_metres(&self, north_m: f64, east_m: f64) -> GeoCoord {
        let lat = self.lat + (north_m / EARTH_RADIUS_M).to_degrees();
        let lon = self.lon + (east_m / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        GeoCoord {
            lat: lat.clamp(-90.0, 90.0),
            lon: wrap_degrees(lon),
        }
    }
}

/// Initial great-circle heading at `a` toward `b`, clockwise from true north,
/// in (-180, 180].
pub fn forward_azimuth(a: GeoCoord, b: GeoCoord) -> Result<f64, GraphError> {
    if a == b {
        return Err(GraphError::DegeneratePair);
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    if x == 0.0 && y == 0.0 {
        // coincident after wrapping, or a pole-to-pole degenerate
        return Err(GraphError::DegeneratePair);
    }
    Ok(wrap_degrees(y.atan2(x).to_degrees()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub id: String,
    pub location: GeoCoord,
    /// North-centred camera yaw in degrees.
    pub yaw: f64,
    /// Bearings to every neighbour, ascending.
    pub neighbour_bearings: Vec<f64>,
    pub streetview_count: u32,
}

/// Node input for [`CityGraph::new`]; bearings are always derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub yaw: f64,
    #[serde(default = "default_streetview_count")]
    pub streetview_count: u32,
}

fn default_streetview_count() -> u32 {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphDocument {
    name: String,
    nodes: Vec<NodeSpec>,
    edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityGraph {
    name: String,
    nodes: Vec<NodeRecord>,
    index: HashMap<String, NodeIdx>,
    adjacency: Vec<Vec<NodeIdx>>,
    edges: BTreeSet<(NodeIdx, NodeIdx)>,
}

impl CityGraph {
    pub fn new(
        name: impl Into<String>,
        mut specs: Vec<NodeSpec>,
        edges: &[(String, String)],
    ) -> Result<Self, GraphError> {
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(specs.len());
        let mut nodes = Vec::with_capacity(specs.len());
        for (i, s) in specs.into_iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode(s.id));
            }
            let location = GeoCoord::new(s.lat, s.lon).map_err(|source| GraphError::Coordinate {
                node: s.id.clone(),
                source,
            })?;
            if !s.yaw.is_finite() {
                return Err(GraphError::Coordinate {
                    node: s.id,
                    source: CoordError::NonFinite,
                });
            }
            nodes.push(NodeRecord {
                id: s.id,
                location,
                yaw: wrap_degrees(s.yaw),
                neighbour_bearings: Vec::new(),
                streetview_count: s.streetview_count,
            });
        }

        let mut edge_set = BTreeSet::new();
        for (from, to) in edges {
            let lookup = |id: &String| {
                index.get(id).copied().ok_or_else(|| GraphError::DanglingEdge {
                    from: from.clone(),
                    to: to.clone(),
                    missing: id.clone(),
                })
            };
            let (a, b) = (lookup(from)?, lookup(to)?);
            if a == b {
                return Err(GraphError::SelfLoop(from.clone()));
            }
            if !edge_set.insert((a.min(b), a.max(b))) {
                return Err(GraphError::DuplicateEdge(from.clone(), to.clone()));
            }
        }
        Self::from_parts(name.into(), nodes, index, edge_set)
    }

    fn from_parts(
        name: String,
        mut nodes: Vec<NodeRecord>,
        index: HashMap<String, NodeIdx>,
        edges: BTreeSet<(NodeIdx, NodeIdx)>,
    ) -> Result<Self, GraphError> {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        for i in 0..nodes.len() {
            let mut bearings = Vec::with_capacity(adjacency[i].len());
            for &j in &adjacency[i] {
                let b = forward_azimuth(nodes[i].location, nodes[j].location)
                    .map_err(|_| GraphError::DegenerateEdge(nodes[i].id.clone(), nodes[j].id.clone()))?;
                bearings.push(b);
            }
            bearings.sort_by(f64::total_cmp);
            nodes[i].neighbour_bearings = bearings;
        }
        Ok(Self {
            name,
            nodes,
            index,
            adjacency,
            edges,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        Self::new(doc.name, doc.nodes, &doc.edges)
    }

    pub fn to_json_string(&self) -> String {
        let doc = GraphDocument {
            name: self.name.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: n.id.clone(),
                    lat: n.location.lat,
                    lon: n.location.lon,
                    yaw: n.yaw,
                    streetview_count: n.streetview_count,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| (self.nodes[a].id.clone(), self.nodes[b].id.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph document serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, idx: NodeIdx) -> &NodeRecord {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<NodeIdx, GraphError> {
        self.index_of(id).ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    /// Neighbours of `idx`, ascending by index.
    pub fn neighbours(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.adjacency[idx]
    }

    pub fn degree(&self, idx: NodeIdx) -> usize {
        self.adjacency[idx].len()
    }

    pub fn has_edge(&self, a: NodeIdx, b: NodeIdx) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Undirected edges as `(low, high)` index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (NodeIdx, NodeIdx)> + '_ {
        self.edges.iter().copied()
    }

    /// Heading from node `from` toward node `to`.
    pub fn bearing(&self, from: NodeIdx, to: NodeIdx) -> f64 {
        forward_azimuth(self.nodes[from].location, self.nodes[to].location)
            .expect("graph construction rejects coincident neighbours")
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.len()
    }

    /// Subgraph induced by `keep`; edges leaving the set are dropped.
    pub fn induced_subgraph(&self, name: impl Into<String>, keep: &[NodeIdx]) -> CityGraph {
        let mut keep: Vec<NodeIdx> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![usize::MAX; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let nodes: Vec<NodeRecord> = keep.iter().map(|&i| self.nodes[i].clone()).collect();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let edges = self
            .edges
            .iter()
            .filter(|&&(a, b)| remap[a] != usize::MAX && remap[b] != usize::MAX)
            .map(|&(a, b)| (remap[a], remap[b]))
            .collect();
        Self::from_parts(name.into(), nodes, index, edges).expect("subgraph of a valid graph is valid")
    }
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<CityGraph, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CityGraph::from_json_str(&text)
}

/// Bearings from `id` to each of its neighbours, ascending.
pub fn neighbor_bearings(graph: &CityGraph, id: &str) -> Result<Vec<f64>, GraphError> {
    let idx = graph.require(id)?;
    Ok(graph.node(idx).neighbour_bearings.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSplit {
    pub train: CityGraph,
    pub validation: CityGraph,
    /// Removed edges as id pairs.
    pub edge_cut: Vec<(String, String)>,
}

/// Carves a corner of the bounding box holding `val_fraction` of the nodes
/// into a validation graph and cuts every edge crossing the boundary. The seed
/// picks the corner.
pub fn split_graph(graph: &CityGraph, val_fraction: f64, seed: u64) -> Result<GraphSplit, GraphError> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(GraphError::FractionOutOfRange(val_fraction));
    }
    if graph.len() < 8 {
        return Err(GraphError::TooSmall(graph.len()));
    }
    if !graph.is_connected() {
        return Err(GraphError::Disconnected(graph.name.clone()));
    }

    let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_min, mut lon_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for n in &graph.nodes {
        lat_min = lat_min.min(n.location.lat);
        lat_max = lat_max.max(n.location.lat);
        lon_min = lon_min.min(n.location.lon);
        lon_max = lon_max.max(n.location.lon);
    }
    let span = |lo: f64, hi: f64, x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
    let corner = seed::derive_seed(seed, "split-corner") % 4;
    let (cu, cv) = ((corner & 1) as f64, (corner >> 1) as f64);

    let mut order: Vec<(f64, NodeIdx)> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let u = span(lon_min, lon_max, n.location.lon);
            let v = span(lat_min, lat_max, n.location.lat);
            ((u - cu).abs().max((v - cv).abs()), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n_val = ((val_fraction * graph.len() as f64).round() as usize).clamp(1, graph.len() - 1);
    let mut in_val = vec![false; graph.len()];
    for &(_, i) in &order[..n_val] {
        in_val[i] = true;
    }
    let (val_idx, train_idx): (Vec<NodeIdx>, Vec<NodeIdx>) = (0..graph.len()).partition(|&i| in_val[i]);
    let edge_cut = graph
        .edges()
        .filter(|&(a, b)| in_val[a] != in_val[b])
        .map(|(a, b)| (graph.nodes[a].id.clone(), graph.nodes[b].id.clone()))
        .collect();

    Ok(GraphSplit {
        train: graph.induced_subgraph(format!("{}-train", graph.name), &train_idx),
        validation: graph.induced_subgraph(format!("{}-val", graph.name), &val_idx),
        edge_cut,
    })
}
