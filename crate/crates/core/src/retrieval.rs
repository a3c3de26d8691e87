//! Exact nearest-neighbour search over reference walk embeddings.
//!
//! A median-split KD-tree with branch-and-bound pruning. Results are ordered
//! by squared Euclidean distance, ties broken by ascending walk id, so any
//! build order yields the same answers.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{self, Write};

use thiserror::Error;

use crate::geograph::{CityGraph, NodeIdx};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("cannot build an index from no embeddings")]
    Empty,
    #[error("embedding for walk {0} has a non-finite entry")]
    NonFinite(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("walk id {0} appears twice")]
    DuplicateWalk(usize),
    #[error("k must be at least 1")]
    ZeroK,
}

/// One reference embedding: a walk, the node it localises, and its vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub walk: usize,
    pub node: NodeIdx,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub node: NodeIdx,
    pub walk: usize,
    /// Squared Euclidean distance to the query.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub query_walk: usize,
    pub ranked: Vec<Candidate>,
}

impl RetrievalResult {
    /// Distinct nodes in rank order, each at its best position.
    pub fn node_ranking(&self) -> Vec<NodeIdx> {
        let mut seen = HashSet::new();
        self.ranked
            .iter()
            .filter(|c| seen.insert(c.node))
            .map(|c| c.node)
            .collect()
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    data: Vec<f64>,
    walks: Vec<usize>,
    nodes: Vec<NodeIdx>,
    order: Vec<usize>,
    tree: Vec<KdNode>,
}

/// Heap entry ordered by (distance, walk id); the heap top is the worst kept.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    distance: f64,
    walk: usize,
    point: usize,
}

impl Ranked {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.walk.cmp(&other.walk))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn build_index(embeddings: Vec<Embedding>) -> Result<EmbeddingIndex, RetrievalError> {
    let dim = embeddings.first().ok_or(RetrievalError::Empty)?.vector.len();
    let mut seen = HashSet::with_capacity(embeddings.len());
    let mut data = Vec::with_capacity(embeddings.len() * dim);
    let mut walks = Vec::with_capacity(embeddings.len());
    let mut nodes = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.vector.len() != dim {
            return Err(RetrievalError::Dimension {
                expected: dim,
                got: e.vector.len(),
            });
        }
        if e.vector.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(e.walk));
        }
        if !seen.insert(e.walk) {
            return Err(RetrievalError::DuplicateWalk(e.walk));
        }
        data.extend_from_slice(&e.vector);
        walks.push(e.walk);
        nodes.push(e.node);
    }
    let mut index = EmbeddingIndex {
        dim,
        order: (0..walks.len()).collect(),
        data,
        walks,
        nodes,
        tree: Vec::new(),
    };
    let n = index.order.len();
    index.build(0, n);
    Ok(index)
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.walks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.walks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `(walk id, node, vector)` for every stored embedding, in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, NodeIdx, &[f64])> {
        (0..self.len()).map(|i| (self.walks[i], self.nodes[i], self.point(i)))
    }

    /// Number of distinct nodes covered by the index.
    pub fn distinct_nodes(&self) -> usize {
        self.nodes.iter().collect::<HashSet<_>>().len()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.tree.len();
        if end - start <= LEAF_SIZE {
            self.tree.push(KdNode::Leaf { start, end });
            return id;
        }
        // split on the axis of widest spread
        let mut best = (0, f64::NEG_INFINITY);
        for axis in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &p in &self.order[start..end] {
                let v = self.data[p * self.dim + axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (axis, hi - lo);
            }
        }
        let axis = best.0;
        if best.1 <= 0.0 {
            // all points coincide
            self.tree.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let (data, dim) = (&self.data, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + axis].total_cmp(&data[b * dim + axis])
        });
        let value = self.data[self.order[mid] * self.dim + axis];
        self.tree.push(KdNode::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.tree[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn search(&self, node: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Ranked>) {
        match self.tree[node] {
            KdNode::Leaf { start, end } => {
                for &p in &self.order[start..end] {
                    let cand = Ranked {
                        distance: squared_distance(self.point(p), q),
                        walk: self.walks[p],
                        point: p,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equality must still be explored: a tie may carry a smaller walk id.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().distance {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// The `min(k, len)` exact nearest neighbours of `q`.
pub fn query_topk(index: &EmbeddingIndex, q: &[f64], k: usize) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if q.len() != index.dim {
        return Err(RetrievalError::Dimension {
            expected: index.dim,
            got: q.len(),
        });
    }
    let k = k.min(index.len());
    let mut heap = BinaryHeap::with_capacity(k + 1);
    index.search(0, q, k, &mut heap);
    let ranked = heap
        .into_sorted_vec()
        .into_iter()
        .map(|r| Candidate {
            node: index.nodes[r.point],
            walk: r.walk,
            distance: r.distance,
        })
        .collect();
    Ok(RetrievalResult { query_walk: 0, ranked })
}

/// Smallest prefix of the ranking that covers at least `min_nodes` distinct
/// nodes (or the whole index).
pub fn query_distinct_nodes(
    index: &EmbeddingIndex,
    q: &[f64],
    min_nodes: usize,
) -> Result<RetrievalResult, RetrievalError> {
    let mut k = min_nodes.max(1);
    loop {
        let result = query_topk(index, q, k)?;
        if result.node_ranking().len() >= min_nodes || result.ranked.len() == index.len() {
            return Ok(result);
        }
        k = (k * 2).min(index.len());
    }
}

/// Debug dump: `walk_id,node_id,e0,...` per stored embedding.
pub fn write_embeddings_csv<W: Write>(index: &EmbeddingIndex, graph: &CityGraph, mut out: W) -> io::Result<()> {
    write!(out, "walk_id,node_id")?;
    for i in 0..index.dim {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for (walk, node, v) in index.entries() {
        write!(out, "{walk},{}", graph.node(node).id)?;
        for x in v {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
