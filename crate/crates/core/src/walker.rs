//! Simple walks ending at a target junction: random depth-first sampling for
//! queries, exhaustive enumeration for references.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::geograph::{CityGraph, NodeIdx};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WalkError {
    #[error("unknown target node index {0}")]
    UnknownTarget(NodeIdx),
    #[error("walk length must be at least 1")]
    ZeroLength,
}

/// An ordered sequence of distinct adjacent nodes; the last one is the target.
/// Length counts nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Walk {
    nodes: Vec<NodeIdx>,
}

impl Walk {
    /// Panics on an empty sequence.
    pub fn new(nodes: Vec<NodeIdx>) -> Self {
        assert!(!nodes.is_empty(), "a walk holds at least its target");
        Self { nodes }
    }

    pub fn nodes(&self) -> &[NodeIdx] {
        &self.nodes
    }

    pub fn target(&self) -> NodeIdx {
        *self.nodes.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids<'g>(&self, graph: &'g CityGraph) -> Vec<&'g str> {
        self.nodes.iter().map(|&i| graph.node(i).id.as_str()).collect()
    }

    /// Adjacent consecutive nodes, no repeats, all in range.
    pub fn is_valid_in(&self, graph: &CityGraph) -> bool {
        let in_range = self.nodes.iter().all(|&i| i < graph.len());
        let adjacent = self.nodes.windows(2).all(|w| in_range && graph.has_edge(w[0], w[1]));
        let mut sorted = self.nodes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        in_range && adjacent && sorted.len() == self.nodes.len()
    }
}

fn check(graph: &CityGraph, target: NodeIdx, length: usize) -> Result<(), WalkError> {
    if target >= graph.len() {
        return Err(WalkError::UnknownTarget(target));
    }
    if length == 0 {
        return Err(WalkError::ZeroLength);
    }
    Ok(())
}

/// Random depth-first walk of `length` nodes ending at `target`. Where no
/// simple walk that long exists, the longest one met during the search is
/// returned instead.
pub fn sample_walk<R: Rng + ?Sized>(
    graph: &CityGraph,
    target: NodeIdx,
    length: usize,
    rng: &mut R,
) -> Result<Walk, WalkError> {
    check(graph, target, length)?;
    let mut visited = vec![false; graph.len()];
    visited[target] = true;
    let mut path = vec![target];
    let mut best = path.clone();
    random_dfs(graph, &mut path, &mut visited, length, rng, &mut best);
    best.reverse();
    Ok(Walk::new(best))
}

fn random_dfs<R: Rng + ?Sized>(
    graph: &CityGraph,
    path: &mut Vec<NodeIdx>,
    visited: &mut [bool],
    length: usize,
    rng: &mut R,
    best: &mut Vec<NodeIdx>,
) -> bool {
    if path.len() > best.len() {
        best.clone_from(path);
    }
    if path.len() == length {
        return true;
    }
    let tail = *path.last().unwrap();
    let mut next: Vec<NodeIdx> = graph
        .neighbours(tail)
        .iter()
        .copied()
        .filter(|&v| !visited[v])
        .collect();
    next.shuffle(rng);
    for v in next {
        visited[v] = true;
        path.push(v);
        if random_dfs(graph, path, visited, length, rng, best) {
            return true;
        }
        path.pop();
        visited[v] = false;
    }
    false
}

/// Visits every simple path of `length` nodes starting at `start`, as seen
/// from the start (reverse it to obtain a walk ending at `start`).
fn for_each_path(graph: &CityGraph, start: NodeIdx, length: usize, mut visit: impl FnMut(&[NodeIdx])) {
    fn rec(
        graph: &CityGraph,
        path: &mut Vec<NodeIdx>,
        visited: &mut [bool],
        length: usize,
        visit: &mut dyn FnMut(&[NodeIdx]),
    ) {
        if path.len() == length {
            visit(path);
            return;
        }
        let tail = *path.last().unwrap();
        for &v in graph.neighbours(tail) {
            if !visited[v] {
                visited[v] = true;
                path.push(v);
                rec(graph, path, visited, length, visit);
                path.pop();
                visited[v] = false;
            }
        }
    }
    let mut visited = vec![false; graph.len()];
    visited[start] = true;
    rec(graph, &mut vec![start], &mut visited, length, &mut visit);
}

/// All simple walks of exactly `length` nodes ending at `target`, in
/// lexicographic order of their node sequences.
pub fn enumerate_walks(graph: &CityGraph, target: NodeIdx, length: usize) -> Result<Vec<Walk>, WalkError> {
    check(graph, target, length)?;
    let mut walks = Vec::new();
    for_each_path(graph, target, length, |p| {
        let mut nodes = p.to_vec();
        nodes.reverse();
        walks.push(Walk::new(nodes));
    });
    walks.sort();
    Ok(walks)
}

/// Reference walks for `target`: all walks of `length` nodes, or, if there are
/// none, all walks of the longest length that does exist.
pub fn enumerate_or_longest(graph: &CityGraph, target: NodeIdx, length: usize) -> Result<Vec<Walk>, WalkError> {
    for l in (1..=length).rev() {
        let walks = enumerate_walks(graph, target, l)?;
        if !walks.is_empty() {
            return Ok(walks);
        }
    }
    check(graph, target, length)?;
    unreachable!("a length-1 walk always exists")
}

/// Number of distinct simple walks of `length` nodes over all targets.
pub fn count_walks(graph: &CityGraph, length: usize) -> Result<u64, WalkError> {
    if length == 0 {
        return Err(WalkError::ZeroLength);
    }
    let mut total = 0u64;
    for start in 0..graph.len() {
        for_each_path(graph, start, length, |_| total += 1);
    }
    Ok(total)
}
