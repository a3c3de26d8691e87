//! Synthetic cities and cross-view features standing in for CNN backbone
//! outputs, plus the binary feature file format.
//!
//! Every junction owns a latent identity (a city-wide appearance style plus an
//! individual part) and a per-heading sector content.
//! Streetview panoramas observe the sectors one angular bin at a time (roads
//! leave a direction-specific signature in the bins they point into); the
//! satellite view sees the whole junction at once and carries the sector
//! average, tiled to the backbone width. Pooling a noise-free panorama over
//! the full circle and lifting it to the backbone width therefore reproduces
//! the satellite vector exactly.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geograph::{wrap_degrees, CityGraph, GeoCoord, GraphError, NodeSpec};
use crate::seed;

pub const CAPTURES_PER_NODE: usize = 5;
pub const DEFAULT_DIM: usize = 768;
pub const DEFAULT_BINS: usize = 8;

const FORMAT_MAGIC: &[u8; 4] = b"SGBF";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Road signatures are shared by every city so what is learnt transfers.
const WORLD_SEED: u64 = 0x5ee_d0fc_17e5;

/// Shape of the latent junction content. A junction's identity is one of a
/// few city-wide appearance styles plus a weaker individual part, so single
/// junctions have look-alikes and the surrounding walk disambiguates them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentModel {
    /// Number of appearance styles per city; 0 gives every junction its own.
    pub styles: usize,
    pub style_scale: f64,
    pub individual_scale: f64,
    /// Per-sector content, node specific.
    pub texture_scale: f64,
    /// Direction signatures of the roads leaving a junction.
    pub road_scale: f64,
}

impl Default for ContentModel {
    fn default() -> Self {
        Self {
            styles: 16,
            style_scale: 1.0,
            individual_scale: 0.5,
            texture_scale: 0.9,
            road_scale: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid city parameters: {0}")]
    CityParams(String),
    #[error("no connected city after 100 attempts")]
    CityAttempts,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph {0:?} has no edges, so no bearings")]
    NoBearings(String),
    #[error("feature dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("field of view must be positive, got {0}")]
    BadFov(f64),
    #[error("no features for node {0:?}")]
    MissingNode(String),
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed feature file: {0}")]
    Malformed(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A panorama reduced to `A` angular sectors of `d_pano` values each. Bin `b`
/// covers north-aligned headings `[b*w - 180, (b+1)*w - 180)` with `w = 360/A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularFeature {
    bins: Array2<f64>,
}

impl AngularFeature {
    pub fn new(bins: Array2<f64>) -> Result<Self, FeatureError> {
        if bins.nrows() < 4 {
            return Err(FeatureError::DimensionMismatch(format!(
                "panorama needs at least 4 bins, got {}",
                bins.nrows()
            )));
        }
        if bins.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Malformed("non-finite panorama value".into()));
        }
        Ok(Self { bins })
    }

    pub fn bin_count(&self) -> usize {
        self.bins.nrows()
    }

    pub fn width(&self) -> usize {
        self.bins.ncols()
    }

    pub fn bins(&self) -> &Array2<f64> {
        &self.bins
    }

    pub fn bin_centre(&self, b: usize) -> f64 {
        let w = 360.0 / self.bin_count() as f64;
        (b as f64 + 0.5) * w - 180.0
    }
}

/// Bin of a panorama with `bins` sectors that contains `heading`.
pub fn heading_bin(heading: f64, bins: usize) -> usize {
    let w = 360.0 / bins as f64;
    (((wrap_degrees(heading) + 180.0) / w).floor() as usize) % bins
}

/// Mean of the bins whose centres lie within `theta_fov / 2` of `yaw`. When
/// the window is narrower than a bin, the nearest bin is used.
pub fn fov_window(pano: &AngularFeature, theta_fov: f64, yaw: f64) -> Result<Array1<f64>, FeatureError> {
    if !(theta_fov > 0.0) {
        return Err(FeatureError::BadFov(theta_fov));
    }
    let half = theta_fov / 2.0;
    let offsets: Vec<f64> = (0..pano.bin_count())
        .map(|b| wrap_degrees(pano.bin_centre(b) - yaw).abs())
        .collect();
    let mut chosen: Vec<usize> = (0..pano.bin_count()).filter(|&b| offsets[b] <= half + 1e-9).collect();
    if chosen.is_empty() {
        let nearest = (0..pano.bin_count())
            .min_by(|&a, &b| offsets[a].total_cmp(&offsets[b]))
            .unwrap();
        chosen.push(nearest);
    }
    let mut out = Array1::zeros(pano.width());
    for &b in &chosen {
        out += &pano.bins.row(b);
    }
    out /= chosen.len() as f64;
    Ok(out)
}

/// Per-node satellite vectors and streetview panoramas, indexed like the
/// graph they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    node_ids: Vec<String>,
    dim: usize,
    bins: usize,
    sat: Array2<f64>,
    street: Vec<Vec<AngularFeature>>,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    node_ids: Vec<String>,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    seed: u64,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn pano_width(&self) -> usize {
        self.dim / self.bins
    }

    pub fn captures(&self) -> usize {
        self.street.first().map_or(0, Vec::len)
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn sat(&self, node: usize) -> ArrayView1<'_, f64> {
        self.sat.row(node)
    }

    /// Satellite vectors, one row per node.
    pub fn sat_matrix(&self) -> &Array2<f64> {
        &self.sat
    }

    pub fn street(&self, node: usize, capture: usize) -> &AngularFeature {
        &self.street[node][capture]
    }

    /// Tiles a panorama-width vector up to the backbone width: the fixed input
    /// projection in front of the street branch.
    pub fn lift(&self, pooled: &Array1<f64>) -> Array1<f64> {
        debug_assert_eq!(pooled.len(), self.pano_width());
        Array1::from_iter((0..self.dim).map(|i| pooled[i % self.pano_width()]))
    }

    /// Street-branch input for one node: FOV window of one capture, lifted.
    pub fn street_input(&self, node: usize, capture: usize, fov: f64, yaw: f64) -> Result<Array1<f64>, FeatureError> {
        Ok(self.lift(&fov_window(self.street(node, capture), fov, yaw)?))
    }

    /// Copy aligned with `graph`'s node indexing, for subgraphs.
    pub fn restrict_to(&self, graph: &CityGraph) -> Result<FeatureSet, FeatureError> {
        let lookup: HashMap<&str, usize> = self
            .node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let rows = graph
            .nodes()
            .iter()
            .map(|n| {
                lookup
                    .get(n.id.as_str())
                    .copied()
                    .ok_or_else(|| FeatureError::MissingNode(n.id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FeatureSet {
            node_ids: rows.iter().map(|&r| self.node_ids[r].clone()).collect(),
            dim: self.dim,
            bins: self.bins,
            sat: self.sat.select(ndarray::Axis(0), &rows),
            street: rows.iter().map(|&r| self.street[r].clone()).collect(),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        })
    }

    /// Sidecar path holding the node id order: `x.bin` -> `x.ids.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("ids.json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let path = path.as_ref();
        let captures = self.captures();
        let mut buf = Vec::with_capacity(HEADER_LEN + self.len() * self.dim * (1 + captures) * 4);
        buf.extend_from_slice(FORMAT_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.len() as u32,
            self.dim as u32,
            self.bins as u32,
            captures as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for n in 0..self.len() {
            for &v in self.sat.row(n) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for pano in &self.street[n] {
                for &v in pano.bins.iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))?;

        let sidecar = Sidecar {
            node_ids: self.node_ids.clone(),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        };
        let side = Self::sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&sidecar).unwrap()).map_err(io_err(&side))
    }
}

/// Reads a feature file (and its id sidecar) and aligns it with `graph`.
pub fn load_features(path: impl AsRef<Path>, graph: &CityGraph) -> Result<FeatureSet, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let side = FeatureSet::sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&side).map_err(io_err(&side))?)
        .map_err(|e| FeatureError::Malformed(format!("{}: {e}", side.display())))?;

    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != FORMAT_MAGIC {
        return Err(FeatureError::Malformed("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, count, dim, bins, captures) = (word(0), word(1), word(2), word(3), word(4));
    if version != FORMAT_VERSION as usize {
        return Err(FeatureError::Malformed(format!("unsupported version {version}")));
    }
    if bins < 4 || dim == 0 || !dim.is_multiple_of(bins) {
        return Err(FeatureError::DimensionMismatch(format!(
            "D={dim} is not a positive multiple of A={bins} (A >= 4)"
        )));
    }
    if captures == 0 {
        return Err(FeatureError::Malformed("zero captures per node".into()));
    }
    if count != sidecar.node_ids.len() {
        return Err(FeatureError::DimensionMismatch(format!(
            "header lists {count} nodes, sidecar {}",
            sidecar.node_ids.len()
        )));
    }
    let per_node = dim * (1 + captures);
    let expected = HEADER_LEN + count * per_node * 4;
    if bytes.len() < expected {
        return Err(FeatureError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FeatureError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - expected
        )));
    }

    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let width = dim / bins;
    let mut sat = Array2::zeros((count, dim));
    let mut street = Vec::with_capacity(count);
    for n in 0..count {
        let block = &values[n * per_node..(n + 1) * per_node];
        sat.row_mut(n).assign(&ArrayView1::from(&block[..dim]));
        let panos = (0..captures)
            .map(|c| {
                let start = dim * (1 + c);
                let arr = Array2::from_shape_vec((bins, width), block[start..start + dim].to_vec()).unwrap();
                AngularFeature::new(arr)
            })
            .collect::<Result<Vec<_>, _>>()?;
        street.push(panos);
    }
    FeatureSet {
        node_ids: sidecar.node_ids,
        dim,
        bins,
        sat,
        street,
        noise_sigma: sidecar.noise_sigma,
        seed: sidecar.seed,
    }
    .restrict_to(graph)
}

/// A jittered grid of junctions with random road closures that never
/// disconnect the city.
pub fn generate_city(
    n_nodes: usize,
    jitter: f64,
    drop_prob: f64,
    origin: GeoCoord,
    spacing_m: f64,
    seed: u64,
) -> Result<CityGraph, FeatureError> {
    let side = (n_nodes as f64).sqrt().round() as usize;
    if n_nodes < 9 || side * side != n_nodes {
        return Err(FeatureError::CityParams(format!(
            "{n_nodes} is not a square of at least 9"
        )));
    }
    if !(0.0..0.5).contains(&drop_prob) {
        return Err(FeatureError::CityParams(format!(
            "drop probability {drop_prob} outside [0, 0.5)"
        )));
    }
    if !(0.0..0.5).contains(&jitter) || !(spacing_m > 0.0) {
        return Err(FeatureError::CityParams(format!(
            "jitter {jitter} must lie in [0, 0.5) and spacing {spacing_m} be positive"
        )));
    }
    let width = format!("{}", n_nodes - 1).len();
    let id = |r: usize, c: usize| format!("n{:0width$}", r * side + c);

    for attempt in 0..100u64 {
        let mut rng = seed::indexed_stream(seed, "city", attempt);
        let mut nodes = Vec::with_capacity(n_nodes);
        for r in 0..side {
            for c in 0..side {
                let dn = rng.random_range(-jitter..=jitter) * spacing_m;
                let de = rng.random_range(-jitter..=jitter) * spacing_m;
                let p = origin.offset_metres(r as f64 * spacing_m + dn, c as f64 * spacing_m + de);
                nodes.push(NodeSpec {
                    id: id(r, c),
                    lat: p.lat,
                    lon: p.lon,
                    yaw: rng.random_range(-180.0..180.0),
                    streetview_count: CAPTURES_PER_NODE as u32,
                });
            }
        }

        let mut grid_edges = Vec::new();
        for r in 0..side {
            for c in 0..side {
                if c + 1 < side {
                    grid_edges.push((r * side + c, r * side + c + 1));
                }
                if r + 1 < side {
                    grid_edges.push((r * side + c, (r + 1) * side + c));
                }
            }
        }
        let (mut kept, mut dropped): (Vec<_>, Vec<_>) = (Vec::new(), Vec::new());
        for e in grid_edges {
            if rng.random_bool(drop_prob) {
                dropped.push(e);
            } else {
                kept.push(e);
            }
        }
        // Reinstate just enough closed roads to reconnect the city.
        let mut dsu = Dsu::new(n_nodes);
        for &(a, b) in &kept {
            dsu.union(a, b);
        }
        for &(a, b) in &dropped {
            if dsu.union(a, b) {
                kept.push((a, b));
            }
        }
        if dsu.components != 1 {
            continue;
        }
        let edges: Vec<(String, String)> = kept
            .iter()
            .map(|&(a, b)| (id(a / side, a % side), id(b / side, b % side)))
            .collect();
        match CityGraph::new(format!("city-{seed}"), nodes, &edges) {
            Ok(g) => return Ok(g),
            Err(GraphError::DegenerateEdge(..)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(FeatureError::CityAttempts)
}

struct Dsu {
    parent: Vec<usize>,
    components: usize,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            components: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        self.components -= 1;
        true
    }
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Synthesises satellite and streetview features for every node of `graph`
/// with the default [`ContentModel`]. Values are rounded to `f32` so a saved
/// and reloaded set is identical.
pub fn generate_features(
    graph: &CityGraph,
    dim: usize,
    bins: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureSet, FeatureError> {
    generate_features_with(graph, dim, bins, noise_sigma, seed, &ContentModel::default())
}

pub fn generate_features_with(
    graph: &CityGraph,
    dim: usize,
    bins: usize,
    noise_sigma: f64,
    seed: u64,
    content: &ContentModel,
) -> Result<FeatureSet, FeatureError> {
    if dim < 8 || bins < 4 || !dim.is_multiple_of(bins) {
        return Err(FeatureError::DimensionMismatch(format!(
            "need D >= 8, A >= 4 and A dividing D; got D={dim}, A={bins}"
        )));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(FeatureError::CityParams(format!(
            "noise sigma {noise_sigma} must be >= 0"
        )));
    }
    if graph.edge_count() == 0 {
        return Err(FeatureError::NoBearings(graph.name().to_string()));
    }
    let scales = [
        content.style_scale,
        content.individual_scale,
        content.texture_scale,
        content.road_scale,
    ];
    if scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(FeatureError::CityParams(
            "content scales must be finite and >= 0".into(),
        ));
    }
    let width = dim / bins;
    let roads = gaussian_matrix(
        &mut seed::stream(WORLD_SEED, &format!("roads-{bins}x{width}")),
        bins,
        width,
        content.road_scale,
    );
    let mut content_rng = seed::stream(seed, "node-content");
    let palette = gaussian_matrix(
        &mut seed::stream(WORLD_SEED, &format!("styles-{}x{width}", content.styles)),
        content.styles,
        width,
        content.style_scale,
    );
    let mut noise_rng = seed::stream(seed, "capture-noise");
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked above");

    let n = graph.len();
    let mut sat = Array2::zeros((n, dim));
    let mut street = Vec::with_capacity(n);
    for (i, node) in graph.nodes().iter().enumerate() {
        let mut identity = gaussian_matrix(&mut content_rng, 1, width, content.individual_scale);
        if content.styles > 0 {
            let style = content_rng.random_range(0..content.styles);
            identity += &palette.row(style);
        }
        let mut sectors = gaussian_matrix(&mut content_rng, bins, width, content.texture_scale);
        sectors += &identity;
        for &b in &node.neighbour_bearings {
            let bin = heading_bin(b, bins);
            let mut row = sectors.row_mut(bin);
            row += &roads.row(bin);
        }
        let mean = sectors.mean_axis(ndarray::Axis(0)).unwrap();
        for (j, v) in sat.row_mut(i).iter_mut().enumerate() {
            *v = f32_round(mean[j % width] + noise.sample(&mut noise_rng));
        }
        let panos = (0..CAPTURES_PER_NODE)
            .map(|_| {
                let bins = sectors.mapv(|v| f32_round(v + noise.sample(&mut noise_rng)));
                AngularFeature { bins }
            })
            .collect();
        street.push(panos);
    }
    Ok(FeatureSet {
        node_ids: graph.nodes().iter().map(|n| n.id.clone()).collect(),
        dim,
        bins,
        sat,
        street,
        noise_sigma,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin() -> GeoCoord {
        GeoCoord::new(42.36, -71.06).unwrap()
    }

    fn pano_with_rows(a: usize) -> AngularFeature {
        AngularFeature::new(Array2::from_shape_fn((a, 2), |(b, j)| (b * 10 + j) as f64)).unwrap()
    }

    #[test]
    fn exact_grid_without_jitter_or_drops() {
        let g = generate_city(9, 0.0, 0.0, origin(), 100.0, 1).unwrap();
        assert_eq!((g.len(), g.edge_count()), (9, 12));
        assert_eq!(g, generate_city(9, 0.0, 0.0, origin(), 100.0, 1).unwrap());
    }

    #[test]
    fn dropped_city_stays_connected() {
        for s in 0..5 {
            let g = generate_city(100, 0.2, 0.1, origin(), 80.0, s).unwrap();
            assert!(g.is_connected());
            assert!(g.edge_count() <= 180 && g.edge_count() >= 99);
        }
    }

    #[test]
    fn city_parameter_errors() {
        assert!(generate_city(10, 0.0, 0.0, origin(), 100.0, 0).is_err());
        assert!(generate_city(4, 0.0, 0.0, origin(), 100.0, 0).is_err());
        assert!(generate_city(16, 0.0, 0.5, origin(), 100.0, 0).is_err());
    }

    #[test]
    fn full_fov_is_mean_of_all_bins() {
        let p = pano_with_rows(8);
        let w = fov_window(&p, 360.0, 33.0).unwrap();
        assert_eq!(w.to_vec(), vec![35.0, 36.0]);
    }

    #[test]
    fn narrow_fov_picks_the_two_forward_bins() {
        // A=8 centres: -157.5 .. 157.5 in 45 degree steps; +-22.5 fall inside (-45, 45).
        let p = pano_with_rows(8);
        let w = fov_window(&p, 90.0, 0.0).unwrap();
        assert_eq!(w.to_vec(), vec![35.0, 36.0]);
        let back = fov_window(&p, 90.0, 180.0).unwrap();
        assert_eq!(back.to_vec(), vec![35.0, 36.0]); // bins 0 and 7: (0+70)/2
        let tiny = fov_window(&p, 1.0, 10.0).unwrap();
        assert_eq!(tiny.to_vec(), vec![40.0, 41.0]);
        assert!(matches!(fov_window(&p, 0.0, 0.0), Err(FeatureError::BadFov(_))));
    }

    #[test]
    fn fov_wraps_yaw() {
        let p = pano_with_rows(8);
        for yaw in [-170.0, -20.0, 0.0, 95.0] {
            assert_eq!(
                fov_window(&p, 90.0, yaw).unwrap(),
                fov_window(&p, 90.0, yaw + 360.0).unwrap()
            );
        }
    }

    #[test]
    fn noise_free_captures_are_identical() {
        let g = generate_city(9, 0.1, 0.0, origin(), 100.0, 2).unwrap();
        let f = generate_features(&g, 32, 4, 0.0, 9).unwrap();
        assert_eq!(f.captures(), CAPTURES_PER_NODE);
        for n in 0..g.len() {
            for c in 1..CAPTURES_PER_NODE {
                assert_eq!(f.street(n, 0), f.street(n, c));
            }
        }
        assert_eq!(f, generate_features(&g, 32, 4, 0.0, 9).unwrap());
    }

    #[test]
    fn feature_parameter_errors() {
        let g = generate_city(9, 0.0, 0.0, origin(), 100.0, 2).unwrap();
        assert!(generate_features(&g, 30, 4, 0.1, 0).is_err());
        assert!(generate_features(&g, 32, 3, 0.1, 0).is_err());
        let lonely = g.induced_subgraph("one", &[0]);
        assert!(matches!(
            generate_features(&lonely, 32, 4, 0.1, 0),
            Err(FeatureError::NoBearings(_))
        ));
    }

    #[test]
    fn binary_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_city(9, 0.1, 0.0, origin(), 100.0, 4).unwrap();
        let f = generate_features(&g, 16, 4, 0.3, 5).unwrap();
        let path = dir.path().join("f.bin");
        f.save(&path).unwrap();
        assert_eq!(load_features(&path, &g).unwrap(), f);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_features(&path, &g), Err(FeatureError::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[16..20].copy_from_slice(&5u32.to_le_bytes()); // A=5 does not divide D=16
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_features(&path, &g),
            Err(FeatureError::DimensionMismatch(_))
        ));

        fs::write(&path, &bytes).unwrap();
        let bigger = generate_city(16, 0.1, 0.0, origin(), 100.0, 4).unwrap();
        assert!(matches!(
            load_features(&path, &bigger),
            Err(FeatureError::MissingNode(_))
        ));
    }
}
