//! The twelve acceptance criteria, each run at its stated tolerance. Every
//! criterion prints one PASS/FAIL line; the test fails if any criterion not
//! listed in `KNOWN_SHORTFALLS` fails. Runs without the test harness so the
//! report is always shown.

use std::fs;
use std::time::{Duration, Instant};

use geowalk::bvm::FilterMode;
use geowalk::evalbench::{benchmark_queries, build_references, run_benchmark, run_cell, BenchmarkConfig, ReportTable};
use geowalk::geograph::{
    forward_azimuth, split_graph, wrap_degrees, CityGraph, GeoCoord, GraphSplit, NodeSpec, EARTH_RADIUS_M,
};
use geowalk::gnnembed::{
    backward, batch_loss, kink_clearance, train, Aggregator, ModelParams, TrainConfig, WalkBatch, WalkInputs,
};
use geowalk::retrieval::{build_index, query_topk, squared_distance, Embedding};
use geowalk::synthfeat::{generate_city, generate_features, FeatureSet};
use geowalk::walker::{count_walks, enumerate_walks};
use geowalk_cli::{
    cmd_eval, cmd_synth, cmd_train, BenchSettings, EvalParams, SynthParams, TrainParams, CHECKPOINT_FILE,
    FEATURES_FILE, GRAPH_FILE, REPORT_FILE,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason kept next to the measurement
/// in the printed line. Empty when everything holds.
const KNOWN_SHORTFALLS: &[u32] = &[];

const CITY_SEEDS: [u64; 3] = [0, 1, 2];
const NOISE: f64 = 0.5;

struct Verdict {
    id: u32,
    pass: bool,
    detail: String,
    took: Duration,
}

fn check(id: u32, verdicts: &mut Vec<Verdict>, f: impl FnOnce() -> (bool, String)) {
    let t = Instant::now();
    let (pass, detail) = f();
    let v = Verdict {
        id,
        pass,
        detail,
        took: t.elapsed(),
    };
    println!(
        "criterion {:>2} {}  {} [{:.1}s]",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        v.took.as_secs_f64()
    );
    verdicts.push(v);
}

fn origin() -> GeoCoord {
    GeoCoord::new(51.5, -0.1).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, max_len: usize) -> WalkBatch {
    let (mut a, mut p, mut q) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let len = rng.random_range(1..=max_len);
        a.push(random_matrix(rng, len, dim));
        p.push(random_matrix(rng, len, dim));
        let len = rng.random_range(1..=max_len);
        q.push(random_matrix(rng, len, dim));
    }
    WalkBatch {
        anchors: WalkInputs::from_walks(dim, &a).unwrap(),
        positives: WalkInputs::from_walks(dim, &p).unwrap(),
        negatives: WalkInputs::from_walks(dim, &q).unwrap(),
    }
}

fn gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-4;
    let (mut nets, mut skipped, mut entries, mut worst) = (0, 0, 0usize, 0.0f64);
    while nets < 100 {
        let agg = if nets % 2 == 0 {
            Aggregator::Mean
        } else {
            Aggregator::Sum
        };
        let depth = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=16)).collect();
        let mut params = ModelParams::init(&dims, agg, rng.random()).unwrap();
        // biases start at zero; jitter them so outputs stay away from the origin
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let batch = random_batch(&mut rng, 4, dims[0], 3);
        let margin = rng.random_range(0.5..2.5);
        // finite differences are meaningless within `h` of a ReLU or hinge kink
        if kink_clearance(&params, &batch, margin).unwrap() < 1e-3 {
            skipped += 1;
            continue;
        }
        let (_, grads) = backward(&batch, &params, margin).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let mut probe = params.clone();
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let mut flat = 0;
        for (ti, &size) in sizes.iter().enumerate() {
            for i in 0..size {
                let orig = probe.tensors()[ti][i];
                let mut at = |step: f64| {
                    probe.tensors_mut()[ti][i] = orig + step;
                    batch_loss(&probe, &batch, margin).unwrap()
                };
                // fourth-order central stencil
                let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                probe.tensors_mut()[ti][i] = orig;
                let a = analytic[flat];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max(rel);
                flat += 1;
                entries += 1;
            }
        }
        nets += 1;
    }
    (
        worst < 1e-4,
        format!("gradients: {nets} nets, {entries} entries, worst relative error {worst:.2e} ({skipped} draws near a kink redrawn)"),
    )
}

fn retrieval() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 16;
    let points: Vec<Embedding> = (0..2000)
        .map(|i| Embedding {
            walk: i,
            node: i / 3,
            vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let index = build_index(points.clone()).unwrap();
    let mut mismatches = 0;
    for _ in 0..500 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
        let mut brute: Vec<(f64, usize)> = points
            .iter()
            .map(|p| (squared_distance(&q, &p.vector), p.walk))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in [1, 10, 50] {
            let got = query_topk(&index, &q, k).unwrap();
            let same = got.ranked.len() == k
                && got
                    .ranked
                    .iter()
                    .zip(&brute)
                    .all(|(c, b)| c.walk == b.1 && (c.distance - b.0).abs() <= 1e-12);
            if !same {
                mismatches += 1;
            }
        }
    }
    (
        mismatches == 0,
        format!("kd-tree vs scan: 500 queries x 2000 points x k in {{1,10,50}}, {mismatches} mismatches"),
    )
}

/// Every sequence of distinct, consecutively adjacent nodes ending at
/// `target`, grown backwards from the target.
fn dfs_walks(g: &CityGraph, target: usize, length: usize) -> Vec<Vec<usize>> {
    fn grow(g: &CityGraph, rev: &mut Vec<usize>, length: usize, out: &mut Vec<Vec<usize>>) {
        if rev.len() == length {
            out.push(rev.iter().rev().copied().collect());
            return;
        }
        let head = *rev.last().unwrap();
        for &n in g.neighbours(head) {
            if !rev.contains(&n) {
                rev.push(n);
                grow(g, rev, length, out);
                rev.pop();
            }
        }
    }
    let mut out = Vec::new();
    grow(g, &mut vec![target], length, &mut out);
    out.sort();
    out
}

fn random_connected(rng: &mut ChaCha8Rng) -> CityGraph {
    let n = rng.random_range(2..=12);
    let name = |i: usize| format!("j{i:02}");
    let nodes = (0..n)
        .map(|i| {
            let p = origin().offset_metres(rng.random_range(-800.0..800.0), rng.random_range(-800.0..800.0));
            NodeSpec {
                id: name(i),
                lat: p.lat,
                lon: p.lon,
                yaw: 0.0,
                streetview_count: 5,
            }
        })
        .collect();
    let mut edges: Vec<(String, String)> = (1..n).map(|i| (name(rng.random_range(0..i)), name(i))).collect();
    for _ in 0..rng.random_range(0..=n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a < b && !edges.contains(&(name(a), name(b))) {
            edges.push((name(a), name(b)));
        }
    }
    CityGraph::new("random", nodes, &edges).unwrap()
}

fn walk_counts() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut disagreements, mut cases) = (0, 0);
    for _ in 0..20 {
        let g = random_connected(&mut rng);
        assert!(g.is_connected());
        for length in 1..=5 {
            let mut total = 0u64;
            for t in 0..g.len() {
                let want = dfs_walks(&g, t, length);
                let got: Vec<Vec<usize>> = enumerate_walks(&g, t, length)
                    .unwrap()
                    .iter()
                    .map(|w| w.nodes().to_vec())
                    .collect();
                disagreements += usize::from(got != want);
                total += want.len() as u64;
            }
            disagreements += usize::from(count_walks(&g, length).unwrap() != total);
            cases += 1;
        }
    }
    (
        disagreements == 0,
        format!("walk enumeration vs DFS: 20 graphs x lengths 1-5 ({cases} cases), {disagreements} disagreements"),
    )
}

fn azimuths() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut worst_plane, mut worst_back) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let a = GeoCoord::new(rng.random_range(-70.0..70.0), rng.random_range(-180.0..180.0)).unwrap();
        let (dist, dir) = (rng.random_range(10.0..2000.0), rng.random_range(0.0f64..360.0));
        let b = a.offset_metres(dist * dir.to_radians().cos(), dist * dir.to_radians().sin());
        let mid = ((a.lat + b.lat) / 2.0).to_radians();
        let north = (b.lat - a.lat).to_radians() * EARTH_RADIUS_M;
        let east = wrap_degrees(b.lon - a.lon).to_radians() * EARTH_RADIUS_M * mid.cos();
        let plane = east.atan2(north).to_degrees();
        let fwd = forward_azimuth(a, b).unwrap();
        let back = forward_azimuth(b, a).unwrap();
        worst_plane = worst_plane.max(wrap_degrees(fwd - plane).abs());
        worst_back = worst_back.max(wrap_degrees(back - fwd - 180.0).abs());
    }
    (
        worst_plane < 0.1 && worst_back < 0.2,
        format!("azimuth: worst tangent-plane gap {worst_plane:.4} deg, worst reverse gap {worst_back:.4} deg over 100 pairs"),
    )
}

/// One seeded train/test city pair with the three models the trend
/// criteria need.
struct City {
    seed: u64,
    test: CityGraph,
    test_features: FeatureSet,
    base: ReportTable,
    base_params: ModelParams,
    narrow: ReportTable,
    short_walks: ReportTable,
    one_capture: ReportTable,
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        captures: Some(5),
        seed,
        ..TrainConfig::default()
    }
}

fn build_city(seed: u64) -> City {
    let city = generate_city(400, 0.25, 0.15, origin(), 100.0, 10 + seed).unwrap();
    let features = generate_features(&city, 768, 8, NOISE, 10 + seed).unwrap();
    let split = split_graph(&city, 0.1, seed).unwrap();
    let test = generate_city(400, 0.25, 0.15, origin(), 100.0, 500 + seed).unwrap();
    let test_features = generate_features(&test, 768, 8, NOISE, 500 + seed).unwrap();

    let base_cfg = train_config(seed);
    let base_params = train(&split, &features, &base_cfg).unwrap().params;
    let wide = BenchmarkConfig {
        fovs: vec![360.0, 180.0],
        modes: vec![FilterMode::None, FilterMode::Bvm, FilterMode::BvmYaw],
        ..BenchmarkConfig::default()
    };
    let base = run_benchmark(&test, &test_features, &base_params, &wide).unwrap();
    let ninety = BenchmarkConfig {
        fovs: vec![90.0],
        ..BenchmarkConfig::default()
    };
    let narrow = run_benchmark(&test, &test_features, &base_params, &ninety).unwrap();

    let wl1 = TrainConfig {
        walk_length: 1,
        ..base_cfg.clone()
    };
    let params = train(&split, &features, &wl1).unwrap().params;
    let short = BenchmarkConfig {
        walk_length: 1,
        ..BenchmarkConfig::default()
    };
    let short_walks = run_benchmark(&test, &test_features, &params, &short).unwrap();

    let c1 = TrainConfig {
        captures: Some(1),
        ..base_cfg
    };
    let params = train(&split, &features, &c1).unwrap().params;
    let one_capture = run_benchmark(&test, &test_features, &params, &BenchmarkConfig::default()).unwrap();

    City {
        seed,
        test,
        test_features,
        base,
        base_params,
        narrow,
        short_walks,
        one_capture,
    }
}

fn top1(table: &ReportTable, fov: f64, mode: FilterMode, seed: Option<u64>) -> f64 {
    table.find(fov, mode, seed).unwrap().recall(1).unwrap()
}

fn bvm_soundness(cities: &[City]) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut filtered = 0;
    for c in cities {
        let base = top1(&c.base, 360.0, FilterMode::None, None);
        ok &= (0.3..=0.7).contains(&base);
        notes.push(format!("city {} base {base:.3}", c.seed));
        for fov in [360.0, 180.0] {
            for seed in [Some(0), Some(1), Some(2), None] {
                let none = c.base.find(fov, FilterMode::None, seed).unwrap();
                let bvm = c.base.find(fov, FilterMode::Bvm, seed).unwrap();
                ok &= none.recall_k.iter().zip(&bvm.recall_k).all(|(a, b)| b.1 >= a.1);
            }
        }
        let bc = BenchmarkConfig::default();
        let refs = build_references(&c.base_params, &c.test, &c.test_features, bc.walk_length, bc.bins).unwrap();
        for s in [0, 1, 2] {
            let qs = benchmark_queries(&c.test, &c.test_features, bc.walk_length, s).unwrap();
            for fov in [360.0, 180.0] {
                for mode in [FilterMode::Bvm, FilterMode::BvmYaw] {
                    let cell =
                        run_cell(&c.base_params, &c.test, &c.test_features, &refs, &qs, fov, mode, &bc, s).unwrap();
                    filtered += cell.truth_filtered;
                }
            }
        }
    }
    ok &= filtered == 0;
    (
        ok,
        format!(
            "bvm >= none at every k; {}; true node filtered {filtered} times",
            notes.join(", ")
        ),
    )
}

fn yaw_uplift(cities: &[City]) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for c in cities {
        let bvm = top1(&c.base, 360.0, FilterMode::Bvm, None);
        let yaw = top1(&c.base, 360.0, FilterMode::BvmYaw, None);
        ok &= yaw >= bvm;
        notes.push(format!("{bvm:.3}->{yaw:.3}"));
    }
    (ok, format!("recall@1 bvm -> bvm-yaw per city: {}", notes.join(", ")))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn walk_length_trend(cities: &[City]) -> (bool, String) {
    let l4 = mean(cities.iter().map(|c| top1(&c.base, 360.0, FilterMode::None, None)));
    let l1 = mean(
        cities
            .iter()
            .map(|c| top1(&c.short_walks, 360.0, FilterMode::None, None)),
    );
    (
        l4 - l1 >= 0.05,
        format!(
            "mean recall@1 length 4 {l4:.3} vs length 1 {l1:.3} (gap {:.3})",
            l4 - l1
        ),
    )
}

fn capture_trend(cities: &[City]) -> (bool, String) {
    let c5 = mean(cities.iter().map(|c| top1(&c.base, 360.0, FilterMode::None, None)));
    let c1 = mean(
        cities
            .iter()
            .map(|c| top1(&c.one_capture, 360.0, FilterMode::None, None)),
    );
    (
        c5 >= c1,
        format!("mean recall@1 with 5 captures {c5:.3} vs 1 capture {c1:.3}"),
    )
}

fn fov_order(cities: &[City]) -> (bool, String) {
    let mut ok = true;
    let mut notes = Vec::new();
    for c in cities {
        let full = top1(&c.base, 360.0, FilterMode::None, None);
        let half = top1(&c.base, 180.0, FilterMode::None, None);
        let quarter = top1(&c.narrow, 90.0, FilterMode::None, None);
        ok &= full >= half && half >= quarter;
        notes.push(format!("{full:.3}/{half:.3}/{quarter:.3}"));
    }
    (ok, format!("recall@1 at 360/180/90 per city: {}", notes.join(", ")))
}

fn loss_and_toy() -> (bool, String) {
    let city = generate_city(144, 0.2, 0.1, origin(), 100.0, 3).unwrap();
    let feats = generate_features(&city, 768, 8, 0.0, 3).unwrap();
    let split = split_graph(&city, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let out = train(&split, &feats, &cfg).unwrap();
    let (first, last) = (out.initial_loss(), out.final_loss());

    // the toy is too small to hold out a corner, so it validates on itself
    // and the last epoch's weights are scored
    let toy = generate_city(9, 0.0, 0.0, origin(), 100.0, 77).unwrap();
    let toy_feats = generate_features(&toy, 128, 8, 0.0, 77).unwrap();
    let toy_split = GraphSplit {
        train: toy.clone(),
        validation: toy.clone(),
        edge_cut: Vec::new(),
    };
    let toy_cfg = TrainConfig {
        epochs: 5000,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        plateau_factor: 1.0,
        layer_dims: vec![128, 64, 32],
        ..TrainConfig::default()
    };
    let toy_out = train(&toy_split, &toy_feats, &toy_cfg).unwrap();
    let table = run_benchmark(&toy, &toy_feats, &toy_out.final_params, &BenchmarkConfig::default()).unwrap();
    let toy_top1: Vec<f64> = table.rows.iter().map(|r| r.recall(1).unwrap()).collect();
    let solved = toy_top1.iter().all(|&r| r == 1.0);
    (
        last < 0.5 * first && solved,
        format!(
            "noise-free loss {first:.4} -> {last:.4} in 30 epochs; 3x3 toy recall@1 per seed and mean {:?}",
            toy_top1.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city");
    let synth = SynthParams {
        dim: 768,
        ..SynthParams::new(100, NOISE, 21)
    };
    cmd_synth(&synth, &city).unwrap();
    let (graph, features) = (city.join(GRAPH_FILE), city.join(FEATURES_FILE));
    let bench = BenchSettings {
        fovs: vec![360.0, 180.0],
        modes: vec!["none".into(), "bvm".into(), "bvm-yaw".into()],
        ..BenchSettings::default()
    };
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for run in 0..2 {
        let model = dir.path().join(format!("model-{run}"));
        let tp = TrainParams {
            graph: graph.clone(),
            features: features.clone(),
            val_fraction: 0.1,
            train: TrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
                seed: 21,
                ..TrainConfig::default()
            },
        };
        cmd_train(&tp, &model, None).unwrap();
        let ep = EvalParams {
            checkpoint: model.join(CHECKPOINT_FILE),
            graph: graph.clone(),
            features: features.clone(),
            bench: bench.clone(),
        };
        let eval = dir.path().join(format!("eval-{run}"));
        cmd_eval(&ep, &eval, None).unwrap();
        checkpoints.push(fs::read(model.join(CHECKPOINT_FILE)).unwrap());
        reports.push(fs::read(eval.join(REPORT_FILE)).unwrap());
    }
    let same = reports[0] == reports[1] && checkpoints[0] == checkpoints[1];
    (
        same,
        format!(
            "two train+eval runs: report csv {} bytes, identical: {same}",
            reports[0].len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut verdicts = Vec::new();
    check(1, &mut verdicts, gradients);
    check(2, &mut verdicts, retrieval);
    check(3, &mut verdicts, walk_counts);
    check(4, &mut verdicts, azimuths);

    let t = Instant::now();
    let cities: Vec<City> = CITY_SEEDS.iter().map(|&s| build_city(s)).collect();
    println!("trained 9 models on 3 city pairs in {:.1}s", t.elapsed().as_secs_f64());
    check(5, &mut verdicts, || bvm_soundness(&cities));
    check(6, &mut verdicts, || yaw_uplift(&cities));
    check(7, &mut verdicts, || walk_length_trend(&cities));
    check(8, &mut verdicts, || capture_trend(&cities));
    check(9, &mut verdicts, || fov_order(&cities));
    check(10, &mut verdicts, loss_and_toy);
    check(11, &mut verdicts, determinism);
    let total = start.elapsed();
    check(12, &mut verdicts, || {
        (
            total < Duration::from_secs(15 * 60),
            format!("whole suite {:.1}s (budget 900s)", total.as_secs_f64()),
        )
    });

    let unexpected: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.pass && !KNOWN_SHORTFALLS.contains(&v.id))
        .map(|v| v.id)
        .collect();
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("{passed}/{} criteria pass", verdicts.len());
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
