//! Drives the `geowalk` binary end to end on tiny cities.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geowalk::geograph::load_graph;
use geowalk::walker::enumerate_walks;
use geowalk_cli::{cmd_synth, SynthParams, CHECKPOINT_FILE, GRAPH_FILE, MANIFEST_FILE, REPORT_FILE};

fn geowalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geowalk")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = geowalk(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn grid(dir: &Path) {
    let p = SynthParams {
        jitter: 0.0,
        drop_prob: 0.0,
        dim: 16,
        ..SynthParams::new(9, 0.0, 1)
    };
    cmd_synth(&p, dir).unwrap();
}

#[test]
fn stats_on_grid_reports_enumerated_walks() {
    let dir = tempfile::tempdir().unwrap();
    grid(dir.path());
    let g = load_graph(dir.path().join(GRAPH_FILE)).unwrap();
    let walks: usize = (0..g.len()).map(|t| enumerate_walks(&g, t, 4).unwrap().len()).sum();
    let text = ok(&["stats", "--graph", s(dir.path()), "--walk-length", "4"]);
    assert!(text.contains("nodes           9\n"), "{text}");
    assert!(text.contains("edges           12\n"), "{text}");
    assert!(text.contains(&format!("walks (n=4)     {walks}\n")), "{text}");
    assert_eq!(text, ok(&["stats", "--graph", s(&dir.path().join(GRAPH_FILE))]));
}

#[test]
fn stats_on_empty_directory_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = geowalk(&["stats", "--graph", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("graph.json"), "{err}");
    assert!(err.contains("geowalk synth"), "{err}");
}

#[test]
fn narrow_fov_with_bearing_filter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city");
    let model = dir.path().join("model");
    ok(&["synth", "--nodes", "49", "--dim", "16", "--out", s(&city)]);
    ok(&[
        "train",
        "--graph",
        s(&city.join(GRAPH_FILE)),
        "--features",
        s(&city.join("features.bin")),
        "--epochs",
        "1",
        "--out",
        s(&model),
    ]);
    let out = geowalk(&[
        "eval",
        "--checkpoint",
        s(&model.join(CHECKPOINT_FILE)),
        "--graph",
        s(&city.join(GRAPH_FILE)),
        "--features",
        s(&city.join("features.bin")),
        "--fov",
        "90",
        "--mode",
        "bvm",
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("180"));
}

#[test]
fn replayed_runs_reproduce_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let city = dir.path().join("city");
    let model = dir.path().join("model");
    let eval = dir.path().join("eval");
    ok(&[
        "synth",
        "--nodes",
        "64",
        "--dim",
        "16",
        "--seed",
        "3",
        "--out",
        s(&city),
    ]);
    let (graph, feats) = (city.join(GRAPH_FILE), city.join("features.bin"));
    ok(&[
        "train",
        "--graph",
        s(&graph),
        "--features",
        s(&feats),
        "--epochs",
        "2",
        "--lr",
        "0.001",
        "--out",
        s(&model),
    ]);
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&model.join(CHECKPOINT_FILE)),
        "--graph",
        s(&graph),
        "--features",
        s(&feats),
        "--mode",
        "none,bvm,bvm-yaw",
        "--out",
        s(&eval),
    ]);
    assert!(table.contains("bvm-yaw"), "{table}");

    for (name, src) in [("city", &city), ("model", &model), ("eval", &eval)] {
        let again = dir.path().join(format!("{name}-again"));
        ok(&["replay", "--manifest", s(&src.join(MANIFEST_FILE)), "--out", s(&again)]);
        let before: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(src.join(MANIFEST_FILE)).unwrap()).unwrap();
        let after: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(again.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(before["artifacts"], after["artifacts"], "{name}");
        assert_eq!(before["params"], after["params"], "{name}");
    }
    assert_eq!(
        fs::read(eval.join(REPORT_FILE)).unwrap(),
        fs::read(dir.path().join("eval-again").join(REPORT_FILE)).unwrap()
    );
}
