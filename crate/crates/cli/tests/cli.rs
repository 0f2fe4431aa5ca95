use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segvggt::eval::attention_entropy;
use segvggt::recon::{assemble_instances, write_predictions, InstancePrediction, PredictionFile};
use segvggt::scenegen::{read_f64_raster, read_scene_dir};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segvggt"));
    c.env("SEGVGGT_THREADS", "1");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<Value> {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const CONFIG: &str = r#"{
  "model": {"layers": 2, "dim": 16, "heads": 2, "patch": 8, "queries": 4, "classes": 4,
            "height": 16, "width": 16, "mask_threshold": 0.5, "mlp_ratio": 2},
  "dataset": "data",
  "steps": 6,
  "warmup": 2
}"#;

/// Tiny dataset plus a checkpoint trained on it.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen", "--out", "data", "--scenes", "2", "--views", "3", "--res", "16x16",
        ],
    );
    fs::write(p.join("c.json"), CONFIG).unwrap();
    ok(p, &["train", "--config", "c.json", "--out", "m.ckpt"]);
    dir
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = |out: &'static str| {
        [
            "gen", "--out", out, "--scenes", "2", "--res", "16x16", "--seed", "5",
        ]
    };
    let first = ok(p, &args("a"));
    assert_eq!(first[0]["config"]["views"], 4);
    assert_eq!(first[1]["scenes"], 2);
    ok(p, &args("b"));
    let (a, b) = (tree(&p.join("a")), tree(&p.join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    ok(
        p,
        &[
            "gen", "--out", "c", "--scenes", "2", "--res", "16x16", "--seed", "6",
        ],
    );
    assert_ne!(tree(&p.join("c")), a);

    assert_eq!(
        run(p, &["gen", "--out", "d", "--res", "63x64"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(p, &["gen", "--out", "d", "--objects", "4..2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(p, &["gen", "--out", "d", "--colour", "red"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_logs_every_step_and_echoes_config() {
    let dir = fixture();
    let p = dir.path();
    let log = fs::read_to_string(p.join("m.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let out = ok(
        p,
        &[
            "train", "--config", "c.json", "--fada", "off", "--out", "off.ckpt",
        ],
    );
    assert_eq!(out[0]["config"]["fada"], "off");
    assert_eq!(out[0]["config"]["lr"], 1e-3);
    assert_eq!(out.last().unwrap()["steps"], 6);
    // the default run and a rerun write the same bytes
    ok(p, &["train", "--config", "c.json", "--out", "again.ckpt"]);
    assert_eq!(
        fs::read(p.join("m.ckpt")).unwrap(),
        fs::read(p.join("again.ckpt")).unwrap()
    );

    assert_eq!(run(p, &["train", "--out", "x.ckpt"]).status.code(), Some(2));
    assert_eq!(
        run(
            p,
            &["train", "--config", "c.json", "--out", "x.ckpt", "--fada", "maybe"]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(p, &["train", "--config", "missing.json", "--out", "x.ckpt"])
            .status
            .code(),
        Some(1)
    );
    fs::write(p.join("bad.json"), r#"{"stepz": 1}"#).unwrap();
    assert_eq!(
        run(p, &["train", "--config", "bad.json", "--out", "x.ckpt"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn infer_then_eval_round_trip() {
    let dir = fixture();
    let p = dir.path();
    ok(
        p,
        &[
            "infer",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "data/scene_0",
            "--out",
            "a.svpr",
        ],
    );
    ok(
        p,
        &[
            "infer",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "data/scene_0",
            "--out",
            "b.svpr",
        ],
    );
    assert_eq!(
        fs::read(p.join("a.svpr")).unwrap(),
        fs::read(p.join("b.svpr")).unwrap()
    );
    let report = ok(p, &["eval", "--pred", "a.svpr", "--gt", "data/scene_0"]);
    let r = &report[1];
    assert!(r["instance"]["map"].as_f64().unwrap() >= 0.0);
    assert!(r["depth"]["abs_rel"].as_f64().unwrap() > 0.0);

    // a 32x32 scene cannot go through a 16x16 model
    ok(
        p,
        &[
            "gen", "--out", "big", "--scenes", "1", "--views", "2", "--res", "32x32",
        ],
    );
    let out = run(
        p,
        &[
            "infer",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "big/scene_0",
            "--out",
            "c.svpr",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

fn gt_file(scene_dir: &Path) -> PredictionFile {
    let scene = read_scene_dir(scene_dir).unwrap();
    let res = (scene.height(), scene.width());
    let preds: Vec<InstancePrediction> = scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, &(id, class))| InstancePrediction {
            query: i,
            class,
            class_prob: 1.0,
            masks: scene
                .views
                .iter()
                .map(|v| v.instance_map.iter().map(|&x| x == id).collect())
                .collect(),
            mask_res: res,
            score: 1.0,
        })
        .collect();
    let depths: Vec<Vec<f64>> = scene.views.iter().map(|v| v.depth.clone()).collect();
    let cams: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
    let seg = assemble_instances(&preds, &depths, &cams, res).unwrap();
    PredictionFile::from_parts(&seg, &preds, scene.views.len(), None)
}

#[test]
fn eval_self_test_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen", "--out", "data", "--scenes", "1", "--res", "32x32", "--seed", "2",
        ],
    );
    write_predictions(&p.join("gt.svpr"), &gt_file(&p.join("data/scene_0"))).unwrap();
    for extra in [&[][..], &["--superpoints"][..]] {
        let mut args = vec!["eval", "--pred", "gt.svpr", "--gt", "data/scene_0"];
        args.extend_from_slice(extra);
        let r = &ok(p, &args)[1]["instance"];
        assert_eq!(
            (r["map"].as_f64(), r["map50"].as_f64(), r["map25"].as_f64()),
            (Some(1.0), Some(1.0), Some(1.0))
        );
    }
    let agnostic = &ok(
        p,
        &[
            "eval",
            "--pred",
            "gt.svpr",
            "--gt",
            "data/scene_0",
            "--class-agnostic",
        ],
    )[1];
    assert_eq!(
        agnostic["instance"]["per_class"].as_array().unwrap().len(),
        1
    );
    assert!(agnostic["depth"].is_null());

    let empty = PredictionFile {
        instances: vec![],
        masks: None,
        depths: None,
    };
    write_predictions(&p.join("empty.svpr"), &empty).unwrap();
    let r = &ok(p, &["eval", "--pred", "empty.svpr", "--gt", "data/scene_0"])[1]["instance"];
    assert_eq!(r["map"].as_f64(), Some(0.0));
    fs::write(p.join("junk.svpr"), b"junk").unwrap();
    assert_eq!(
        run(p, &["eval", "--pred", "junk.svpr", "--gt", "data/scene_0"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn attention_dump_matches_marginals() {
    let dir = fixture();
    let p = dir.path();
    let out = ok(
        p,
        &[
            "attn",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "data/scene_1",
            "--query",
            "2",
            "--layer",
            "1",
            "--out",
            "att",
        ],
    );
    let s = &out[1];
    let marginal: Vec<f64> = s["marginal"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(marginal.len(), 3);
    for (i, &m) in marginal.iter().enumerate() {
        let (h, w, patches) =
            read_f64_raster(&p.join(format!("att/frame_{i}.svat")), b"SVAT").unwrap();
        assert_eq!((h, w), (2, 2));
        let (_, _, special) =
            read_f64_raster(&p.join(format!("att/frame_{i}_special.svat")), b"SVAT").unwrap();
        let total: f64 = patches.iter().chain(&special).sum();
        assert!((total - m).abs() < 1e-9);
    }
    assert!((s["entropy"].as_f64().unwrap() - attention_entropy(&marginal)).abs() < 1e-12);
    assert_eq!(s["entropy_table"][1][2], s["entropy"]);
    let table: Value =
        serde_json::from_str(&fs::read_to_string(p.join("att/entropy.json")).unwrap()).unwrap();
    assert_eq!(&table, s);

    let bad = run(
        p,
        &[
            "attn",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "data/scene_1",
            "--query",
            "0",
            "--layer",
            "2",
            "--out",
            "att",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    let bad = run(
        p,
        &[
            "attn",
            "--ckpt",
            "m.ckpt",
            "--scene",
            "data/scene_1",
            "--query",
            "4",
            "--layer",
            "0",
            "--out",
            "att",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn bench_reports_stage_means() {
    let dir = fixture();
    let p = dir.path();
    let out = ok(
        p,
        &[
            "bench",
            "--ckpt",
            "m.ckpt",
            "--frames",
            "2,4,8",
            "--repeats",
            "2",
        ],
    );
    assert_eq!(out[0]["repeats"], 2);
    let runs = out[1]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (r, n) in runs.iter().zip([2, 4, 8]) {
        assert_eq!(r["frames"], n);
        assert_eq!(r["repeats"], 2);
        for key in [
            "embed_ms",
            "aggregator_ms",
            "heads_ms",
            "assembly_ms",
            "total_ms",
        ] {
            assert!(r[key].as_f64().unwrap() >= 0.0, "{key}");
        }
    }
    assert_eq!(
        run(p, &["bench", "--ckpt", "m.ckpt", "--repeats", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(p, &["bench", "--ckpt", "nope.ckpt"]).status.code(),
        Some(1)
    );
    let bad_threads = bin()
        .current_dir(p)
        .env("SEGVGGT_THREADS", "zero")
        .args(["gen", "--out", "z"])
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}
