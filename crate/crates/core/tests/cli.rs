use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sis3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sis3d")).args(args).env_remove("SIS_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sis3d(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with(c: &[&str], rest: &[&str]) -> Vec<String> {
    c.iter().chain(rest).map(|x| x.to_string()).collect()
}

fn ok_owned(args: Vec<String>) -> String {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, in path order.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    let cfg = serde_json::json!({
        "trajectory": { "width": 32, "height": 32, "num_views": 4 },
        "views_per_chunk": 2,
        "schedule": { "rpn_batch": 16, "cls_batch": 4, "mask_batch": 4 }
    });
    fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["--config", &cfg, "--deterministic", "synth", "--seed", "7", "--scenes", "2", "--out", s(d)]);
        ok(&["--config", &cfg, "--deterministic", "fuse", "--data", s(d)]);
    }
    // Manifests name their own folder; compare them with it stripped.
    let strip = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let root = s(d).as_bytes().to_vec();
        snapshot(d)
            .into_iter()
            .map(|(n, bytes)| {
                if !n.ends_with(".manifest.json") {
                    return (n, bytes);
                }
                let text = String::from_utf8(bytes).unwrap().replace(std::str::from_utf8(&root).unwrap(), "");
                (n, text.into_bytes())
            })
            .collect()
    };
    let (sa, sb) = (strip(&a), strip(&b));
    assert!(sa.iter().any(|(n, _)| n.ends_with("tsdf.vgrd")));
    assert!(sa.iter().any(|(n, _)| n.ends_with("synth.manifest.json")));
    assert_eq!(sa.len(), sb.len());
    for ((na, ba), (nb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs");
    }
    let c = tmp.path().join("c");
    ok(&["--config", &cfg, "synth", "--seed", "8", "--scenes", "2", "--out", s(&c)]);
    let sc = snapshot(&c);
    let scene = |snap: &[(String, Vec<u8>)]| snap.iter().find(|(n, _)| n.ends_with("scene.json")).unwrap().1.clone();
    assert!(scene(&sa) != scene(&sc));
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let out = sis3d(&["synth", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--bogus"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
    assert_eq!(sis3d(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sis3d(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"chunk_dims": [30, 32, 16]}"#).unwrap();
    let out = sis3d(&["--config", s(&bad), "synth", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sis3d(&["fuse", "--data", s(tmp.path())]).status.code(), Some(2));
    let junk = tmp.path().join("model.bin");
    fs::write(&junk, b"nope").unwrap();
    let out = sis3d(&["infer", "--model", s(&junk), "--data", s(tmp.path()), "--out", s(&tmp.path().join("p.txt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn end_to_end_smoke_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let model = run.join("model.ckpt");
    let preds = run.join("preds.txt");
    let metrics = run.join("metrics");
    let c = ["--config", cfg.as_str(), "--seed", "3"];
    ok_owned(with(&c, &["synth", "--scenes", "2", "--out", s(&data)]));
    ok_owned(with(&c, &["fuse", "--data", s(&data)]));
    ok_owned(with(&c, &["train", "--data", s(&data), "--out", s(&model), "--steps", "4,3,3"]));
    let log = fs::read_to_string(run.join("model.csv")).unwrap();
    assert!(log.starts_with("step,stage,"));
    assert_eq!(log.lines().count(), 1 + 10);
    ok_owned(with(&c, &["infer", "--model", s(&model), "--data", s(&data), "--out", s(&preds)]));
    let stdout = ok_owned(with(&c, &["eval", "--pred", s(&preds), "--data", s(&data), "--out", s(&metrics)]));
    let csv = fs::read_to_string(metrics.join("metrics.csv")).unwrap();
    assert_eq!(stdout, csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "metric,iou,class0,class1,class2,avg");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("box,0.25,") && rows[3].starts_with("mask,0.25,"));
    for name in ["train", "infer"] {
        assert!(run.join(format!("{name}.manifest.json")).exists());
    }
    let export = tmp.path().join("export");
    let scene = data.join("scene_0000");
    ok_owned(with(&c, &["export", "--scene", s(&scene), "--pred", s(&preds), "--report", s(&metrics.join("report.json")), "--out", s(&export)]));
    for f in ["surface.ply", "boxes.ply", "masks.ply", "metrics.csv", "export.manifest.json"] {
        assert!(export.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(export.join("metrics.csv")).unwrap(), csv);
}

#[test]
fn divergence_exits_three_and_keeps_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("hot.json");
    let cfg = serde_json::json!({
        "trajectory": { "width": 32, "height": 32, "num_views": 4 },
        "views_per_chunk": 2,
        "train": { "learning_rate": 1e30 },
        "schedule": { "grad_clip": 0.0, "rpn_batch": 16 }
    });
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let c = ["--config", s(&cfg_path)];
    let data = tmp.path().join("data");
    ok_owned(with(&c, &["synth", "--scenes", "1", "--out", s(&data)]));
    ok_owned(with(&c, &["fuse", "--data", s(&data)]));
    let model = tmp.path().join("m.ckpt");
    let args = with(&c, &["train", "--data", s(&data), "--out", s(&model), "--steps", "50,0,0"]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = sis3d(&refs);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!model.exists());
    assert!(tmp.path().join("m.csv").exists());
}
