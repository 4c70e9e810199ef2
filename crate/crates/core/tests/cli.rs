// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vground"))
        .args(args)
        .env("VG_THREADS", "2")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(root: &Path) -> PathBuf {
    let data = root.join("data");
    let out = vground(&[
        "synth",
        "--out-dir",
        s(&data),
        "--seed",
        "3",
        "--calib-samples",
        "6",
        "--analysis-samples",
        "2",
        "--grid",
        "4",
        "--layers",
        "18",
        "--heads",
        "2",
        "--plant",
        "16:0,3:1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

/// Runs synth, analyze, triage and knockout under `root`.
fn pipeline(root: &Path) {
    let data = synth(root);
    let steps: [Vec<String>; 3] = [
        vec![
            "analyze".into(),
            "--data-dir".into(),
            s(&data.join("analysis")).into(),
            "--out-dir".into(),
            s(&root.join("analyze")).into(),
            "--normalize".into(),
            "--per-head".into(),
        ],
        vec![
            "triage".into(),
            "--calib-dir".into(),
            s(&data.join("calibration")).into(),
            "--out-dir".into(),
            s(&root.join("triage")).into(),
        ],
        vec![
            "knockout".into(),
            "--ranking".into(),
            s(&root.join("triage/ranking.json")).into(),
            "--fixture".into(),
            s(&data.join("analysis")).into(),
            "--out-dir".into(),
            s(&root.join("knockout")).into(),
        ],
    ];
    for step in steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let out = vground(&args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
}

/// Every file under `root`, with `wall_time_ms` stripped from run manifests.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = std::fs::read(&path).unwrap();
            if path.file_name().unwrap() == "run_manifest.json" {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_ms");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

#[test]
fn pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    pipeline(&root);
    let first = snapshot(&root);
    std::fs::remove_dir_all(&root).unwrap();
    pipeline(&root);
    let second = snapshot(&root);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(v == &second[k], "{} differs", k.display());
    }
    for dir in ["data", "analyze", "triage", "knockout"] {
        assert!(first.contains_key(&Path::new(dir).join("run_manifest.json")), "{dir}");
    }
    assert!(first.contains_key(Path::new("knockout/ana0000.ko.vgat")));
    assert!(first.contains_key(Path::new("knockout/logit_deltas.csv")));
}

#[test]
fn triage_records_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let out_dir = tmp.path().join("triage");
    let out = vground(&[
        "triage",
        "--calib-dir",
        s(&data.join("calibration")),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("run_manifest.json")).unwrap()).unwrap();
    let t = &m["config"]["triage"];
    assert_eq!(t["k"], 20);
    assert_eq!(t["p"], 50.0);
    assert_eq!(t["knockout_layers"], serde_json::json!([16]));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let calib = data.join("calibration");
    let t = tmp.path().join("t");
    assert_eq!(code(&vground(&[])), 2);
    assert_eq!(code(&vground(&["frobnicate"])), 2);
    let big_k = vground(&["triage", "--calib-dir", s(&calib), "--out-dir", s(&t), "--k", "37"]);
    assert_eq!(code(&big_k), 2, "{}", stderr(&big_k));
    assert_eq!(
        code(&vground(&[
            "triage",
            "--calib-dir",
            s(&calib),
            "--out-dir",
            s(&t),
            "--p",
            "100"
        ])),
        2
    );
    assert_eq!(
        code(&vground(&["triage", "--calib-dir", s(&calib), "--out-dir", s(&t)])),
        0
    );
    let ranking = t.join("ranking.json");
    let deep = vground(&[
        "knockout",
        "--ranking",
        s(&ranking),
        "--fixture",
        s(&data.join("analysis")),
        "--out-dir",
        s(&tmp.path().join("k")),
        "--layers",
        "18",
    ]);
    assert_eq!(code(&deep), 2, "{}", stderr(&deep));
    assert!(stderr(&deep).starts_with("vground: error kind=usage"));
}

#[test]
fn data_errors_exit_1_and_name_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let (calib, analysis) = (data.join("calibration"), data.join("analysis"));

    let wrong_split = vground(&[
        "triage",
        "--calib-dir",
        s(&analysis),
        "--out-dir",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&wrong_split), 1);
    assert!(stderr(&wrong_split).contains("sample=ana0000"));

    assert_eq!(
        code(&vground(&[
            "triage",
            "--calib-dir",
            s(&calib),
            "--out-dir",
            s(&tmp.path().join("t"))
        ])),
        0
    );
    let leak = vground(&[
        "knockout",
        "--ranking",
        s(&tmp.path().join("t/ranking.json")),
        "--fixture",
        s(&calib),
        "--out-dir",
        s(&tmp.path().join("k")),
    ]);
    assert_eq!(code(&leak), 1, "{}", stderr(&leak));

    let dump = analysis.join("ana0001.q.vgat");
    let bytes = std::fs::read(&dump).unwrap();
    std::fs::write(&dump, &bytes[..bytes.len() - 3]).unwrap();
    let out = vground(&[
        "analyze",
        "--data-dir",
        s(&analysis),
        "--out-dir",
        s(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&out), 1);
    let line = stderr(&out);
    assert_eq!(line.lines().count(), 1);
    assert!(line.contains("sample=ana0001") && line.contains("ana0001.q.vgat") && line.contains("truncated"));

    let missing = vground(&[
        "analyze",
        "--data-dir",
        s(&tmp.path().join("nope")),
        "--out-dir",
        s(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn empty_layer_list_leaves_traces_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let t = tmp.path().join("t");
    assert_eq!(
        code(&vground(&[
            "triage",
            "--calib-dir",
            s(&data.join("calibration")),
            "--out-dir",
            s(&t)
        ])),
        0
    );
    let k = tmp.path().join("k");
    let out = vground(&[
        "knockout",
        "--ranking",
        s(&t.join("ranking.json")),
        "--fixture",
        s(&data.join("analysis")),
        "--out-dir",
        s(&k),
        "--layers",
        "",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let read =
        |name: &str| -> serde_json::Value { serde_json::from_slice(&std::fs::read(k.join(name)).unwrap()).unwrap() };
    assert_eq!(
        read("ana0000.baseline.json")["logits"],
        read("ana0000.knockout.json")["logits"]
    );
}

#[test]
fn render_writes_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let r = tmp.path().join("r");
    let out = vground(&[
        "render",
        "--data-dir",
        s(&data.join("analysis")),
        "--sample",
        "ana0001",
        "--out-dir",
        s(&r),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ppm = std::fs::read_dir(&r)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ppm"))
        .unwrap();
    assert!(std::fs::read(ppm).unwrap().starts_with(b"P6\n64 64\n255\n"));
    let bad = vground(&[
        "render",
        "--data-dir",
        s(&data.join("analysis")),
        "--sample",
        "ana0001",
        "--out-dir",
        s(&r),
        "--layer",
        "99",
    ]);
    assert_eq!(code(&bad), 2);
}
