use std::path::Path;
use std::process::{Command, Output};

fn vistask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vistask")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vistask(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(vistask(&[]).status.code(), Some(1));
    assert_eq!(vistask(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vistask(&["count"]).status.code(), Some(1));
    assert_eq!(vistask(&["decode", "--task", "nonsense", "--heatmap", "x"]).status.code(), Some(1));
    assert_eq!(vistask(&["--help"]).status.code(), Some(0));
    assert_eq!(vistask(&["count", "--heatmap", "/nonexistent/file.lumh"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.lumh");
    std::fs::write(&junk, b"LUMHxx").unwrap();
    assert_eq!(vistask(&["count", "--heatmap", p(&junk)]).status.code(), Some(2));
}

#[test]
fn ground_truth_heatmaps_decode_and_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let heat = dir.path().join("heat");
    ok(&["synth", "--out", p(&data), "--images", "6", "--seed", "4", "--dim", "8"]);
    let ann = data.join("annotations.json");
    ok(&["encode", "--annotations", p(&ann), "--out", p(&heat)]);

    let gt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ann).unwrap()).unwrap();
    let mut records = Vec::new();
    let mut files: Vec<_> = std::fs::read_dir(&heat).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        let stem = f.file_stem().unwrap().to_str().unwrap();
        let (img, cat) = stem.split_once('_').unwrap();
        let (img_id, cat_id): (u64, u64) = (img.parse().unwrap(), cat.parse().unwrap());
        let out = ok(&[
            "decode", "--task", "detect", "--heatmap", p(f), "--image-id", img, "--category", cat, "--threshold", "0.3",
        ]);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        records.extend(v.as_array().unwrap().iter().cloned());

        let count: usize = ok(&["count", "--heatmap", p(f)]).trim().parse().unwrap();
        let truth = gt["annotations"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|a| a["image_id"].as_u64() == Some(img_id) && a["category_id"].as_u64() == Some(cat_id))
            .count();
        assert_eq!(count, truth, "{stem}");
    }
    let pred = dir.path().join("pred.json");
    std::fs::write(&pred, serde_json::to_string(&records).unwrap()).unwrap();
    let report = ok(&["eval", "--gt", p(&ann), "--pred", p(&pred), "--metric", "box"]);
    assert!(report.lines().any(|l| l == "ap50=1.000000"), "{report}");
}

#[test]
fn pose_heatmaps_decode_to_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let heat = dir.path().join("heat");
    ok(&["synth", "--out", p(&data), "--images", "2", "--seed", "1", "--dim", "8"]);
    ok(&["encode", "--annotations", p(&data.join("annotations.json")), "--out", p(&heat), "--task", "pose"]);
    let out = ok(&["decode", "--task", "pose", "--heatmap", p(&heat.join("0_pose.lumh"))]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let kps = v[0]["keypoints"].as_array().unwrap();
    assert_eq!(kps.len() % 3, 0);
    assert!(!kps.is_empty());
}

#[test]
fn training_and_demo_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--images", "8", "--seed", "2", "--dim", "16"]);
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for ck in [&a, &b] {
        ok(&["train", "--data", p(&data), "--checkpoint", p(ck), "--steps", "15", "--seed", "9", "--dim", "16"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = ok(&[
        "decode", "--task", "detect", "--checkpoint", p(&a), "--data", p(&data), "--query", "circle", "--image-id", "1",
    ]);
    assert!(serde_json::from_str::<serde_json::Value>(&out).unwrap().is_array());

    let demo = ["demo", "--seed", "5", "--steps", "20", "--train-images", "12", "--test-images", "4"];
    let first = ok(&demo);
    assert_eq!(first, ok(&demo));
    assert!(first.starts_with("seed=5\n"));
}
