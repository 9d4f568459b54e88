use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use voxad::volume::{read_multichannel, read_score_map};

fn voxad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxad"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = voxad(dir, args);
    assert!(
        out.status.success(),
        "voxad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_phantom(dir: &Path) {
    fs::write(
        dir.join("phantom.json"),
        r#"{"dims": [12, 12, 12], "n_train": 6, "n_test_healthy": 5, "n_test_pathological": 5, "lesion_fraction": 0.05}"#,
    )
    .unwrap();
    ok(dir, &["phantom", "--config", "phantom.json", "--out", "ph"]);
}

#[test]
fn pipeline_end_to_end_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let mut cfg = json(&dir.join("ph/pipeline.json"));
    cfg["bootstrap"]["iters"] = 500.into();
    fs::write(dir.join("ph/pipeline.json"), cfg.to_string()).unwrap();

    let csv = ok(dir, &["--threads", "2", "pipeline", "--config", "ph/pipeline.json"]);
    assert_eq!(csv.lines().next(), Some("method,ap_voxel,auc_voxel,ap_sample,auc_sample"));
    assert_eq!(csv.lines().count(), 4);
    let summary = json(&dir.join("ph/out/summary.json"));
    for row in summary["rows"].as_array().unwrap() {
        for key in ["ap_voxel", "auc_voxel", "ap_sample", "auc_sample"] {
            let v = row[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(json(&dir.join("ph/out/MANIFEST.json"))["complete"], true);

    let first: Vec<u8> = fs::read(dir.join("ph/out/reports/bootstrap_auc.json")).unwrap();
    let first_summary = fs::read(dir.join("ph/out/summary.json")).unwrap();
    ok(dir, &["--threads", "2", "pipeline", "--config", "ph/pipeline.json"]);
    assert_eq!(first, fs::read(dir.join("ph/out/reports/bootstrap_auc.json")).unwrap());
    assert_eq!(first_summary, fs::read(dir.join("ph/out/summary.json")).unwrap());
}

#[test]
fn missing_external_scores_fails_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let mut cfg = json(&dir.join("ph/pipeline.json"));
    cfg["models"] = serde_json::json!(["bm", "ae-external"]);
    cfg["ae_scores_dir"] = "ae".into();
    fs::write(dir.join("ph/pipeline.json"), cfg.to_string()).unwrap();
    let out = voxad(dir, &["pipeline", "--config", "ph/pipeline.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load stage failed"), "{err}");
    assert!(err.contains("missing external scores"), "{err}");
    let manifest = json(&dir.join("ph/out/MANIFEST.json"));
    assert_eq!(manifest["complete"], false);
    assert_eq!(manifest["failed_stage"], "load");
}

#[test]
fn fit_and_score_each_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_phantom(dir);
    let mut list = String::new();
    for i in 0..6 {
        let norm = format!("n{i}.nii");
        ok(
            dir,
            &["normalize", "--in", &format!("ph/train/train_{i:03}.nii"), "--mask", "ph/mask.nii", "--out", &norm],
        );
        list += &norm;
        list.push('\n');
    }
    fs::write(dir.join("train.txt"), list).unwrap();
    ok(dir, &["normalize", "--in", "ph/test/path_000.nii", "--mask", "ph/mask.nii", "--out", "probe.nii"]);

    for model in ["bm", "cm", "pm"] {
        let file = format!("{model}.sbad");
        ok(dir, &["fit", "--model", model, "--train-list", "train.txt", "--mask", "ph/mask.nii", "--out", &file]);
        assert_eq!(&fs::read(dir.join(&file)).unwrap()[..4], b"SBAD");
        let out = format!("{model}_score.nii");
        ok(dir, &["score", "--model", &file, "--in", "probe.nii", "--out", &out]);
        let map = read_score_map(dir.join(&out)).unwrap();
        assert!(map.data().iter().any(|&x| x > 0.0));
    }
    ok(
        dir,
        &[
            "score", "--model", "pm.sbad", "--in", "probe.nii", "--out", "s.nii", "--zmap-out", "z.nii",
            "--residual-out", "r.nii",
        ],
    );
    assert_eq!(read_multichannel(dir.join("z.nii")).unwrap().channels(), 4);
    assert_eq!(read_multichannel(dir.join("r.nii")).unwrap().channels(), 4);
    let bad = voxad(dir, &["score", "--model", "cm.sbad", "--in", "probe.nii", "--out", "x.nii", "--residual-out", "r.nii"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_sample_and_voxel() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("s.csv"), "0.9\n0.8\n0.3\n0.1\n").unwrap();
    fs::write(dir.join("l.csv"), "1\n0\n1\n0\n").unwrap();
    let out = ok(
        dir,
        &["eval", "--task", "sample", "--scores", "s.csv", "--labels", "l.csv", "--out", "r.json", "--curves", "curves"],
    );
    assert!(out.contains("auc 0.75"));
    let r = json(&dir.join("r.json"));
    assert_eq!(r["auc"], 0.75);
    assert!((r["ap"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert!(dir.join("curves/roc.csv").is_file() && dir.join("curves/pr.csv").is_file());

    small_phantom(dir);
    let mut cfg = json(&dir.join("ph/pipeline.json"));
    cfg["models"] = serde_json::json!(["bm"]);
    cfg["tasks"] = serde_json::json!(["voxel"]);
    fs::write(dir.join("ph/pipeline.json"), cfg.to_string()).unwrap();
    ok(dir, &["pipeline", "--config", "ph/pipeline.json"]);
    let (mut pairs, mut lesions) = (String::new(), String::new());
    for i in 0..5 {
        pairs += &format!("ph/out/scores/bm/healthy_{i:03}.nii ph/out/scores/bm/path_{i:03}.nii\n");
        lesions += &format!("ph/test/path_{i:03}_lesion.nii\n");
    }
    fs::write(dir.join("pairs.txt"), pairs).unwrap();
    fs::write(dir.join("lesions.txt"), lesions).unwrap();
    ok(
        dir,
        &[
            "eval", "--task", "voxel", "--scores", "pairs.txt", "--labels", "lesions.txt", "--mask", "ph/mask.nii",
            "--out", "v.json", "--method", "bm",
        ],
    );
    let v = json(&dir.join("v.json"));
    let from_pipeline = json(&dir.join("ph/out/reports/eval_bm.json"));
    assert_eq!(v["median_auc"], from_pipeline["voxel"]["median_auc"]);
    assert_eq!(v["pairs"].as_array().unwrap().len(), 5);
    let all = voxad(
        dir,
        &["eval", "--task", "voxel", "--scores", "pairs.txt", "--labels", "lesions.txt", "--out", "v.json"],
    );
    assert!(!all.status.success(), "voxel task without a mask must fail");
}

#[test]
fn compare_bootstrap_and_wilcoxon() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    let a: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| l as f64 + (i as f64 * 0.3).sin() * 0.2).collect();
    let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).cos()).collect();
    let col = |v: &[f64]| v.iter().map(|x| format!("{x}\n")).collect::<String>();
    fs::write(dir.join("a.csv"), col(&a)).unwrap();
    fs::write(dir.join("b.csv"), col(&b)).unwrap();
    fs::write(dir.join("l.csv"), labels.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let args = [
        "--seed", "7", "compare", "--scores-a", "a.csv", "--scores-b", "b.csv", "--labels", "l.csv", "--metric", "auc",
        "--iters", "2000", "--out", "cmp.json",
    ];
    ok(dir, &args);
    let first = fs::read(dir.join("cmp.json")).unwrap();
    ok(dir, &args);
    assert_eq!(first, fs::read(dir.join("cmp.json")).unwrap());
    let cmp = json(&dir.join("cmp.json"));
    assert_eq!(cmp["iters"], 2000);
    assert_eq!(cmp["seed"], 7);
    assert!(cmp["differences"][0]["lower"].as_f64().unwrap() > 0.0);

    fs::write(dir.join("x.csv"), "1\n2\n3\n4\n5\n").unwrap();
    fs::write(dir.join("z.csv"), "0\n0\n0\n0\n0\n").unwrap();
    ok(
        dir,
        &[
            "compare", "--test", "wilcoxon", "--scores-a", "x.csv", "--scores-b", "z.csv", "--tests", "24", "--out",
            "w.json",
        ],
    );
    let w = json(&dir.join("w.json"));
    assert_eq!(w["p_two_sided"], 0.0625);
    assert_eq!(w["p_bonferroni"], 1.0);
}

#[test]
fn bad_input_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("junk.nii"), b"not a volume").unwrap();
    let out = voxad(dir, &["normalize", "--in", "junk.nii", "--mask", "junk.nii", "--out", "o.nii"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalize"));
}
