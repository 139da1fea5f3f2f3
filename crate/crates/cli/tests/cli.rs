use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_handcraft");
const STUB: &str = env!("CARGO_BIN_EXE_handcraft-stub-backend");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture directory with `count` cases.
fn fixtures(dir: &Path, count: usize, hands: usize) -> PathBuf {
    let fx = dir.join("fx");
    ok(&["make-fixtures", "--out", s(&fx), "--count", &count.to_string(), "--hands", &hands.to_string()]);
    fx
}

fn case_args(fx: &Path) -> Vec<String> {
    let c = fx.join("case-000");
    [
        "--image", s(&c.join("image.png")),
        "--pose", s(&c.join("pose.json")),
        "--detections", s(&c.join("detections.json")),
        "--silhouette", s(&c.join("silhouette.png")),
    ]
    .map(String::from)
    .to_vec()
}

fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra.to_vec();
    v.splice(1..1, base.iter().map(String::as_str));
    v
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn make_control_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let out = dir.path().join("ctl");
    ok(&with(&case_args(&fx), &["make-control", "--select", "silhouette", "--out", s(&out)]));
    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["h0.bundle.json", "h0.control.png", "h0.mask.png"]);
    let bundle = read_json(&out.join("h0.bundle.json"));
    assert_eq!(bundle["selection_score"], 1.0);
    assert!(bundle["mask_pixels"].as_u64().unwrap() > 0);
}

#[test]
fn make_control_rotation_ablation_zeroes_angle() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let out = dir.path().join("ctl");
    ok(&with(&case_args(&fx), &["make-control", "--ablate", "no-rotation", "--out", s(&out)]));
    let bundle = read_json(&out.join("h0.bundle.json"));
    assert_eq!(bundle["transform"]["angle"], 0.0);
    assert_eq!(bundle["ablation"]["use_rotation"], false);
}

#[test]
fn make_control_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let out = dir.path().join("ctl");
    let mut args = case_args(&fx);
    args[3] = s(&dir.path().join("missing.json")).to_string();
    let r = run(&with(&args, &["make-control", "--out", s(&out)]));
    assert_eq!(code(&r), 2);
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());

    // wrist and middle base on the same spot
    let pose = fx.join("case-000/pose.json");
    let mut doc = read_json(&pose);
    let kps = doc["hands"][0]["keypoints"].as_array_mut().unwrap();
    let wrist = kps[0].clone();
    for k in kps.iter_mut() {
        if k["id"] == 9 {
            k["x"] = wrist["x"].clone();
            k["y"] = wrist["y"].clone();
        }
    }
    fs::write(&pose, serde_json::to_string(&doc).unwrap()).unwrap();
    let r = run(&with(&case_args(&fx), &["make-control", "--out", s(&out)]));
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn restore_is_byte_stable_and_lists_scales() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 2);
    let out = dir.path().join("r");
    let args = case_args(&fx);
    let cmd = with(&args, &["restore", "--select", "silhouette", "--scales", "1.0,1.1,1.2", "--seed", "5", "--out", s(&out)]);
    ok(&cmd);
    let first = fs::read(out.join("restored.png")).unwrap();
    let outcome = fs::read(out.join("outcome.json")).unwrap();
    ok(&cmd);
    assert_eq!(fs::read(out.join("restored.png")).unwrap(), first);
    assert_eq!(fs::read(out.join("outcome.json")).unwrap(), outcome);

    let doc = read_json(&out.join("outcome.json"));
    assert_eq!(doc["masked_psnr_db"], "+inf");
    assert_eq!(doc["masked_ssim"], 1.0);
    let hands = doc["hands"].as_array().unwrap();
    assert_eq!(hands.len(), 2);
    for h in hands {
        assert_eq!(h["per_scale_scores"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn subprocess_stub_matches_in_process_stub() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let args = case_args(&fx);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&with(&args, &["restore", "--out", s(&a)]));
    ok(&with(&args, &["restore", "--backend", STUB, "--out", s(&b)]));
    assert_eq!(fs::read(a.join("restored.png")).unwrap(), fs::read(b.join("restored.png")).unwrap());
    let (da, db) = (read_json(&a.join("outcome.json")), read_json(&b.join("outcome.json")));
    assert_eq!(da["hands"][0]["per_scale_scores"], db["hands"][0]["per_scale_scores"]);
}

#[test]
fn restore_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let mut args = case_args(&fx);
    args.truncate(6);
    let out = dir.path().join("r");
    assert_eq!(code(&run(&with(&args, &["restore", "--select", "silhouette", "--out", s(&out)]))), 2);
    assert_eq!(code(&run(&with(&args, &["restore", "--scales", "3.0", "--out", s(&out)]))), 2);
    assert_eq!(code(&run(&with(&args, &["restore", "--backend", "/bin/false", "--out", s(&out)]))), 4);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"scale_factors": [1.0, 1.5], "seed": 3}"#).unwrap();
    let args = case_args(&fx);
    let a = dir.path().join("a");
    ok(&with(&args, &["restore", "--config", s(&config), "--out", s(&a)]));
    let doc = read_json(&a.join("outcome.json"));
    assert_eq!(doc["hands"][0]["per_scale_scores"].as_array().unwrap().len(), 2);
    let b = dir.path().join("b");
    ok(&with(&args, &["restore", "--config", s(&config), "--scales", "1.2", "--out", s(&b)]));
    let doc = read_json(&b.join("outcome.json"));
    assert_eq!(doc["hands"][0]["chosen_scale"], 1.2);
}

#[test]
fn evaluate_reports_table() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let r = dir.path().join("r");
    ok(&with(&case_args(&fx), &["restore", "--out", s(&r)]));
    let pose = dir.path().join("pose.jsonl");
    let cls = dir.path().join("cls.jsonl");
    fs::write(
        &pose,
        "{\"hand_id\":\"a\",\"keypoint_confidences\":{\"0\":0.5,\"1\":1.0}}\n{\"hand_id\":\"b\",\"keypoint_confidences\":{\"0\":0.25}}\n",
    )
    .unwrap();
    fs::write(&cls, "{\"hand_id\":\"a\",\"confidence\":0.5}\n{\"hand_id\":\"b\",\"confidence\":0.25}\n").unwrap();
    let original = fx.join("case-000/image.png");
    let report_dir = dir.path().join("eval");
    let table = ok(&[
        "evaluate",
        "--original", s(&original),
        "--restored", s(&r.join("restored.png")),
        "--mask", s(&r.join("mask.png")),
        "--pose-records", s(&pose),
        "--classifier-records", s(&cls),
        "--out", s(&report_dir),
    ]);
    // pose: (0.75 + 0.25) / 2, classifier: (0.5 + 0.25) / 2
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    let cells: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(cells, ["handcraft", "0.5000", "0.3750", "+inf", "1.0000"]);
    assert!(table.ends_with('\n'));
    let report = read_json(&report_dir.join("report.json"));
    assert_eq!(report["mean_pose_confidence"], 0.5);
    assert_eq!(report["mean_classifier_confidence"], 0.375);

    let r = run(&[
        "evaluate",
        "--original", &format!("{},{}", s(&original), s(&original)),
        "--restored", s(&r.join("restored.png")),
        "--mask", s(&r.join("mask.png")),
        "--pose-records", s(&pose),
        "--classifier-records", s(&cls),
    ]);
    assert_eq!(code(&r), 2);
}

fn seven_row_grid(dir: &Path) -> PathBuf {
    let flags = ["use_bbox_mask", "use_template_mask", "use_scale", "use_translation", "use_rotation", "use_handedness"];
    let mut rows: Vec<Value> = flags
        .iter()
        .map(|f| serde_json::json!({ *f: false }))
        .collect();
    rows.push(serde_json::json!({}));
    let p = dir.join("grid.json");
    fs::write(&p, serde_json::to_string_pretty(&rows).unwrap()).unwrap();
    p
}

#[test]
fn ablate_grid_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 3, 1);
    let grid = seven_row_grid(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let tsv = ok(&["ablate", "--job-dir", s(&fx), "--grid", s(&grid), "--out", s(&a)]);
    assert_eq!(tsv.lines().count(), 8);
    assert_eq!(tsv.lines().next().unwrap(), "M_d\tM_t\tS\tT\tR\tH\tc_pose\tc_classifier\ttemplate_iou");
    ok(&["ablate", "--job-dir", s(&fx), "--grid", s(&grid), "--jobs", "3", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("ablation.tsv")).unwrap(), fs::read(b.join("ablation.tsv")).unwrap());
    ok(&["ablate", "--job-dir", s(&fx), "--grid", s(&grid), "--out", s(&a)]);
    assert_eq!(fs::read_to_string(a.join("ablation.tsv")).unwrap(), tsv);

    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let r = run(&["ablate", "--job-dir", s(&fx), "--grid", s(&empty), "--out", s(&a)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn select_template_prints_choice() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let c = fx.join("case-000");
    let text = ok(&["select-template", "--pose", s(&c.join("pose.json")), "--hand", "h0", "--silhouette", s(&c.join("silhouette.png"))]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["score"], 1.0);
    let text = ok(&["select-template", "--pose", s(&c.join("pose.json")), "--hand", "h0", "--select", "random", "--seed", "0"]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["template_id"], "spread-palm");
    assert_eq!(doc["score"], Value::Null);
    let r = run(&["select-template", "--pose", s(&c.join("pose.json")), "--hand", "h0"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn misalign_orders_iou() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 1, 1);
    let c = fx.join("case-000");
    let tsv = ok(&["misalign", "--pose", s(&c.join("pose.json")), "--hand", "h0", "--silhouette", s(&c.join("silhouette.png"))]);
    let iou: Vec<f64> = tsv.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iou.len(), 4);
    assert!(iou[0] > iou[1] && iou[1] > iou[2] && iou[3] < iou[0]);
}

#[test]
fn exported_templates_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let lib = dir.path().join("lib");
    ok(&["export-templates", "--out", s(&lib)]);
    let fx = fixtures(dir.path(), 1, 1);
    let out = dir.path().join("ctl");
    ok(&with(&case_args(&fx), &["make-control", "--templates", s(&lib.join("manifest.json")), "--out", s(&out)]));
}

/// Compares against the checked-in golden output; set `HANDCRAFT_BLESS=1`
/// to rewrite it.
fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("HANDCRAFT_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}

#[test]
fn batch_outputs_match_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures(dir.path(), 4, 1);
    let out = dir.path().join("batch");
    let table = ok(&["restore", "--batch", s(&fx.join("jobs.json")), "--select", "silhouette", "--seed", "11", "--jobs", "2", "--out", s(&out)]);
    golden("batch_report.txt", &table);
    let tsv = ok(&["ablate", "--job-dir", s(&fx), "--select", "silhouette", "--seed", "11", "--out", s(&dir.path().join("ab"))]);
    golden("ablation.tsv", &tsv);
}
