use std::path::Path;
use std::process::{Command, Output};

use equibody::group60::{build_icosahedral_group, encode_group, RotationGroup};

fn equibody(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equibody")).args(args).env_remove("EQUIBODY_DATA_DIR").output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).expect("utf-8")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn smoke_data(dir: &Path) -> String {
    ok(&equibody(&["gen", "--preset", "smoke", "--out", s(dir)]))
}

#[test]
fn gen_writes_four_datasets_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = smoke_data(a.path());
    let second = smoke_data(b.path());
    assert_eq!(first, second);
    for f in ["train-id.aqd", "val-id.aqd", "test-id.aqd", "test-ood.aqd", "manifest.json", "config.toml"] {
        assert!(a.path().join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 4);
}

#[test]
fn gen_into_missing_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = equibody(&["gen", "--preset", "smoke", "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn unknown_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = equibody(&["gen", "--preset", "smoke", "--set", "network.bogus=1", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_infer_round() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    smoke_data(data.path());

    let stage1 = run.path().join("s1");
    ok(&equibody(&["train", "--preset", "smoke", "--data", s(data.path()), "--out", s(&stage1), "--stage", "1"]));
    assert!(stage1.join("stage1.aqw").is_file());
    let csv = std::fs::read_to_string(stage1.join("epochs.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("1,")));

    let full = run.path().join("full");
    ok(&equibody(&[
        "train", "--preset", "smoke", "--data", s(data.path()), "--out", s(&full), "--stage", "2",
        "--init", s(&stage1.join("stage1.aqw")), "--augment-so3",
    ]));
    let model = full.join("model.aqw");
    let tm = equibody::trainer::load_model(&model, &build_icosahedral_group()).unwrap();
    assert_eq!(tm.meta("augment_so3"), Some("true"));
    assert_eq!(tm.meta("stage"), Some("2"));

    let metrics = run.path().join("metrics.csv");
    let plot = run.path().join("plot.csv");
    let table = ok(&equibody(&[
        "eval", "--checkpoint", s(&model), "--compare", s(&stage1.join("stage1.aqw")), "--data", s(data.path()),
        "--out", s(&metrics), "--emit-plot-data", s(&plot),
    ]));
    for row in ["test-id", "test-ood"] {
        assert!(table.contains(row), "{table}");
    }
    let plot = std::fs::read_to_string(plot).unwrap();
    assert!(plot.starts_with("epoch,v2v_cm,mpjpe_cm,seg_acc"));
    assert_eq!(plot.lines().count(), 3, "{plot}");

    let obj = run.path().join("body.obj");
    let dump = run.path().join("body.json");
    ok(&equibody(&[
        "infer", "--checkpoint", s(&model), "--input", s(&data.path().join("test-ood.aqd")), "--index", "1",
        "--out", s(&obj), "--params", s(&dump),
    ]));
    assert!(std::fs::read_to_string(obj).unwrap().lines().any(|l| l.starts_with("f ")));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dump).unwrap()).unwrap();
    assert_eq!(dump["local_rotvecs"].as_array().unwrap().len(), 16);
}

#[test]
fn stage_two_without_init_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = equibody(&["train", "--preset", "smoke", "--data", s(tmp.path()), "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_checkpoint_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.aqw");
    std::fs::write(&bad, b"AQW1 but not really").unwrap();
    let out = equibody(&["eval", "--checkpoint", s(&bad), "--data", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn check_runs_one_suite() {
    let out = ok(&equibody(&["check", "--only", "group"]));
    assert!(out.contains("# group"));
    assert!(!out.contains("# tensor"));
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 8);
}

#[test]
fn corrupted_cayley_table_fails_closure() {
    let group = build_icosahedral_group();
    let mut table = group.cayley().to_vec();
    table[3][4] = table[3][5];
    let bad = RotationGroup::from_parts(group.elements().to_vec(), table).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.aqg");
    std::fs::write(&path, encode_group(&bad)).unwrap();
    let out = equibody(&["check", "--only", "group", "--group-file", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL group.closure")), "{text}");
}

#[test]
fn help_lists_every_flag() {
    let top = ok(&equibody(&["--help"]));
    for cmd in ["gen", "train", "eval", "infer", "check"] {
        assert!(top.contains(cmd));
    }
    let train = ok(&equibody(&["train", "--help"]));
    for flag in ["--preset", "--config", "--set", "--seed", "--data", "--out", "--stage", "--init", "--augment-so3", "--no-val", "[default: desk]", "[default: both]"] {
        assert!(train.contains(flag), "train --help lacks {flag}");
    }
    let eval = ok(&equibody(&["eval", "--help"]));
    for flag in ["--checkpoint", "--compare", "--dataset", "--rotate-group", "--emit-plot-data", "[default: metrics.csv]"] {
        assert!(eval.contains(flag), "eval --help lacks {flag}");
    }
}
