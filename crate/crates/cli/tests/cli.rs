use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SCN: &str = r#"param time = uniform(360, 1080)
ego = car(x: 0, y: 0, heading: 0)
otherCar = car(x: uniform(-3, 3), y: uniform(5, 20), model: choice("PRANGER", "ASEA", "BISON"))
require dist(ego, otherCar) >= 5
require visibleFrom(ego, otherCar)
"#;

const DETECTOR: &str = r#"seed = 3
[base_noise]
jitter_sigma = 0.0

[[failure_rules]]
effect = "drop"
magnitude = 1.0
predicates = [{ op = "in", feature = "otherCar.model", values = ["PRANGER"] }]
"#;

fn scendbg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scendbg"))
        .current_dir(dir)
        .env_remove("SCENDBG_SEED")
        .args(args)
        .output()
        .expect("spawn scendbg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.scn"), SCN).unwrap();
    fs::write(dir.path().join("det.toml"), DETECTOR).unwrap();
    dir
}

#[test]
fn parse_reports_syntax_errors_with_line() {
    let dir = workspace();
    fs::write(
        dir.path().join("bad.scn"),
        "ego = car(x: 0, y: 0)\nrequire dist(ego,\n",
    )
    .unwrap();
    let o = scendbg(dir.path(), &["parse", "bad.scn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.scn:3:"), "{}", stderr(&o));
}

#[test]
fn parse_emits_a_program_that_parses_again() {
    let dir = workspace();
    let first = scendbg(dir.path(), &["parse", "s.scn"]);
    assert!(first.status.success(), "{}", stderr(&first));
    fs::write(dir.path().join("again.scn"), stdout(&first)).unwrap();
    let second = scendbg(dir.path(), &["parse", "again.scn"]);
    assert_eq!(stdout(&first), stdout(&second));

    let schema = scendbg(dir.path(), &["parse", "s.scn", "--schema"]);
    let v: Value = serde_json::from_str(&stdout(&schema)).unwrap();
    let names: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"dist(ego,otherCar)"));
}

#[test]
fn sample_writes_json_lines() {
    let dir = workspace();
    let o = scendbg(dir.path(), &["sample", "s.scn", "-n", "10", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["_seedIndex"], i);
        let d = v["dist(ego,otherCar)"].as_f64().unwrap();
        assert!(d >= 5.0);
    }
}

#[test]
fn seed_flag_wins_over_environment() {
    let dir = workspace();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_scendbg"));
        c.current_dir(dir.path()).env_remove("SCENDBG_SEED");
        if let Some(e) = env {
            c.env("SCENDBG_SEED", e);
        }
        c.args(["sample", "s.scn", "-n", "3"]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        stdout(&c.output().unwrap())
    };
    assert_eq!(run(Some("7"), None), run(None, Some("7")));
    assert_eq!(run(Some("9"), Some("7")), run(None, Some("7")));
    assert_ne!(run(Some("9"), None), run(None, Some("7")));

    let bad = Command::new(env!("CARGO_BIN_EXE_scendbg"))
        .current_dir(dir.path())
        .env("SCENDBG_SEED", "seven")
        .args(["sample", "s.scn", "-n", "1"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn unsatisfiable_program_exits_3() {
    let dir = workspace();
    fs::write(
        dir.path().join("u.scn"),
        "param t = uniform(0, 1)\nego = car(x: 0, y: 0)\nrequire t > 2\n",
    )
    .unwrap();
    let o = scendbg(dir.path(), &["sample", "u.scn", "-n", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn evaluate_labels_and_dumps_scenes() {
    let dir = workspace();
    let p = dir.path();
    let o = scendbg(
        p,
        &[
            "sample",
            "s.scn",
            "-n",
            "20",
            "--seed",
            "1",
            "-o",
            "samples.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = scendbg(
        p,
        &[
            "evaluate",
            "s.scn",
            "samples.jsonl",
            "--detector",
            "det.toml",
            "-o",
            "labels.jsonl",
            "--dump-scenes",
            "scenes",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = fs::read_to_string(p.join("labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 20);
    for l in labels.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        // Every PRANGER is dropped; everything else is found exactly.
        let expected = if v["features"]["otherCar.model"] == "PRANGER" {
            "incorrect"
        } else {
            "correct"
        };
        assert_eq!(v["label"], expected);
        assert!(v["activations"].is_array());
    }
    let dumps = fs::read_dir(p.join("scenes")).unwrap().count();
    assert_eq!(dumps, 20);
    let scene: Value =
        serde_json::from_str(&fs::read_to_string(p.join("scenes/scene_000000.json")).unwrap()).unwrap();
    assert_eq!(scene["groundTruth"].as_array().unwrap().len(), 1);
}

#[test]
fn extract_refine_validate_coverage_chain() {
    let dir = workspace();
    let p = dir.path();
    for (name, seed) in [("train", "1"), ("test", "2")] {
        let samples = format!("{name}_samples.jsonl");
        let labels = format!("{name}.jsonl");
        assert!(scendbg(
            p,
            &["sample", "s.scn", "-n", "300", "--seed", seed, "-o", &samples]
        )
        .status
        .success());
        let o = scendbg(
            p,
            &[
                "evaluate",
                "s.scn",
                &samples,
                "--detector",
                "det.toml",
                "-o",
                &labels,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = scendbg(
        p,
        &[
            "extract",
            "s.scn",
            "train.jsonl",
            "--method",
            "dt-bb",
            "--test",
            "test.jsonl",
            "-o",
            "rules.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rules: Value = serde_json::from_str(&fs::read_to_string(p.join("rules.json")).unwrap()).unwrap();
    assert_eq!(rules["best"]["target"], "incorrect");
    assert_eq!(rules["best"]["precision"], 1.0);
    assert_eq!(rules["best"]["provenance"], "dt/bb");

    let o = scendbg(p, &["refine", "s.scn", "rules.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stdout(&o).contains(r#"require otherCar.model in {"PRANGER"}"#),
        "{}",
        stdout(&o)
    );

    let o = scendbg(
        p,
        &[
            "validate",
            "s.scn",
            "rules.json",
            "--detector",
            "det.toml",
            "-n",
            "50",
            "--csv",
            "v.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["incorrectRatio"], 1.0);
    let csv = fs::read_to_string(p.join("v.csv")).unwrap();
    assert!(csv.starts_with("sampleIndex,cumulativeIncorrectRatio\n"));
    assert_eq!(csv.lines().count(), 51);

    let o = scendbg(
        p,
        &["coverage", "s.scn", "rules.json", "-n", "2000", "--seed", "4"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let (est, se) = text.trim().split_once(" ± ").unwrap();
    let est: f64 = est.parse().unwrap();
    let se: f64 = se.parse().unwrap();
    assert!((est - 1.0 / 3.0).abs() < 4.0 * se.max(0.01), "{text}");
}

fn write_config(p: &Path, extra: &str) {
    let cfg = format!(
        "scenario_path = \"s.scn\"\ndetector_config_path = \"det.toml\"\ntrain_size = 120\ntest_size = 120\n\
         validate_size = 40\ncoverage_samples = 500\nseed = 5\noutput_dir = \"out\"\n{extra}"
    );
    fs::write(p.join("run.toml"), cfg).unwrap();
}

#[test]
fn run_writes_every_artifact_and_report_renders() {
    let dir = workspace();
    let p = dir.path();
    write_config(p, "methods = [\"dt-bb\"]\n");
    let o = scendbg(p, &["--jobs", "2", "run", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| dt-bb | incorrect |"));
    for f in [
        "labels_train.jsonl",
        "labels_test.jsonl",
        "rules_dt-bb_incorrect.json",
        "refined_dt-bb_incorrect.scn",
        "validation_dt-bb_incorrect.csv",
        "summary.json",
        "summary.md",
    ] {
        assert!(p.join("out").join(f).exists(), "missing {f}");
    }
    let o = scendbg(p, &["report", "out/summary.json"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), fs::read_to_string(p.join("out/summary.md")).unwrap());
}

#[test]
fn null_fault_model_reports_missing_incorrect_examples() {
    let dir = workspace();
    let p = dir.path();
    fs::write(p.join("det.toml"), "seed = 1\n").unwrap();
    write_config(p, "methods = [\"dt-bb\", \"anchor-bb\"]\n");
    let o = scendbg(p, &["run", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: Value = serde_json::from_str(&fs::read_to_string(p.join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(s["baseline"]["testCorrectRatio"], 1.0);
    for r in s["results"].as_array().unwrap() {
        if r["target"] == "incorrect" {
            assert_eq!(r["status"], "no-examples");
        }
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = workspace();
    let p = dir.path();
    write_config(p, "bogus_key = 1\n");
    assert_eq!(scendbg(p, &["run", "run.toml"]).status.code(), Some(2));
    write_config(p, "methods = [\"dt-xx\"]\n");
    assert_eq!(scendbg(p, &["run", "run.toml"]).status.code(), Some(2));
    assert_eq!(scendbg(p, &["run", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn whitebox_without_activations_exits_4() {
    let dir = workspace();
    let p = dir.path();
    fs::write(
        p.join("ext.jsonl"),
        "{\"_seedIndex\": 0, \"detections\": [{\"box\": [0, 0, 10, 10], \"confidence\": 0.9}]}\n",
    )
    .unwrap();
    let cfg = "scenario_path = \"s.scn\"\nexternal_detections_path = \"ext.jsonl\"\nmethods = [\"dt-wb\"]\n";
    fs::write(p.join("run.toml"), cfg).unwrap();
    let o = scendbg(p, &["run", "run.toml"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("activations"));
}
