use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hiprobe_core::pipeline::{self, ProbeOptions};
use hiprobe_core::{read_dump, ProbeSet};
use serde_json::Value;
use tempfile::TempDir;

fn hiprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiprobe"))
        .args(args)
        .output()
        .expect("run hiprobe")
}

fn ok(args: &[&str]) {
    let out = hiprobe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }

    /// Writes a probing dump, probes it, and trains a scorer with
    /// calibration output.
    fn trained(&self, profile: &[&str], n_per_class: &str) {
        let dump = self.arg("probe.hsd");
        let mut synth = vec!["synth-probe", "--out", &dump, "--n-per-class", n_per_class];
        synth.extend_from_slice(profile);
        ok(&synth);
        ok(&[
            "probe",
            &self.arg("probe.hsd"),
            "--out",
            &self.arg("report.json"),
            "--no-silhouette",
        ]);
        ok(&[
            "train",
            &self.arg("probe.hsd"),
            "--report",
            &self.arg("report.json"),
            "--out",
            &self.arg("model.json"),
            "--calibration-out",
            &self.arg("calibration.json"),
        ]);
    }

    fn stream(&self, name: &str, profile: &[&str], frames: &str, windows: &[&str], seed: &str) {
        let out = self.arg(name);
        let mut args = vec![
            "synth-stream",
            "--out",
            &out,
            "--frames",
            frames,
            "--seed",
            seed,
        ];
        for w in windows {
            args.extend_from_slice(&["--window", w]);
        }
        args.extend_from_slice(profile);
        ok(&args);
    }

    fn localize(&self, sequence: &str, out: &str, extra: &[&str]) {
        let (seq, out) = (self.arg(sequence), self.arg(out));
        let (model, cal) = (self.arg("model.json"), self.arg("calibration.json"));
        let mut args = vec![
            "localize",
            &seq,
            "--model",
            &model,
            "--calibration",
            &cal,
            "--out",
            &out,
        ];
        args.extend_from_slice(extra);
        ok(&args);
    }
}

const SMALL: &[&str] = &[
    "--layers",
    "6",
    "--dim",
    "8",
    "--peak",
    "3",
    "--peak-sep",
    "8.0",
    "--profile-seed",
    "5",
];
const DEFAULT_PROFILE: &[&str] = &["--profile-seed", "0"];

fn anomalous_intervals(video: &Value) -> Vec<(u64, u64)> {
    video["segments"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["kind"] == "anomalous")
        .map(|s| {
            (
                s["start_frame"].as_u64().unwrap(),
                s["end_frame"].as_u64().unwrap(),
            )
        })
        .collect()
}

#[test]
fn probe_selects_planted_layer() {
    let ws = Workspace::new();
    ok(&[
        "synth-probe",
        "--out",
        &ws.arg("p.hsd"),
        "--n-per-class",
        "300",
    ]);
    assert!(ws.path("p.hsd.manifest.json").exists());
    assert!(ws.path("p.hsd.truth.json").exists());
    ok(&["probe", &ws.arg("p.hsd"), "--out", &ws.arg("r.json")]);
    let report = json(&ws.path("r.json"));
    assert_eq!(report["selected_layer"], 20);
    assert_eq!(report["silhouette"].as_array().unwrap().len(), 32);
}

#[test]
fn missing_input_exits_2_without_output() {
    let ws = Workspace::new();
    let out = hiprobe(&["probe", &ws.arg("absent.hsd"), "--out", &ws.arg("r.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("r.json").exists());
    assert!(!out.stderr.is_empty());
}

#[test]
fn corrupted_dump_exits_2() {
    let ws = Workspace::new();
    ok(&[
        "synth-probe",
        "--out",
        &ws.arg("p.hsd"),
        "--n-per-class",
        "5",
    ]);
    let mut bytes = std::fs::read(ws.path("p.hsd")).unwrap();
    bytes[0] = b'Z';
    std::fs::write(ws.path("p.hsd"), bytes).unwrap();
    let out = hiprobe(&["probe", &ws.arg("p.hsd"), "--out", &ws.arg("r.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("r.json").exists());
}

#[test]
fn layer_out_of_range_exits_3() {
    let ws = Workspace::new();
    ws.trained(SMALL, "20");
    let mut report = json(&ws.path("report.json"));
    report["selected_layer"] = Value::from(99);
    std::fs::write(ws.path("bad.json"), serde_json::to_vec(&report).unwrap()).unwrap();
    let out = hiprobe(&[
        "train",
        &ws.arg("probe.hsd"),
        "--report",
        &ws.arg("bad.json"),
        "--out",
        &ws.arg("m.json"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!ws.path("m.json").exists());
}

#[test]
fn dimension_mismatch_exits_3() {
    let ws = Workspace::new();
    ws.trained(SMALL, "20");
    ws.stream(
        "wide.hsd",
        &[
            "--layers",
            "6",
            "--dim",
            "9",
            "--peak",
            "3",
            "--peak-sep",
            "8.0",
        ],
        "30",
        &[],
        "1",
    );
    let out = hiprobe(&[
        "localize",
        &ws.arg("wide.hsd"),
        "--model",
        &ws.arg("model.json"),
        "--calibration",
        &ws.arg("calibration.json"),
        "--out",
        &ws.arg("loc.json"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!ws.path("loc.json").exists());
}

#[test]
fn kappa_defaults_to_0_2() {
    let ws = Workspace::new();
    ws.trained(SMALL, "20");
    ws.stream("s.hsd", SMALL, "40", &["10:19"], "2");
    ws.localize("s.hsd", "loc.json", &[]);
    let out = json(&ws.path("loc.json"));
    assert_eq!(out["config"]["kappa"], 0.2);
    assert_eq!(out["config"]["sigma"], 0.4);
    assert_eq!(out["config"]["k"], 8);
    let mu = out["config"]["calibration_mean"].as_f64().unwrap();
    let sd = out["config"]["calibration_std"].as_f64().unwrap();
    assert!((out["threshold"].as_f64().unwrap() - (mu + 0.2 * sd)).abs() < 1e-12);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let ws = Workspace::new();
    ws.trained(SMALL, "30");
    ws.stream("s.hsd", SMALL, "60", &["20:39"], "3");
    ws.localize("s.hsd", "loc.json", &["--csv", &ws.arg("curves.csv")]);

    ok(&[
        "probe",
        &ws.arg("probe.hsd"),
        "--out",
        &ws.arg("report2.json"),
        "--no-silhouette",
    ]);
    ok(&[
        "train",
        &ws.arg("probe.hsd"),
        "--report",
        &ws.arg("report2.json"),
        "--out",
        &ws.arg("model2.json"),
        "--calibration-out",
        &ws.arg("calibration2.json"),
    ]);
    ws.localize(
        "s.hsd",
        "loc2.json",
        &["--csv", &ws.arg("curves2.csv"), "--workers", "3"],
    );
    ws.stream("s2.hsd", SMALL, "60", &["20:39"], "3");

    for (a, b) in [
        ("report.json", "report2.json"),
        ("model.json", "model2.json"),
        ("calibration.json", "calibration2.json"),
        ("loc.json", "loc2.json"),
        ("curves.csv", "curves2.csv"),
        ("s.hsd", "s2.hsd"),
    ] {
        assert_eq!(
            std::fs::read(ws.path(a)).unwrap(),
            std::fs::read(ws.path(b)).unwrap(),
            "{a}"
        );
    }
}

#[test]
fn csv_export_has_one_row_per_keyframe() {
    let ws = Workspace::new();
    ws.trained(SMALL, "20");
    ws.stream("s.hsd", SMALL, "25", &["5:9"], "4");
    ws.localize("s.hsd", "loc.json", &["--csv", &ws.arg("c.csv")]);
    let csv = std::fs::read_to_string(ws.path("c.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "source,video_id,frame_index,raw_score,smoothed_score,anomalous"
    );
    assert_eq!(lines.len(), 26);
}

#[test]
fn planted_window_is_localized() {
    let ws = Workspace::new();
    ws.trained(DEFAULT_PROFILE, "500");
    ws.stream("s.hsd", DEFAULT_PROFILE, "300", &["100:200"], "0");
    ws.localize("s.hsd", "loc.json", &["--workers", "2"]);
    let out = json(&ws.path("loc.json"));
    let video = &out["videos"][0];
    let iou = hiprobe_core::localizer::interval_iou(&anomalous_intervals(video), &[(100, 200)]);
    assert!(iou >= 0.8, "IoU {iou}");
    let last = video["frame_segments"]
        .as_array()
        .unwrap()
        .last()
        .unwrap()
        .clone();
    assert_eq!(last["end_frame"], 899);
}

#[test]
fn all_normal_stream_is_one_normal_segment() {
    let profile = &[
        "--layers",
        "8",
        "--dim",
        "16",
        "--peak",
        "5",
        "--peak-sep",
        "10.0",
        "--profile-seed",
        "2",
    ];
    let ws = Workspace::new();
    ws.trained(profile, "200");
    ws.stream("s.hsd", profile, "200", &[], "9");
    ws.localize("s.hsd", "loc.json", &[]);
    let out = json(&ws.path("loc.json"));
    let segments = out["videos"][0]["segments"].as_array().unwrap();
    assert_eq!(segments.len(), 1);
    assert_eq!(segments[0]["kind"], "normal");
}

#[test]
fn full_fraction_matches_library() {
    let ws = Workspace::new();
    ok(&[
        "synth-probe",
        "--out",
        &ws.arg("p.hsd"),
        "--n-per-class",
        "12",
        "--layers",
        "4",
        "--dim",
        "3",
        "--peak",
        "1",
        "--peak-sep",
        "5.0",
    ]);
    ok(&[
        "probe",
        &ws.arg("p.hsd"),
        "--out",
        &ws.arg("r.json"),
        "--fraction",
        "1.0",
    ]);
    let (_, dump) = read_dump(&ws.path("p.hsd")).unwrap();
    let direct = pipeline::probe(&ProbeSet::new(dump).unwrap(), &ProbeOptions::default()).unwrap();
    let mut expected: Value =
        serde_json::from_str(&serde_json::to_string(&direct).unwrap()).unwrap();
    expected["fraction"] = Value::from(1.0);
    expected["seed"] = Value::from(0);
    assert_eq!(json(&ws.path("r.json")), expected);
}

#[test]
fn report_runs_every_stage() {
    let ws = Workspace::new();
    ok(&[
        "synth-probe",
        "--out",
        &ws.arg("p.hsd"),
        "--n-per-class",
        "40",
    ]);
    ws.stream("a.hsd", DEFAULT_PROFILE, "50", &["10:19"], "1");
    ws.stream("b.hsd", DEFAULT_PROFILE, "50", &[], "2");
    ok(&[
        "report",
        &ws.arg("p.hsd"),
        &ws.arg("a.hsd"),
        &ws.arg("b.hsd"),
        "--out",
        &ws.arg("run.json"),
        "--no-silhouette",
        "--fraction",
        "0.5",
    ]);
    let run = json(&ws.path("run.json"));
    assert_eq!(run["config"]["fraction"], 0.5);
    assert_eq!(run["scorer"]["trained_on"], 40);
    assert_eq!(run["videos"].as_array().unwrap().len(), 2);
    assert!(run["timings"]["probe_ms"].as_f64().unwrap() >= 0.0);
}
