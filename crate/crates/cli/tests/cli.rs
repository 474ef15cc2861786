use std::path::Path;
use std::process::{Command, Output};

use vslam_core::imaging::GrayImage;
use vslam_core::losses::{loss_class, loss_desc, DetectorLossConfig, Relation, ScoreMap};

fn vslam(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vslam")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(o: &Output, key: &str) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing from {}", stdout(o)))
}

#[test]
fn evaluate_identical_trajectories_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let tum = "0.0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n0.2 1 1 0 0 0.0998334 0 0.9950042\n0.3 2 1 0.5 0 0 0 1\n";
    std::fs::write(dir.path().join("t.tum"), tum).unwrap();
    let o = vslam(&["evaluate", "--est", "t.tum", "--gt", "t.tum", "--out", "rep"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(value(&o, "ate_rmse").abs() < 1e-12);
    assert!(value(&o, "rpe_trans").abs() < 1e-12);
    for f in ["metrics.csv", "trajectory.svg", "manifest.json"] {
        assert!(dir.path().join("rep").join(f).is_file(), "{f}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = vslam(&["run", "nowhere", "--dataset", "synth", "--loop-closing", "interleaved", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--vocab"));
    assert!(!dir.path().join("o").exists());

    assert_eq!(vslam(&["run", "x", "--dataset", "synth", "--out", "o", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(vslam(&["teleport"], dir.path()).status.code(), Some(2));
    assert_eq!(vslam(&["distort", "--input", "a", "--out", "b"], dir.path()).status.code(), Some(2));
    assert_eq!(
        vslam(&["run", "x", "--dataset", "synth", "--features", "sift", "--out", "o"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(vslam(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn modeled_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = vslam(&["run", "missing", "--dataset", "kitti", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = vslam(&["evaluate", "--est", "a.tum", "--gt", "b.tum"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("a.tum"));
}

#[test]
fn gamma_round_trip_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    let original: Vec<GrayImage> = (0..3)
        .map(|k| GrayImage::from_fn(64, 48, |x, y| ((x * 4 + y * 3 + k * 17) % 256) as f64 / 255.0))
        .collect();
    for (k, img) in original.iter().enumerate() {
        img.save(&src.join(format!("{k:06}.png"))).unwrap();
    }
    let o = vslam(&["distort", "--input", "src", "--out", "g2", "--gamma", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vslam(&["distort", "--input", "g2", "--out", "back", "--gamma", "0.5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let q = 0.5 / 255.0;
    for (k, img) in original.iter().enumerate() {
        let back = GrayImage::load(&dir.path().join(format!("back/{k:06}.png"))).unwrap();
        for (&a, &b) in img.pixels().iter().zip(back.pixels()) {
            // the stored square carries up to half a level of error, which the square root stretches
            let y = a * a;
            let bound = ((y + q).sqrt() - y.sqrt()).max(y.sqrt() - (y - q).max(0.0).sqrt()) + q + 1e-12;
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }
    let manifest = std::fs::read_to_string(dir.path().join("back/manifest.json")).unwrap();
    assert!(manifest.contains("\"0.5\""));
}

#[test]
fn frame_skip_keeps_every_nth_image() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    for k in 0..7 {
        GrayImage::filled(8, 8, k as f64 / 10.0).save(&src.join(format!("{k:06}.pgm"))).unwrap();
    }
    let o = vslam(&["distort", "--input", "src", "--out", "s", "--skip", "3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    assert_eq!(names, ["000000.pgm", "000003.pgm", "000006.pgm"]);
}

#[test]
fn losses_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let input = r#"{
        "descriptor": {"dk": [1.0, 2.0, 2.0], "dl": [0.0, 0.0, 0.0], "relation": "negative", "margin": 4.0},
        "orientation": {"d1": [3.0, 0.0], "d2": [0.0, 4.0]},
        "detector": {
            "maps": [
                {"rows": 1, "cols": 3, "values": [0.0, 2.0, 0.0]},
                {"rows": 1, "cols": 3, "values": [0.5, 0.5, 0.5]},
                {"rows": 1, "cols": 3, "values": [1.0, 0.0, 0.0]},
                {"rows": 1, "cols": 3, "values": [-1.0, -2.0, -3.0]}
            ],
            "d1": [1.0, 1.0], "d2": [1.0, 1.0]
        }
    }"#;
    std::fs::write(dir.path().join("in.json"), input).unwrap();
    let o = vslam(&["losses", "--input", "in.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["descriptor"].as_f64().unwrap(), 1.0);
    assert_eq!(v["orientation"].as_f64().unwrap(), 5.0);
    let maps = [
        ScoreMap::new(1, 3, vec![0.0, 2.0, 0.0]).unwrap(),
        ScoreMap::new(1, 3, vec![0.5, 0.5, 0.5]).unwrap(),
        ScoreMap::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
        ScoreMap::new(1, 3, vec![-1.0, -2.0, -3.0]).unwrap(),
    ];
    let class = loss_class(&maps, &DetectorLossConfig::default());
    assert_eq!(v["detector"]["class"].as_f64().unwrap(), class);
    assert_eq!(v["detector"]["pair"].as_f64().unwrap(), 0.0);
    assert_eq!(v["detector"]["total"].as_f64().unwrap(), class);
    assert!((v["detector"]["softargmax"][1][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(loss_desc(&[1.0, 2.0, 2.0], &[0.0; 3], Relation::Negative, 4.0).unwrap(), 1.0);

    std::fs::write(dir.path().join("bad.json"), r#"{"descriptor": {"dk": [1.0], "dl": [1.0, 2.0], "relation": "positive"}}"#)
        .unwrap();
    assert_eq!(vslam(&["losses", "--input", "bad.json"], dir.path()).status.code(), Some(1));
}

#[test]
fn synthetic_pipeline_end_to_end_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = vslam(&["synth", "--out", "ds", "--frames", "120", "--seed", "3"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ds/synthetic.json").is_file());
    assert!(d.join("ds/features/000119.feat").is_file());

    let o = vslam(&["vocab-build", "--from", "ds/features", "--levels", "3", "--out", "voc"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let args = [
        "run", "ds", "--dataset", "synth", "--features", "files:ds/features", "--vocab", "voc/vocabulary.txt", "--adaptive",
        "--seed", "5", "--out", "r1", "--trace",
    ];
    let o = vslam(&args, d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(value(&o, "ate_rmse") < 1e-6);
    for f in ["trajectory.tum", "stats.json", "metrics.csv", "trajectory.svg", "manifest.json", "trace.csv"] {
        assert!(d.join("r1").join(f).is_file(), "{f}");
    }
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r1/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["frames"], 120);
    assert_eq!(
        stats["tracked_frames"].as_u64().unwrap() + stats["lost_frames"].as_u64().unwrap(),
        120
    );

    // replay the recorded invocation into a second directory
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    let replay: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().replace("r1", "r2"))
        .collect();
    let o = vslam(&replay.iter().map(String::as_str).collect::<Vec<_>>(), d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read_to_string(d.join("r1/trajectory.tum")).unwrap(),
        std::fs::read_to_string(d.join("r2/trajectory.tum")).unwrap()
    );
}
