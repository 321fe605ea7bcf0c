use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use stereopose::geometry::formats::encode_pfm;
use stereopose::pose::monte_carlo_fit;
use stereopose::scenegen::{pose_input, read_dataset};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stereopose"));
    c.env_remove("STEREOPOSE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A 100-sample dataset shared by the read-only tests.
fn dataset() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("ds");
        let o = run(&["gen", "--n", "100", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("split: train 90 / test 10"), "{}", stdout(&o));
        (tmp, out)
    })
    .1
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_reports_tags_and_rejects_small_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("small");
    let o = run(&["gen", "--n", "12", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("illumination penumbra: 3"), "{s}");
    assert!(s.contains("noise motion_blur: 3"), "{s}");

    let rerun = run(&["gen", "--n", "12", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&rerun), 0, "{}", stderr(&rerun));
    assert!(stdout(&rerun).contains("byte-identical"));
    let other = run(&["gen", "--n", "12", "--seed", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&other), 4);
    // verification leaves nothing behind
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);

    let tiny = run(&["gen", "--n", "5", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&tiny), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["gen", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--threads", "0", "bench-attn", "--no-time"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn thread_count_comes_from_environment() {
    let o = bin().env("STEREOPOSE_THREADS", "2").args(["bench-attn", "--no-time"]).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("threads: Some(\n        2,\n    )"), "{}", stderr(&o));
}

#[test]
fn eval_disparity_on_exact_and_shifted_predictions() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["eval-disparity", "--pred", ds.to_str().unwrap(), "--gt", ds.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 101);
    let all = rows.last().unwrap();
    assert_eq!(all[0], "all");
    assert!(all[2..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{all:?}");

    let data = read_dataset(ds, false).unwrap();
    let pred_dir = tmp.path().join("pred");
    fs::create_dir(&pred_dir).unwrap();
    for id in data.manifest.ids(stereopose::scenegen::Split::Test) {
        let mut d = data.load(id).unwrap().disparity;
        for v in d.values.iter_mut() {
            *v = (*v as f32 + 1.0) as f64;
        }
        fs::write(pred_dir.join(format!("{}.pfm", data.manifest.samples[id].dir)), encode_pfm(&d)).unwrap();
    }
    let csv = tmp.path().join("eval.csv");
    let o = run(&["eval-disparity", "--pred", pred_dir.to_str().unwrap(), "--gt", ds.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("samples=10"));
    let rows = csv_rows(&fs::read_to_string(&csv).unwrap());
    let (per, all) = rows.split_at(rows.len() - 1);
    let num = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    for r in per {
        assert!((num(r, 2) - 1.0).abs() < 1e-4, "{r:?}");
    }
    // pixel-weighted aggregate
    let n: f64 = per.iter().map(|r| num(r, 1)).sum();
    for col in [2, 4, 5, 6, 7] {
        let expect = per.iter().map(|r| num(r, 1) * num(r, col)).sum::<f64>() / n;
        assert!((num(&all[0], col) - expect).abs() < 1e-12, "column {col}");
    }
    let rmse = (per.iter().map(|r| num(r, 1) * num(r, 3).powi(2)).sum::<f64>() / n).sqrt();
    assert!((num(&all[0], 3) - rmse).abs() < 1e-12);

    fs::remove_file(fs::read_dir(&pred_dir).unwrap().next().unwrap().unwrap().path()).unwrap();
    let o = run(&["eval-disparity", "--pred", pred_dir.to_str().unwrap(), "--gt", ds.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn eval_pose_against_ground_truth_and_oracle_chain() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["eval-pose", "--pred", ds.to_str().unwrap(), "--data", ds.to_str().unwrap(), "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("mean_e_t_m=0\nmean_e_r_rad=0\n"), "{}", stderr(&o));
    // the dataset also holds training samples, so against the test split it is a mismatch
    let o = run(&["eval-pose", "--pred", ds.to_str().unwrap(), "--data", ds.to_str().unwrap()]);
    assert_eq!(code(&o), 4);

    let preds = tmp.path().join("preds");
    let o = run(&["estimate", "--data", ds.to_str().unwrap(), "--out", preds.to_str().unwrap(), "--sigma", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval-pose", "--pred", preds.to_str().unwrap(), "--data", ds.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv_rows(&stdout(&o)).len(), 10);

    let all = tmp.path().join("all");
    let o = run(&["estimate", "--data", ds.to_str().unwrap(), "--out", all.to_str().unwrap(), "--sigma", "0.01", "--split", "all"]);
    assert_eq!(code(&o), 0);
    let o = run(&["eval-pose", "--pred", all.to_str().unwrap(), "--data", ds.to_str().unwrap(), "--split", "all"]);
    let rows = csv_rows(&stdout(&o));
    let mean = |i: usize| rows.iter().map(|r| r[i].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    let (et, er) = (mean(1), mean(2));

    let data = read_dataset(ds, false).unwrap();
    let (mut mt, mut mr) = (0.0, 0.0);
    for e in &data.manifest.samples {
        let s = data.load(e.id).unwrap();
        let n = pose_input(&s, &data.model).unwrap().points.len() as f64;
        let (t, r) = monte_carlo_fit(&data.model.keypoints, &s.pose, 0.01 / n.sqrt(), 50, e.seed).unwrap();
        mt += t;
        mr += r;
    }
    let k = data.manifest.samples.len() as f64;
    assert!((et / (mt / k) - 1.0).abs() < 0.2, "e_t {et} vs {}", mt / k);
    assert!((er / (mr / k) - 1.0).abs() < 0.2, "e_R {er} vs {}", mr / k);

    let inside = ds.join("preds");
    assert_eq!(code(&run(&["estimate", "--data", ds.to_str().unwrap(), "--out", inside.to_str().unwrap()])), 2);
    assert!(!inside.exists());
}

#[test]
fn fit_recovers_transforms_and_rejects_collinear_input() {
    let tmp = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: &[[f64; 6]]| {
        let p = tmp.path().join(name);
        let text: String = rows.iter().map(|r| r.map(|v| v.to_string()).join(",") + "\n").collect();
        fs::write(&p, format!("# ox,oy,oz,cx,cy,cz\n{text}")).unwrap();
        p
    };
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [1.0, 1.0, 1.0]];
    let same: Vec<[f64; 6]> = pts.iter().map(|p| [p[0], p[1], p[2], p[0], p[1], p[2]]).collect();
    let o = run(&["fit", "--input", write("id.csv", &same).to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let r: Vec<f64> = json["rotation"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(r.iter().zip(eye).all(|(a, b)| (a - b).abs() < 1e-12));

    // 90° about z, then a shift
    let moved: Vec<[f64; 6]> = pts.iter().map(|p| [p[0], p[1], p[2], -p[1] + 1.0, p[0] - 2.0, p[2] + 10.0]).collect();
    let o = run(&["fit", "--input", write("moved.csv", &moved).to_str().unwrap()]);
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(json["residual"].as_f64().unwrap() < 1e-9);
    let t: Vec<f64> = json["translation"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((t[0] - 1.0).abs() < 1e-9 && (t[1] + 2.0).abs() < 1e-9 && (t[2] - 10.0).abs() < 1e-9);

    let line: Vec<[f64; 6]> = (0..3).map(|i| [i as f64, i as f64, 0.0, i as f64, i as f64, 5.0]).collect();
    let o = run(&["fit", "--input", write("line.csv", &line).to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("collinear"), "{}", stderr(&o));

    assert_eq!(code(&run(&["fit", "--input", tmp.path().join("missing.csv").to_str().unwrap()])), 3);
}

#[test]
fn gradcheck_attention_passes_and_is_repeatable() {
    let o = run(&["gradcheck", "--module", "attention", "--seed", "0,1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[0], "attention");
        assert!(r[5].parse::<f64>().unwrap() < 1e-4, "{r:?}");
    }
    let again = run(&["gradcheck", "--module", "attention", "--seed", "0,1"]);
    assert_eq!(stdout(&o), stdout(&again));
}

#[test]
fn corrupted_gradient_fails_check() {
    let o = run(&["gradcheck", "--module", "pose-head", "--seed", "0", "--corrupt-grad", "0.01"]);
    assert_eq!(code(&o), 6);
    assert!(stderr(&o).contains("worst"), "{}", stderr(&o));
}

#[test]
fn bench_reports_scaling() {
    let o = run(&["bench-attn", "--no-time", "--d", "16"]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&stdout(&o));
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r[2].parse::<f64>().unwrap() < r[1].parse::<f64>().unwrap());
    }
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("flop exponent")).unwrap();
    let nums: Vec<f64> = line.split([' ', ',']).filter_map(|w| w.parse().ok()).collect();
    assert!((nums[0] - 2.0).abs() <= 0.1 && (nums[1] - 1.0).abs() <= 0.1, "{line}");

    let timed = run(&["bench-attn", "--n", "64,128", "--reps", "1"]);
    assert_eq!(code(&timed), 0);
    assert!(stderr(&timed).contains("wall-time exponent"));
}

#[test]
fn stereo_training_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let train = |dir: &str| {
        let out = tmp.path().join(dir);
        let o = run(&[
            "train-toy", "--model", "stereo", "--out", out.to_str().unwrap(), "--steps", "4", "--pairs", "2",
            "--lr-schedule", "cyclic", "--lr-low", "1e-5", "--lr-high", "1e-3", "--seed", "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(out.join("config.json").is_file());
        fs::read_to_string(out.join("loss.csv")).unwrap()
    };
    let (a, b) = (train("a"), train("b"));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
}

#[test]
fn pose_head_trains_and_drives_estimation() {
    let ds = dataset();
    let tmp = tempfile::tempdir().unwrap();
    let head = tmp.path().join("head");
    let o = run(&["train-toy", "--model", "pose", "--data", ds.to_str().unwrap(), "--out", head.to_str().unwrap(), "--steps", "5", "--points", "64"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(head.join("head.json").is_file());
    let preds = tmp.path().join("preds");
    let o = run(&["estimate", "--data", ds.to_str().unwrap(), "--out", preds.to_str().unwrap(), "--head", head.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&preds).unwrap().count(), 10);

    let o = run(&["train-toy", "--model", "pose", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
