use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use numkernel::LrSchedule;
use stereopose::attention::{bench_forward, fit_exponent, flop_count, FusionDirections, Mechanism};
use stereopose::checks::{self, Suite};
use stereopose::geometry::formats::{decode_pfm, read_file};
use stereopose::metrics::{evaluate_disparity, evaluate_pose, DisparityEvalReport};
use stereopose::pose::{
    fit_pose, fit_residual, load_head, mean_errors, oracle_offsets, pose_rows_csv, predict_offsets, recover_pose, save_head,
    train_head, HeadConfig, HeadExample, PoseConfig, PoseRecord, PoseRow,
};
use stereopose::scenegen::{
    generate_dataset, head_example, pose_input, read_dataset, splitmix64, Dataset, DatasetConfig, Illumination, NoiseTag, Split,
    MANIFEST,
};
use stereopose::stereo::toy::{mean_epe, save_checkpoint};
use stereopose::stereo::{toy_dataset, train_toy as train_stereo, TrainOptions, TscaConfig};
use stereopose::{CameraIntrinsics, Error, StereoRig};

use crate::files;
use crate::{
    BenchArgs, EstimateArgs, EvalDisparityArgs, EvalPoseArgs, Failure, FitArgs, FusionArg, GenArgs, GradcheckArgs, LrScheduleArg,
    ModelArg, ModuleArg, Outcome, Scale, SplitArg, TrainArgs,
};

const ROTATION_TOL: f64 = 1e-6;

fn split_ids(ds: &Dataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => ds.manifest.ids(Split::Train),
        SplitArg::Test => ds.manifest.ids(Split::Test),
        SplitArg::All => ds.manifest.samples.iter().map(|s| s.id).collect(),
    }
}

/// Output goes to `csv` when given, else stdout.
fn emit(csv: Option<&Path>, text: &str) -> Result<(), Error> {
    match csv {
        Some(path) => files::write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Requires the predictions to name exactly the selected samples.
fn match_predictions<'a>(
    found: &'a BTreeMap<String, std::path::PathBuf>,
    ds: &Dataset,
    ids: &[usize],
) -> Result<Vec<(usize, &'a Path)>, Error> {
    let wanted: BTreeSet<&str> = ids.iter().map(|&id| ds.manifest.samples[id].dir.as_str()).collect();
    let missing: Vec<&str> = wanted.iter().copied().filter(|d| !found.contains_key(*d)).collect();
    let extra: Vec<&str> = found.keys().map(String::as_str).filter(|d| !wanted.contains(d)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Mismatch(format!(
            "{} predictions for {} samples; missing {:?}, unexpected {:?}",
            found.len(),
            wanted.len(),
            &missing[..missing.len().min(5)],
            &extra[..extra.len().min(5)]
        )));
    }
    Ok(ids.iter().map(|&id| (id, found[&ds.manifest.samples[id].dir].as_path())).collect())
}

pub fn gen(a: GenArgs) -> Outcome {
    let mut config = DatasetConfig::new(a.n, a.seed);
    config.target.keypoints = a.keypoints;
    if a.scale == Scale::Paper {
        config.rig = StereoRig::new(CameraIntrinsics::full_scale(), 1.0)?;
    }
    if a.out.join(MANIFEST).is_file() {
        return verify_regeneration(&config, &a.out);
    }
    let manifest = generate_dataset(&config, &a.out)?;
    let mut by_light: BTreeMap<&str, usize> = BTreeMap::new();
    let mut by_noise: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &manifest.samples {
        *by_light.entry(s.illumination.name()).or_default() += 1;
        *by_noise.entry(s.noise.name()).or_default() += 1;
    }
    println!("samples: {}", manifest.samples.len());
    println!("split: train {} / test {}", manifest.train, manifest.test);
    for l in Illumination::ALL {
        println!("illumination {}: {}", l.name(), by_light.get(l.name()).copied().unwrap_or(0));
    }
    for n in NoiseTag::ALL {
        println!("noise {}: {}", n.name(), by_noise.get(n.name()).copied().unwrap_or(0));
    }
    println!("tree sha256: {}", files::tree_hash(&a.out)?);
    Ok(())
}

/// Regenerates next to an existing dataset and compares the two trees.
fn verify_regeneration(config: &DatasetConfig, out: &Path) -> Outcome {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("dataset");
    let staging = out.with_file_name(format!(".{name}.verify-{}", std::process::id()));
    let result = generate_dataset(config, &staging).and_then(|_| Ok((files::tree_hash(out)?, files::tree_hash(&staging)?)));
    let _ = fs::remove_dir_all(&staging);
    let (existing, fresh) = result?;
    if existing == fresh {
        println!("byte-identical: {} matches a fresh regeneration (sha256 {existing})", out.display());
        Ok(())
    } else {
        Err(Error::Mismatch(format!(
            "{} differs from a fresh regeneration with these arguments (sha256 {existing} vs {fresh})",
            out.display()
        ))
        .into())
    }
}

fn disparity_csv_header(taus: &[f64]) -> String {
    let mut s = String::from("id,n,epe,rmse,d1");
    for t in taus {
        let _ = write!(s, ",bad_{t}");
    }
    s.push('\n');
    s
}

fn disparity_csv_row(id: &str, r: &DisparityEvalReport) -> String {
    let mut s = format!("{id},{},{},{},{}", r.n, r.epe, r.rmse, r.d1);
    for (_, frac) in &r.bad {
        let _ = write!(s, ",{frac}");
    }
    s.push('\n');
    s
}

/// Pixel-weighted combination of per-sample reports.
fn aggregate(reports: &[DisparityEvalReport], taus: &[f64]) -> DisparityEvalReport {
    let n: usize = reports.iter().map(|r| r.n).sum();
    let w = |f: &dyn Fn(&DisparityEvalReport) -> f64| reports.iter().map(|r| r.n as f64 * f(r)).sum::<f64>() / n as f64;
    DisparityEvalReport {
        epe: w(&|r| r.epe),
        rmse: w(&|r| r.rmse * r.rmse).sqrt(),
        bad: taus.iter().enumerate().map(|(i, &t)| (t, w(&|r| r.bad[i].1))).collect(),
        d1: w(&|r| r.d1),
        n,
    }
}

pub fn eval_disparity(a: EvalDisparityArgs) -> Outcome {
    if a.tau.iter().any(|t| !(*t > 0.0)) {
        return Err(Failure::Usage(format!("thresholds must be positive, got {:?}", a.tau)));
    }
    let ds = read_dataset(&a.gt, false)?;
    let ids = split_ids(&ds, a.split);
    if ids.is_empty() {
        return Err(Error::Empty("selected split").into());
    }
    let found = files::predictions(&a.pred, "pfm", "disp.pfm")?;
    let pairs = match_predictions(&found, &ds, &ids)?;
    let mut csv = disparity_csv_header(&a.tau);
    let mut reports = Vec::with_capacity(pairs.len());
    for (id, path) in pairs {
        let entry = ds.entry(id)?;
        let pred = decode_pfm(&read_file(path)?, &format!("prediction {}", entry.dir))?;
        let gt = ds.load(id)?.disparity;
        if !pred.same_shape(&gt) {
            return Err(Error::Mismatch(format!(
                "prediction {} is {}x{}, ground truth {}x{}",
                entry.dir, pred.width, pred.height, gt.width, gt.height
            ))
            .into());
        }
        let report = evaluate_disparity(&pred, &gt, None, &a.tau)?;
        csv.push_str(&disparity_csv_row(&entry.dir, &report));
        reports.push(report);
    }
    let total = aggregate(&reports, &a.tau);
    csv.push_str(&disparity_csv_row("all", &total));
    emit(a.csv.as_deref(), &csv)?;
    let summary = format!("samples={}\n{}", reports.len(), total.to_text());
    if a.csv.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(())
}

pub fn eval_pose(a: EvalPoseArgs) -> Outcome {
    let ds = read_dataset(&a.data, false)?;
    let ids = split_ids(&ds, a.split);
    if ids.is_empty() {
        return Err(Error::Empty("selected split").into());
    }
    let found = files::predictions(&a.pred, "json", "pose.json")?;
    let pairs = match_predictions(&found, &ds, &ids)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, path) in pairs {
        let entry = ds.entry(id)?;
        let record: PoseRecord = serde_json::from_str(&files::read_to_string(path)?)
            .map_err(|e| Error::Corrupt {
                what: format!("prediction {}", entry.dir),
                reason: e.to_string(),
            })?;
        let pred = record.to_pose(ROTATION_TOL)?;
        let truth = ds.load(id)?.pose;
        let report = evaluate_pose(&truth, &pred)?;
        rows.push(PoseRow::new(&entry.dir, &report, entry.illumination.name(), entry.noise.name()));
    }
    emit(a.csv.as_deref(), &pose_rows_csv(&rows))?;
    let (et, er) = mean_errors(&rows).expect("non-empty split");
    let summary = format!("samples={}\nmean_e_t_m={et}\nmean_e_r_rad={er}\nmean_e_r_deg={}\n", rows.len(), er.to_degrees());
    if a.csv.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(())
}

fn parse_correspondences(text: &str, path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), Error> {
    let (mut obj, mut cam) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = match line.split([',', ' ', '\t']).filter(|s| !s.is_empty()).map(str::parse).collect() {
            Ok(v) => v,
            Err(_) if obj.is_empty() && line.chars().any(char::is_alphabetic) => continue, // header
            Err(e) => {
                return Err(Error::Corrupt {
                    what: format!("{} line {}", path.display(), i + 1),
                    reason: e.to_string(),
                })
            }
        };
        if vals.len() != 6 {
            return Err(Error::Corrupt {
                what: format!("{} line {}", path.display(), i + 1),
                reason: format!("expected 6 numbers, found {}", vals.len()),
            });
        }
        obj.push(Vector3::new(vals[0], vals[1], vals[2]));
        cam.push(Vector3::new(vals[3], vals[4], vals[5]));
    }
    Ok((obj, cam))
}

pub fn fit(a: FitArgs) -> Outcome {
    let text = files::read_to_string(&a.input)?;
    let (obj, cam) = parse_correspondences(&text, &a.input)?;
    let pose = fit_pose(&obj, &cam)?;
    let residual = fit_residual(&pose, &obj, &cam);
    let mut json = serde_json::to_value(pose.to_record()).expect("plain numbers");
    json["residual"] = serde_json::json!(residual);
    json["correspondences"] = serde_json::json!(obj.len());
    println!("{}", serde_json::to_string_pretty(&json).expect("plain numbers"));
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let suites: Vec<Suite> = match a.module {
        ModuleArg::All => Suite::ALL.to_vec(),
        ModuleArg::Numkernel => vec![Suite::Numkernel],
        ModuleArg::Attention => vec![Suite::Attention],
        ModuleArg::StereoNetwork => vec![Suite::Stereo],
        ModuleArg::PoseHead => vec![Suite::PoseHead],
    };
    if a.seed.is_empty() {
        return Err(Failure::Usage("at least one seed is required".into()));
    }
    let rows = checks::run_suites(&suites, &a.seed, a.corrupt_grad)?;
    emit(a.csv.as_deref(), &checks::rows_csv(&rows))?;
    let failed = rows.iter().filter(|r| !r.passed()).count();
    let worst = checks::worst(&rows).expect("suites are non-empty");
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} gradient checks failed; worst: {worst}", rows.len())));
    }
    eprintln!("all {} gradient checks passed; worst: {worst}", rows.len());
    Ok(())
}

pub fn bench_attn(a: BenchArgs) -> Outcome {
    if a.n.len() < 2 || a.n.contains(&0) || a.d == 0 {
        return Err(Failure::Usage("need at least two token counts ≥ 1 and d ≥ 1".into()));
    }
    let mut csv = String::from("n,vanilla_flops,ecaa_flops,vanilla_ms,ecaa_ms\n");
    let (mut fv, mut fe, mut tv, mut te) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &n in &a.n {
        let v = flop_count(Mechanism::Vanilla, n as u64, a.d as u64)? as f64;
        let e = flop_count(Mechanism::Ecaa, n as u64, a.d as u64)? as f64;
        fv.push(v);
        fe.push(e);
        let _ = write!(csv, "{n},{v},{e}");
        if a.no_time {
            csv.push_str(",,\n");
        } else {
            let ms = |m| bench_forward(m, n, a.d, a.reps, a.seed).map(|t| t.as_secs_f64() * 1e3);
            let (v_ms, e_ms) = (ms(Mechanism::Vanilla)?, ms(Mechanism::Ecaa)?);
            tv.push(v_ms);
            te.push(e_ms);
            let _ = writeln!(csv, ",{v_ms},{e_ms}");
        }
    }
    print!("{csv}");
    let xs: Vec<f64> = a.n.iter().map(|&n| n as f64).collect();
    eprintln!("flop exponent: vanilla {:.3}, ecaa {:.3}", fit_exponent(&xs, &fv)?, fit_exponent(&xs, &fe)?);
    if !a.no_time {
        eprintln!("wall-time exponent: vanilla {:.3}, ecaa {:.3}", fit_exponent(&xs, &tv)?, fit_exponent(&xs, &te)?);
    }
    Ok(())
}

fn schedule(a: &TrainArgs) -> Result<LrSchedule, Failure> {
    let s = match a.lr_schedule {
        LrScheduleArg::Const => LrSchedule::Constant(a.lr),
        LrScheduleArg::Cyclic => LrSchedule::Cyclic {
            low: a.lr_low,
            high: a.lr_high,
            cycles: a.lr_cycles,
            total_steps: a.steps,
        },
    };
    let ok = match s {
        LrSchedule::Constant(lr) => lr > 0.0,
        LrSchedule::Cyclic { low, high, cycles, .. } => low > 0.0 && high >= low && cycles >= 1,
    };
    if !ok {
        return Err(Failure::Usage(format!("invalid learning-rate schedule {s:?}")));
    }
    Ok(s)
}

pub fn train_toy(a: TrainArgs) -> Outcome {
    let schedule = schedule(&a)?;
    match a.model {
        ModelArg::Stereo => {
            let mut cfg = TscaConfig::default();
            cfg.d_max = a.d_max.unwrap_or(cfg.d_max);
            cfg.iters = a.iters.unwrap_or(cfg.iters);
            cfg.seca = !a.no_seca;
            cfg.triplet = !a.no_triplet;
            let hi = (cfg.max_full_disparity() * 0.6).min(cfg.width as f64 * 0.6);
            let pairs = toy_dataset(a.pairs, &cfg, (4.0_f64.min(hi / 2.0), hi), a.seed)?;
            let options = TrainOptions {
                steps: a.steps,
                seed: a.seed,
                schedule,
            };
            let initial = {
                let m = train_stereo(&pairs, &cfg, &TrainOptions { steps: 0, ..options.clone() })?;
                mean_epe(&m.net, &m.store, &pairs)?
            };
            let trained = train_stereo(&pairs, &cfg, &options)?;
            let fin = mean_epe(&trained.net, &trained.store, &pairs)?;
            save_checkpoint(&a.out, &cfg, &trained.store)?;
            files::write(&a.out.join("loss.csv"), &trained.log.to_csv())?;
            let last = trained.log.rows.last().map_or(f64::NAN, |r| r.1);
            println!("steps: {}", a.steps);
            println!("final loss: {last}");
            println!("mean EPE: {initial} -> {fin} px");
        }
        ModelArg::Pose => {
            let Some(data) = &a.data else {
                return Err(Failure::Usage("--model pose needs --data".into()));
            };
            let ds = read_dataset(data, false)?;
            let ids = ds.manifest.ids(Split::Train);
            let examples = ids
                .iter()
                .map(|&id| head_example(&ds.load(id)?, &ds.model, a.points, splitmix64(a.seed ^ id as u64)))
                .collect::<Result<Vec<HeadExample>, Error>>()?;
            let config = HeadConfig {
                keypoints: ds.model.keypoints.len(),
                directions: fusion(a.fusion),
                ..HeadConfig::default()
            };
            let trained = train_head(&examples, config.clone(), a.steps, schedule, a.seed)?;
            save_head(&a.out, &config, &trained.store)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in trained.losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l}");
            }
            files::write(&a.out.join("loss.csv"), &csv)?;
            println!("examples: {}", examples.len());
            println!("steps: {}", a.steps);
            println!("loss: {} -> {}", trained.losses.first().unwrap_or(&f64::NAN), trained.losses.last().unwrap_or(&f64::NAN));
        }
    }
    Ok(())
}

fn fusion(f: FusionArg) -> FusionDirections {
    let [(_, r2p), (_, p2r), (_, both)] = FusionDirections::ablations();
    match f {
        FusionArg::RgbToPoint => r2p,
        FusionArg::PointToRgb => p2r,
        FusionArg::Bidirectional => both,
    }
}

/// Absolute form of a path that may not exist yet, via its nearest existing ancestor.
fn resolve(path: &Path) -> Option<std::path::PathBuf> {
    let abs = std::path::absolute(path).ok()?;
    let mut tail = Vec::new();
    let mut cur = abs.as_path();
    loop {
        if let Ok(base) = cur.canonicalize() {
            return Some(tail.iter().rev().fold(base, |acc, part| acc.join(part)));
        }
        tail.push(cur.file_name()?.to_os_string());
        cur = cur.parent()?;
    }
}

pub fn estimate(a: EstimateArgs) -> Outcome {
    if !(a.sigma >= 0.0) || !(a.bandwidth > 0.0) {
        return Err(Failure::Usage("--sigma must be ≥ 0 and --bandwidth positive".into()));
    }
    if let (Some(out), Ok(data)) = (resolve(&a.out), a.data.canonicalize()) {
        if out.starts_with(data) {
            return Err(Failure::Usage("--out must not lie inside the dataset".into()));
        }
    }
    let ds = read_dataset(&a.data, false)?;
    let head = a.head.as_deref().map(load_head).transpose()?;
    let config = PoseConfig {
        bandwidth_frac: a.bandwidth,
        ..PoseConfig::default()
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let kp = &ds.model.keypoints;
    let (mut written, mut ties) = (0, 0);
    for id in split_ids(&ds, a.split) {
        let entry = ds.entry(id)?;
        let sample = ds.load(id)?;
        let input = pose_input(&sample, &ds.model)?;
        let offsets = match &head {
            Some((h, store)) => {
                let ex = HeadExample::unlabeled(&input.points, &input.colors, kp.len(), ds.model.diameter / 2.0)?;
                predict_offsets(h, store, &ex)?.0
            }
            None => oracle_offsets(&input.points, kp, &sample.pose, a.sigma, splitmix64(a.seed ^ entry.seed))?,
        };
        let indicator = vec![true; input.points.len()];
        let est = recover_pose(&input.points, &offsets, &indicator, kp, ds.model.diameter, &config)?;
        ties += est.ties;
        let json = serde_json::to_string_pretty(&est.pose.to_record()).expect("plain numbers");
        files::write(&a.out.join(format!("{}.json", entry.dir)), &json)?;
        written += 1;
    }
    println!("poses written: {written}");
    println!("tied keypoint clusters: {ties}");
    Ok(())
}
