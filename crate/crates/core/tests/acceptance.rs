//! One line per acceptance criterion. Exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use numkernel::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereopose::attention::{bench_forward, fit_exponent, flop_count, EcaaConfig, Ecft, FusionDirections, Mechanism};
use stereopose::checks::{self, Suite};
use stereopose::geometry::{backproject, depth_to_disparity, disparity_to_depth};
use stereopose::metrics::{evaluate_disparity, evaluate_pose};
use stereopose::pose::{fit_pose, monte_carlo_fit, oracle_offsets, pose_rows_csv, recover_pose, Pose, PoseConfig, PoseRow};
use stereopose::scenegen::{
    build_target, check_consistency, generate_dataset, pose_input, render_all, DatasetConfig, SceneSample, TargetModel,
    TargetParams, Tolerance,
};
use stereopose::stereo::toy::mean_epe;
use stereopose::stereo::{toy_dataset, train_toy, TrainOptions, TscaConfig};
use stereopose::{DepthMap, Error};

type V3 = Vector3<f64>;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOL: f64 = 1e-12;
const EXACT_FIT_TOL: f64 = 1e-9;
const FIT_TRIALS: usize = 1000;
const CHAIN_SAMPLES: usize = 50;
const CHAIN_TOL: f64 = 1e-6;
const CHAIN_BUDGET: Duration = Duration::from_secs(60);
const NOISY_SAMPLES: usize = 200;
const NOISY_SIGMA: f64 = 0.01;
const NOISY_REL_TOL: f64 = 0.2;
const MC_TRIALS: usize = 40;
const BENCH_NS: [u64; 5] = [256, 512, 1024, 2048, 4096];
const BENCH_D: u64 = 16;
const EXPONENT_TOL: f64 = 0.1;
const MIN_SPEEDUP: f64 = 2.0;
const TOY_PAIRS: usize = 8;
const TOY_STEPS: usize = 500;
const TOY_RATIO: f64 = 0.2;
const TOY_EPE_PX: f64 = 0.5;
const ABLATION_STEPS: usize = 10;
const ROUND_TRIP_TOL: f64 = 1e-9;
const MASTER_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Scenes shared by the chain, geometry and consistency criteria.
struct Scenes {
    model: TargetModel,
    samples: Vec<SceneSample>,
}

fn scenes(n: usize) -> Scenes {
    let (model, samples) = render_all(&DatasetConfig::new(n, MASTER_SEED)).unwrap();
    Scenes { model, samples }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = checks::run_suites(&Suite::ALL, &checks::SEEDS, 0.0).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let worst = checks::worst(&rows).unwrap();
    outcome(
        failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} checks, worst {} {} rel {:.2e} (tol {:.0e}), {} failed, {:.1}s{}",
            rows.len(),
            worst.suite.name(),
            worst.name,
            worst.max_rel_err,
            worst.tol,
            failed.len(),
            elapsed.as_secs_f64(),
            failed.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn oracle_suite() -> Outcome {
    use common::oracle;
    let results = [
        ("conv3d", oracle::conv3d()),
        ("softmax", oracle::softmax()),
        ("metrics", oracle::disparity_metrics()),
        ("losses", oracle::pose_losses()),
        ("seca", oracle::seca()),
        ("ecaa", oracle::ecaa()),
    ];
    let (name, worst) = results.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    outcome(
        results.iter().all(|r| r.1 < ORACLE_TOL),
        format!("{} oracles, worst {name} {worst:.2e} (tol {ORACLE_TOL:.0e})", results.len()),
    )
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let t = V3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(10.0..50.0));
    Pose::from_quaternion(q, t).unwrap()
}

fn exact_recovery() -> Outcome {
    let model = build_target(&TargetParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let (mut et, mut er) = (0.0f64, 0.0f64);
    for _ in 0..FIT_TRIALS {
        let p = random_pose(&mut rng);
        let cam: Vec<V3> = model.keypoints.iter().map(|k| p.apply(k)).collect();
        let r = evaluate_pose(&p, &fit_pose(&model.keypoints, &cam).unwrap()).unwrap();
        et = et.max(r.e_t);
        er = er.max(r.e_r);
    }
    let line: Vec<V3> = (0..3).map(|i| V3::new(1.0, -2.0, 0.5) * i as f64).collect();
    let collinear = matches!(fit_pose(&line, &line), Err(Error::Degenerate(_)));
    outcome(
        et < EXACT_FIT_TOL && er < EXACT_FIT_TOL && collinear,
        format!("{FIT_TRIALS} trials, max e_t {et:.2e} m, max e_R {er:.2e} rad, collinear rejected: {collinear}"),
    )
}

fn zero_noise_chain(s: &Scenes) -> Outcome {
    let start = Instant::now();
    let (mut et, mut er) = (0.0f64, 0.0f64);
    for sample in &s.samples {
        let input = pose_input(sample, &s.model).unwrap();
        let offsets = oracle_offsets(&input.points, &s.model.keypoints, &sample.pose, 0.0, sample.seed).unwrap();
        let ind = vec![true; input.points.len()];
        let est = recover_pose(&input.points, &offsets, &ind, &s.model.keypoints, s.model.diameter, &PoseConfig::default()).unwrap();
        let r = evaluate_pose(&sample.pose, &est.pose).unwrap();
        et = et.max(r.e_t);
        er = er.max(r.e_r);
    }
    let elapsed = start.elapsed();
    outcome(
        et < CHAIN_TOL && er < CHAIN_TOL && elapsed < CHAIN_BUDGET,
        format!(
            "{} samples, max e_t {et:.2e} m, max e_R {er:.2e} rad, {:.1}s (rendering excluded)",
            s.samples.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Mean-shift with a bandwidth far above σ averages all `N` votes, so the
/// reference perturbs each keypoint by `σ/√N`.
fn noisy_chain(s: &Scenes) -> Outcome {
    let (mut chain_t, mut chain_r, mut mc_t, mut mc_r) = (0.0, 0.0, 0.0, 0.0);
    for sample in &s.samples {
        let input = pose_input(sample, &s.model).unwrap();
        let n = input.points.len();
        let offsets = oracle_offsets(&input.points, &s.model.keypoints, &sample.pose, NOISY_SIGMA, sample.seed).unwrap();
        let est =
            recover_pose(&input.points, &offsets, &vec![true; n], &s.model.keypoints, s.model.diameter, &PoseConfig::default()).unwrap();
        let r = evaluate_pose(&sample.pose, &est.pose).unwrap();
        chain_t += r.e_t;
        chain_r += r.e_r;
        let (t, rr) = monte_carlo_fit(&s.model.keypoints, &sample.pose, NOISY_SIGMA / (n as f64).sqrt(), MC_TRIALS, sample.seed ^ 1).unwrap();
        mc_t += t;
        mc_r += rr;
    }
    let k = s.samples.len() as f64;
    let (chain_t, chain_r, mc_t, mc_r) = (chain_t / k, chain_r / k, mc_t / k, mc_r / k);
    let (dt, dr) = ((chain_t / mc_t - 1.0).abs(), (chain_r / mc_r - 1.0).abs());
    outcome(
        dt <= NOISY_REL_TOL && dr <= NOISY_REL_TOL,
        format!(
            "{} samples, e_t {chain_t:.3e} vs {mc_t:.3e} m ({:.1}%), e_R {chain_r:.3e} vs {mc_r:.3e} rad ({:.1}%)",
            s.samples.len(),
            100.0 * dt,
            100.0 * dr
        ),
    )
}

fn complexity() -> Outcome {
    let xs: Vec<f64> = BENCH_NS.iter().map(|&n| n as f64).collect();
    let exponent = |m| {
        let ys: Vec<f64> = BENCH_NS.iter().map(|&n| flop_count(m, n, BENCH_D).unwrap() as f64).collect();
        fit_exponent(&xs, &ys).unwrap()
    };
    let (e_ecaa, e_vanilla) = (exponent(Mechanism::Ecaa), exponent(Mechanism::Vanilla));
    let n = *BENCH_NS.last().unwrap() as usize;
    let t_ecaa = bench_forward(Mechanism::Ecaa, n, BENCH_D as usize, 5, 0).unwrap();
    let t_vanilla = bench_forward(Mechanism::Vanilla, n, BENCH_D as usize, 3, 0).unwrap();
    let speedup = t_vanilla.as_secs_f64() / t_ecaa.as_secs_f64();
    outcome(
        (e_ecaa - 1.0).abs() <= EXPONENT_TOL && (e_vanilla - 2.0).abs() <= EXPONENT_TOL && speedup >= MIN_SPEEDUP,
        format!("flop exponents ecaa {e_ecaa:.3}, vanilla {e_vanilla:.3}; n={n} wall time {t_ecaa:.2?} vs {t_vanilla:.2?} ({speedup:.1}x)"),
    )
}

fn trainability() -> Outcome {
    let cfg = TscaConfig::default();
    let pairs = toy_dataset(TOY_PAIRS, &cfg, (4.0, 40.0), 0).unwrap();
    let start = Instant::now();
    let untrained = train_toy(&pairs, &cfg, &TrainOptions::desk(0, 0)).unwrap();
    let before = mean_epe(&untrained.net, &untrained.store, &pairs).unwrap();
    let trained = train_toy(&pairs, &cfg, &TrainOptions::desk(TOY_STEPS, 0)).unwrap();
    let after = mean_epe(&trained.net, &trained.store, &pairs).unwrap();
    let train_time = start.elapsed();
    let mut ablations = Vec::new();
    for (name, ab) in cfg.ablations() {
        let ok = train_toy(&pairs, &ab, &TrainOptions::desk(ABLATION_STEPS, 0))
            .map(|m| m.log.rows.iter().all(|r| r.1.is_finite()))
            .unwrap_or(false);
        ablations.push((name, ok));
    }
    let ablations_ok = ablations.iter().all(|a| a.1);
    outcome(
        after <= TOY_RATIO * before && after <= TOY_EPE_PX && ablations_ok,
        format!(
            "EPE {before:.3} -> {after:.3} px after {TOY_STEPS} steps ({:.1}%, {:.0}s); ablations {}",
            100.0 * after / before,
            train_time.as_secs_f64(),
            ablations.iter().map(|(n, ok)| format!("{n}:{}", if *ok { "ok" } else { "error" })).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn geometry(s: &Scenes) -> Outcome {
    let rig = s.samples[0].rig;
    let k = rig.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let (mut depth_err, mut pixel_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let values: Vec<f64> = (0..k.width * k.height).map(|_| rng.random_range(1.0..200.0)).collect();
        let valid: Vec<bool> = (0..values.len()).map(|_| rng.random_bool(0.9)).collect();
        let depth = DepthMap::new(k.width, k.height, values, valid).unwrap();
        let back = disparity_to_depth(&depth_to_disparity(&depth, &rig), &rig);
        for i in 0..depth.len() {
            assert_eq!(depth.valid[i], back.valid[i]);
            if depth.valid[i] {
                depth_err = depth_err.max((depth.values[i] - back.values[i]).abs());
            }
        }
        let cloud = backproject(&depth, &k);
        for (p, &(u, v)) in cloud.points.iter().zip(cloud.pixels.as_ref().unwrap()) {
            let (pu, pv, _) = k.project(p).unwrap();
            pixel_err = pixel_err.max((pu - u as f64).abs().max((pv - v as f64).abs()));
        }
    }
    let mut consistency = (0.0f64, 0usize);
    for sample in &s.samples {
        let report = check_consistency(sample, &s.model, Tolerance::EXACT, sample.seed).unwrap();
        consistency.0 = consistency.0.max(report.max_disparity_residual);
        consistency.1 += !report.passed() as usize;
    }
    outcome(
        depth_err < ROUND_TRIP_TOL && pixel_err < ROUND_TRIP_TOL && consistency.1 == 0,
        format!(
            "depth round trip {depth_err:.2e} m, pixel round trip {pixel_err:.2e} px, {} samples validated, max disparity residual {:.2e} px, {} inconsistent",
            s.samples.len(),
            consistency.0,
            consistency.1
        ),
    )
}

/// Everything the criterion compares between two runs with the same seed.
fn deterministic_run() -> (String, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let config = DatasetConfig::new(12, MASTER_SEED);
    generate_dataset(&config, dir.path()).unwrap();
    let tree = common::tree_hash(dir.path());

    let cfg = TscaConfig::tiny();
    let pairs = toy_dataset(2, &cfg, (3.0, 20.0), 1).unwrap();
    let trained = train_toy(&pairs, &cfg, &TrainOptions::desk(5, 1)).unwrap();
    let mut bytes = trained.log.to_csv().into_bytes();
    for id in trained.store.ids().collect::<Vec<_>>() {
        bytes.extend(trained.store.get(id).data().iter().flat_map(|v| v.to_le_bytes()));
    }
    for p in &pairs {
        let pred = trained.net.predict(&trained.store, &p.left, &p.right).unwrap();
        let rep = evaluate_disparity(&pred, &p.gt, None, &[1.0, 2.0, 3.0]).unwrap();
        bytes.extend(format!("{rep:?}").into_bytes());
    }

    let dataset = stereopose::scenegen::read_dataset(dir.path(), false).unwrap();
    let mut rows = Vec::new();
    for entry in dataset.manifest.samples.iter() {
        let sample = dataset.load(entry.id).unwrap();
        let input = pose_input(&sample, &dataset.model).unwrap();
        let offsets = oracle_offsets(&input.points, &dataset.model.keypoints, &sample.pose, NOISY_SIGMA, entry.seed).unwrap();
        let ind = vec![true; input.points.len()];
        let est = recover_pose(&input.points, &offsets, &ind, &dataset.model.keypoints, dataset.model.diameter, &PoseConfig::default())
            .unwrap();
        let report = evaluate_pose(&sample.pose, &est.pose).unwrap();
        rows.push(PoseRow::new(&entry.dir, &report, entry.illumination.name(), entry.noise.name()));
    }
    bytes.extend(pose_rows_csv(&rows).into_bytes());
    (tree, bytes)
}

fn determinism() -> Outcome {
    let (tree_a, eval_a) = deterministic_run();
    let (tree_b, eval_b) = deterministic_run();
    outcome(
        tree_a == tree_b && eval_a == eval_b,
        format!(
            "dataset tree {}…, {} bytes of training and evaluation output, dataset equal: {}, outputs equal: {}",
            &tree_a[..12],
            eval_a.len(),
            tree_a == tree_b,
            eval_a == eval_b
        ),
    )
}

fn fusion_directions() -> Outcome {
    let (n, d) = (16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let fp = Tensor::randn(&[n, d], 1.0, &mut rng);
    let fr = Tensor::randn(&[n, d], 1.0, &mut rng);
    let mut outputs = Vec::new();
    for (name, dirs) in FusionDirections::ablations() {
        let mut store = ParamStore::new();
        let ecft = Ecft::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "ecft", d, dirs, EcaaConfig::default()).unwrap();
        let g = Graph::new();
        let (p, r) = ecft.forward(&g, &store, g.constant(fp.clone()), g.constant(fr.clone())).unwrap();
        let mut flat = g.value(p).data().to_vec();
        flat.extend_from_slice(g.value(r).data());
        outputs.push((name, flat));
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let gap = outputs[i].1.iter().zip(&outputs[j].1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            min_gap = min_gap.min(gap);
        }
    }
    outcome(
        min_gap > 1e-6,
        format!(
            "{} configurations ran, smallest pairwise max difference {min_gap:.3e}",
            outputs.iter().map(|o| o.0).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn run(index: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!("[{}] {index:>2}. {title}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let chain = scenes(CHAIN_SAMPLES);
    let noisy = scenes(NOISY_SAMPLES);
    let results = [
        run(1, "gradient checks", gradient_suite),
        run(2, "oracle equivalence", oracle_suite),
        run(3, "exact pose recovery", exact_recovery),
        run(4, "zero-noise chain", || zero_noise_chain(&chain)),
        run(5, "noisy chain vs Monte Carlo", || noisy_chain(&noisy)),
        run(6, "attention complexity", complexity),
        run(7, "toy trainability", trainability),
        run(8, "geometry round trips", || geometry(&chain)),
        run(9, "determinism", determinism),
        run(10, "fusion directions", fusion_directions),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
