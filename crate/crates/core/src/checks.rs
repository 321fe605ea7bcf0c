//! Finite-difference gradient suites for the numeric kernel, the attention
//! blocks, the stereo network and the pose head.

use std::fmt;

use numkernel::gradcheck::{gradcheck, gradcheck_params, primitive_checks, GradcheckOptions, GradcheckReport};
use numkernel::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AugSc, Ecaa, EcaaConfig, Ecft, FusionDirections, Gffn, Seca, TripletAttention, VanillaAttention};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::pose::{head_loss, HeadConfig, HeadExample, LossWeights, PoseHead};
use crate::stereo::{Tsca, TscaConfig};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
/// The full network has many ReLU, clamp and max kinks; elements whose
/// difference step straddles one are skipped and counted.
pub const KINK_TOL: f64 = 5e-5;
/// Fail when more than this fraction of elements had to be skipped.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;
pub const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Numkernel,
    Attention,
    Stereo,
    PoseHead,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Numkernel, Suite::Attention, Suite::Stereo, Suite::PoseHead];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Numkernel => "numkernel",
            Suite::Attention => "attention",
            Suite::Stereo => "stereo_network",
            Suite::PoseHead => "pose-head",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Numkernel => PRIMITIVE_TOL,
            _ => COMPOSITE_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub suite: Suite,
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        let total = (self.checked + self.skipped).max(1) as f64;
        self.max_rel_err < self.tol && self.checked > 0 && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * total
    }
}

impl fmt::Display for CheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<15} {:<28} seed={} checked={:<5} skipped={:<3} max_rel_err={:.3e} {}",
            self.suite.name(),
            self.name,
            self.seed,
            self.checked,
            self.skipped,
            self.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// `suite,op,seed,checked,max_rel_err,tol,pass` lines.
pub fn rows_csv(rows: &[CheckRow]) -> String {
    let mut s = String::from("suite,op,seed,checked,skipped,max_rel_err,tol,pass\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6e},{:e},{}\n",
            r.suite.name(),
            r.name,
            r.seed,
            r.checked,
            r.skipped,
            r.max_rel_err,
            r.tol,
            r.passed()
        ));
    }
    s
}

pub fn worst(rows: &[CheckRow]) -> Option<&CheckRow> {
    rows.iter().max_by(|a, b| (a.max_rel_err / a.tol).total_cmp(&(b.max_rel_err / b.tol)))
}

struct Ctx {
    suite: Suite,
    seed: u64,
    corrupt: f64,
    kink_tol: Option<f64>,
    rows: Vec<CheckRow>,
}

impl Ctx {
    fn options(&self, max_elements: Option<usize>) -> GradcheckOptions {
        GradcheckOptions {
            kink_tol: self.kink_tol,
            max_elements,
            seed: self.seed,
            corrupt: self.corrupt,
            ..GradcheckOptions::default()
        }
    }

    fn push(&mut self, name: impl Into<String>, report: GradcheckReport) {
        self.rows.push(CheckRow {
            suite: self.suite,
            name: name.into(),
            seed: self.seed,
            max_rel_err: report.max_rel_err,
            checked: report.checked,
            skipped: report.skipped,
            tol: self.suite.tolerance(),
        });
    }

    fn inputs<F>(&mut self, name: &str, inputs: &[Tensor], max: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&Graph, &[Var]) -> numkernel::Result<Var>,
    {
        let report = gradcheck(inputs, &self.options(max), f)?;
        self.push(format!("{name}/inputs"), report);
        Ok(())
    }

    fn params<F>(&mut self, name: &str, store: &ParamStore, max: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&Graph, &ParamStore) -> numkernel::Result<Var>,
    {
        let ids: Vec<_> = store.ids().collect();
        let report = gradcheck_params(store, &ids, &self.options(max), f)?;
        self.push(format!("{name}/params"), report);
        Ok(())
    }
}

/// Adapts a crate-level forward to the kernel's error type for the checker.
fn nk<T>(r: Result<T>) -> numkernel::Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(inner) => inner,
        other => numkernel::Error::InvalidArgument(other.to_string()),
    })
}

/// Runs one suite. `corrupt` scales every analytic gradient by `1 + corrupt`.
pub fn run_suite(suite: Suite, seed: u64, corrupt: f64) -> Result<Vec<CheckRow>> {
    let mut ctx = Ctx {
        suite,
        seed,
        corrupt,
        kink_tol: (suite == Suite::Stereo).then_some(KINK_TOL),
        rows: Vec::new(),
    };
    match suite {
        Suite::Numkernel => {
            for check in primitive_checks(seed) {
                let report = check.run(&ctx.options(None))?;
                ctx.push(check.name, report);
            }
        }
        Suite::Attention => attention_suite(&mut ctx)?,
        Suite::Stereo => stereo_suite(&mut ctx)?,
        Suite::PoseHead => head_suite(&mut ctx)?,
    }
    Ok(ctx.rows)
}

pub fn run_suites(suites: &[Suite], seeds: &[u64], corrupt: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &suite in suites {
        for &seed in seeds {
            rows.extend(run_suite(suite, seed, corrupt)?);
        }
    }
    Ok(rows)
}

fn attention_suite(ctx: &mut Ctx) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let (n, d) = (6, 4);
    let f_src = Tensor::randn(&[n, d], 1.0, &mut rng);
    let f_tgt = Tensor::randn(&[n, d], 1.0, &mut rng);
    let pair = [f_src.clone(), f_tgt.clone()];

    let mut store = ParamStore::new();
    let ecaa = Ecaa::new(&mut store, &mut rng, "ecaa", d, EcaaConfig::default());
    ctx.inputs("ecaa", &pair, None, |g, v| nk(ecaa.forward(g, &store, v[0], v[1])))?;
    ctx.params("ecaa", &store, None, |g, s| {
        nk(ecaa.forward(g, s, g.constant(f_src.clone()), g.constant(f_tgt.clone())))
    })?;

    let mut store = ParamStore::new();
    let t = Linear::new(&mut store, &mut rng, "t", d, d, true);
    let gffn = Gffn::new(&mut store, &mut rng, "gffn", d, 2 * d);
    ctx.inputs("gffn", &pair, None, |g, v| nk(gffn.forward(g, &store, v[0], v[1], &t)))?;
    ctx.params("gffn", &store, None, |g, s| {
        nk(gffn.forward(g, s, g.constant(f_src.clone()), g.constant(f_tgt.clone()), &t))
    })?;

    let mut store = ParamStore::new();
    let aug = AugSc::new(&mut store, &mut rng, "augsc", d);
    ctx.inputs("augsc", &pair[..1], None, |g, v| nk(aug.forward(g, &store, v[0])))?;

    for (label, dirs) in FusionDirections::ablations() {
        let mut store = ParamStore::new();
        let ecft = Ecft::new(&mut store, &mut rng, "ecft", d, dirs, EcaaConfig::default())?;
        let both = |g: &Graph, s: &ParamStore, p: Var, r: Var| -> numkernel::Result<Var> {
            let (a, b) = nk(ecft.forward(g, s, p, r))?;
            g.concat(&[a, b], 0)
        };
        ctx.inputs(&format!("ecft_{label}"), &pair, None, |g, v| both(g, &store, v[0], v[1]))?;
        ctx.params(&format!("ecft_{label}"), &store, Some(4), |g, s| {
            both(g, s, g.constant(f_src.clone()), g.constant(f_tgt.clone()))
        })?;
    }

    let mut store = ParamStore::new();
    let vanilla = VanillaAttention::new(&mut store, &mut rng, "vanilla", d);
    ctx.inputs("vanilla", &pair, None, |g, v| nk(vanilla.forward(g, &store, v[0], v[1])))?;

    let vol = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let seca = Seca::new(&mut store, &mut rng, "seca", 2, 2);
    ctx.inputs("seca", std::slice::from_ref(&vol), Some(24), |g, v| nk(seca.forward(g, &store, v[0])))?;
    ctx.params("seca", &store, Some(6), |g, s| nk(seca.forward(g, s, g.constant(vol.clone()))))?;
    ctx.inputs("eca", std::slice::from_ref(&vol), Some(24), |g, v| nk(seca.eca.forward(g, &store, v[0])))?;

    // distinct entries keep the max-pool away from ties
    let mut map = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
    for (i, x) in map.data_mut().iter_mut().enumerate() {
        *x += i as f64 * 0.05;
    }
    let mut store = ParamStore::new();
    let ta = TripletAttention::new(&mut store, &mut rng, "ta");
    ctx.inputs("triplet", std::slice::from_ref(&map), Some(30), |g, v| nk(ta.forward(g, &store, v[0])))?;
    ctx.params("triplet", &store, Some(8), |g, s| nk(ta.forward(g, s, g.constant(map.clone()))))?;
    Ok(())
}

fn stereo_suite(ctx: &mut Ctx) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let config = TscaConfig::tiny();
    let mut store = ParamStore::new();
    let net = Tsca::new(&mut store, &mut rng, config.clone())?;
    let shape = [3, config.height, config.width];
    let left = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let right = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    // record the detached lookups once, then replay them in every evaluation
    let replay = {
        let g = Graph::new();
        net.forward(&g, &store, g.constant(left.clone()), g.constant(right.clone()), None)?
            .detached
    };
    // first and last estimates before the fixed ×4 upsampling
    let last = |g: &Graph, s: &ParamStore, l: Var, r: Var| -> numkernel::Result<Var> {
        let out = nk(net.forward(g, s, l, r, Some(&replay)))?;
        g.concat(&[out.coarse[0], *out.coarse.last().expect("iterates")], 0)
    };
    ctx.inputs("tsca", &[left.clone(), right.clone()], Some(12), |g, v| last(g, &store, v[0], v[1]))?;
    ctx.params("tsca", &store, Some(2), |g, s| {
        last(g, s, g.constant(left.clone()), g.constant(right.clone()))
    })?;
    Ok(())
}

fn head_suite(ctx: &mut Ctx) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let config = HeadConfig {
        d: 6,
        hidden: 8,
        keypoints: 4,
        ..HeadConfig::default()
    };
    let mut store = ParamStore::new();
    let head = PoseHead::new(&mut store, &mut rng, config)?;
    let n = 7;
    let pts: Vec<_> = (0..n)
        .map(|_| nalgebra::Vector3::from_fn(|_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)))
        .collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|i| [0.1 * i as f64, 0.5, 0.9 - 0.1 * i as f64]).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let kps: Vec<_> = (0..4).map(|j| nalgebra::Vector3::new(j as f64, 1.0, -0.5 * j as f64)).collect();
    let ex = HeadExample::new(&pts, &colors, &labels, &kps, &nalgebra::Vector3::new(0.1, 0.2, 0.3), 2.0)?;
    ctx.inputs("head", &[ex.xyz.clone(), ex.rgb.clone()], None, |g, v| {
        let out = nk(head.forward(g, &store, v[0], v[1]))?;
        let flat = |x: Var| g.reshape(x, &[g.shape(x).iter().product()]);
        g.concat(&[flat(out.offsets)?, flat(out.probs)?, flat(out.center)?], 0)
    })?;
    ctx.params("head_loss", &store, Some(6), |g, s| nk(head_loss(g, s, &head, &ex, LossWeights::default())))?;
    Ok(())
}
