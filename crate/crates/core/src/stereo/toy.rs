use std::fmt::Write as _;
use std::path::Path;

use numkernel::{io, Adam, AdamConfig, Graph, LrSchedule, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TscaConfig;
use super::model::{sequence_loss, Tsca};
use crate::error::{Error, Result};
use crate::geometry::DisparityMap;
use crate::metrics;

/// A rectified pair of a textured fronto-parallel plane.
#[derive(Clone, Debug)]
pub struct ToyPair {
    /// `[3, H, W]` in `[0, 1]`.
    pub left: Tensor,
    pub right: Tensor,
    pub gt: DisparityMap,
    pub disparity: f64,
}

/// Smooth random texture: two octaves of bilinearly interpolated value noise.
struct Texture {
    octaves: Vec<(f64, usize, usize, Vec<f64>)>,
}

impl Texture {
    fn new<R: Rng>(rng: &mut R, width: f64, height: f64) -> Self {
        let octaves = [(4.0, 0.65), (2.0, 0.35)]
            .into_iter()
            .map(|(cell, amp): (f64, f64)| {
                let gw = (width / cell).ceil() as usize + 2;
                let gh = (height / cell).ceil() as usize + 2;
                let grid = (0..gw * gh * 3).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
                (cell, gw, gh, grid)
            })
            .collect();
        Self { octaves }
    }

    fn sample(&self, x: f64, y: f64, ch: usize) -> f64 {
        let mut v = 0.5;
        for (cell, gw, gh, grid) in &self.octaves {
            let (gx, gy) = (x / cell, y / cell);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let at = |i: usize, j: usize| grid[(ch * gh + j.min(gh - 1)) * gw + i.min(gw - 1)];
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            v += 0.5 * (top * (1.0 - fy) + bottom * fy);
        }
        v.clamp(0.0, 1.0)
    }
}

/// `n` planes at disparities drawn from `U(lo, hi)` pixels.
///
/// The right view satisfies `R(u) = L(u + d*)`, so left pixels with `u < d*`
/// have no correspondence and are marked invalid.
pub fn toy_dataset(n: usize, config: &TscaConfig, range: (f64, f64), seed: u64) -> Result<Vec<ToyPair>> {
    let (lo, hi) = range;
    if !(lo >= 0.0 && lo < hi && hi <= config.max_full_disparity()) {
        return Err(Error::InvalidArgument(format!(
            "disparity range ({lo}, {hi}) outside [0, {}]",
            config.max_full_disparity()
        )));
    }
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let d = rng.random_range(lo..hi);
        let tex = Texture::new(&mut rng, w as f64 + hi + 1.0, h as f64);
        let left = Tensor::from_fn(&[3, h, w], |i| tex.sample((i % w) as f64, ((i / w) % h) as f64, i / (h * w)));
        let right = Tensor::from_fn(&[3, h, w], |i| tex.sample((i % w) as f64 + d, ((i / w) % h) as f64, i / (h * w)));
        let valid: Vec<bool> = (0..h * w).map(|p| (p % w) as f64 >= d).collect();
        let gt = DisparityMap::new(w, h, vec![d; h * w], valid)?;
        pairs.push(ToyPair {
            left,
            right,
            gt,
            disparity: d,
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
}

impl TrainOptions {
    /// One triangular learning-rate cycle from 1e-4 up to 4e-3 and back.
    pub fn desk(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            schedule: LrSchedule::Cyclic {
                low: 1e-4,
                high: 4e-3,
                cycles: 1,
                total_steps: steps,
            },
        }
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self::desk(500, 0)
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, loss, epe)` where EPE is of the final iterate on the step's pair.
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,epe\n");
        for (step, loss, epe) in &self.rows {
            let _ = writeln!(s, "{step},{loss},{epe}");
        }
        s
    }

    /// Mean EPE over consecutive windows of `window` steps.
    pub fn window_epe(&self, window: usize) -> Vec<f64> {
        self.rows
            .chunks(window.max(1))
            .map(|c| c.iter().map(|r| r.2).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

pub struct TrainedModel {
    pub net: Tsca,
    pub store: ParamStore,
    pub log: TrainLog,
}

/// Mean end-point error of the final iterate over `pairs`.
pub fn mean_epe(net: &Tsca, store: &ParamStore, pairs: &[ToyPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("toy dataset"));
    }
    let mut total = 0.0;
    for p in pairs {
        let pred = net.predict(store, &p.left, &p.right)?;
        total += metrics::epe(&pred, &p.gt, None)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Adam on the sequence loss, one pair per step in dataset order.
pub fn train_toy(pairs: &[ToyPair], config: &TscaConfig, options: &TrainOptions) -> Result<TrainedModel> {
    if pairs.is_empty() {
        return Err(Error::Empty("toy dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut store = ParamStore::new();
    let net = Tsca::new(&mut store, &mut rng, config.clone())?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: options.schedule.lr_at(0),
            ..AdamConfig::default()
        },
    )?;
    let mut log = TrainLog::default();
    for step in 0..options.steps {
        let pair = &pairs[step % pairs.len()];
        let g = Graph::new();
        let out = net.forward(&g, &store, g.constant(pair.left.clone()), g.constant(pair.right.clone()), None)?;
        let loss = sequence_loss(&g, &out.iterates, &pair.gt, None, config.gamma)?;
        let loss_value = g.scalar_value(loss)?;
        if !loss_value.is_finite() {
            return Err(Error::Degenerate(format!("non-finite loss at step {step}")));
        }
        let last = g.value(*out.iterates.last().expect("iterates"));
        let pred = DisparityMap::from_values(config.width, config.height, last.data().to_vec())?;
        let epe = metrics::epe(&pred, &pair.gt, None)?;
        log.rows.push((step, loss_value, epe));
        g.backward(loss)?;
        adam.set_lr(options.schedule.lr_at(step))?;
        let grads = g.param_grads(&store);
        adam.step(&mut store, &grads)?;
    }
    Ok(TrainedModel { net, store, log })
}

/// Writes `config.json` plus the parameter tensors under `dir`.
pub fn save_checkpoint(dir: &Path, config: &TscaConfig, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::corrupt("config", e.to_string()))?;
    let path = dir.join("config.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    io::save_params(store, dir.join("params"))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Tsca, ParamStore)> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: TscaConfig = serde_json::from_str(&text).map_err(|e| Error::corrupt("config", e.to_string()))?;
    let mut store = ParamStore::new();
    let net = Tsca::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), config)?;
    io::load_params_into(&mut store, dir.join("params"))?;
    Ok((net, store))
}
