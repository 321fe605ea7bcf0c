use std::path::Path;

use nalgebra::Vector3;
use numkernel::{io, Adam, AdamConfig, Graph, LrSchedule, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{center_loss, focal_loss, keypoint_loss, multitask_loss, FocalParams, LossWeights};
use crate::attention::{EcaaConfig, Ecft, FusionDirections};
use crate::error::{Error, Result};
use crate::nn::Linear;

type V3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Token width inside the fusion block.
    pub d: usize,
    pub hidden: usize,
    /// Keypoint count `M`.
    pub keypoints: usize,
    pub classes: usize,
    pub directions: FusionDirections,
    pub ecaa: EcaaConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d: 16,
            hidden: 32,
            keypoints: super::keypoints::DEFAULT_KEYPOINTS,
            classes: 2,
            directions: FusionDirections::BOTH,
            ecaa: EcaaConfig::default(),
        }
    }
}

/// Per-point predictor: xyz and RGB embeddings, cross-modal fusion, then a
/// 3-layer perceptron emitting keypoint offsets, class confidences and a
/// center offset.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub config: HeadConfig,
    pub embed_xyz: Linear,
    pub embed_rgb: Linear,
    pub fusion: Ecft,
    pub mlp: [Linear; 3],
}

pub struct HeadOutput {
    /// `[N, M, 3]`.
    pub offsets: Var,
    /// `[N, C]`, rows sum to 1.
    pub probs: Var,
    /// `[N, 3]`.
    pub center: Var,
}

impl PoseHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: HeadConfig) -> Result<Self> {
        if config.d == 0 || config.hidden == 0 || config.keypoints < 3 || config.classes < 2 {
            return Err(Error::InvalidArgument(format!("head config {config:?}")));
        }
        let d = config.d;
        let out = 3 * config.keypoints + config.classes + 3;
        Ok(Self {
            embed_xyz: Linear::new(store, rng, "head.embed_xyz", 3, d, true),
            embed_rgb: Linear::new(store, rng, "head.embed_rgb", 3, d, true),
            fusion: Ecft::new(store, rng, "head.ecft", d, config.directions, config.ecaa)?,
            mlp: [
                Linear::new(store, rng, "head.mlp0", 2 * d, config.hidden, true),
                Linear::new(store, rng, "head.mlp1", config.hidden, config.hidden, true),
                Linear::new(store, rng, "head.mlp2", config.hidden, out, true),
            ],
            config,
        })
    }

    /// `xyz` and `rgb` are `[N, 3]` token matrices (paired per point).
    pub fn forward(&self, g: &Graph, store: &ParamStore, xyz: Var, rgb: Var) -> Result<HeadOutput> {
        let (xs, rs) = (g.shape(xyz), g.shape(rgb));
        if xs.len() != 2 || xs[1] != 3 || xs != rs {
            return Err(Error::Mismatch(format!("head inputs {xs:?} and {rs:?}")));
        }
        let n = xs[0];
        let f_p = g.relu(self.embed_xyz.forward(g, store, xyz)?)?;
        let f_r = g.relu(self.embed_rgb.forward(g, store, rgb)?)?;
        let (fp, fr) = self.fusion.forward(g, store, f_p, f_r)?;
        let mut h = g.concat(&[fp, fr], 1)?;
        h = g.relu(self.mlp[0].forward(g, store, h)?)?;
        h = g.relu(self.mlp[1].forward(g, store, h)?)?;
        let y = self.mlp[2].forward(g, store, h)?;
        let m3 = 3 * self.config.keypoints;
        let c = self.config.classes;
        let offsets = g.reshape(g.slice(y, 1, 0, m3)?, &[n, self.config.keypoints, 3])?;
        let probs = g.softmax(g.slice(y, 1, m3, c)?, 1)?;
        let center = g.slice(y, 1, m3 + c, 3)?;
        Ok(HeadOutput { offsets, probs, center })
    }
}

/// Normalized per-point training targets for one sample.
#[derive(Clone, Debug)]
pub struct HeadExample {
    /// `(p − centroid) / scale`, `[N, 3]`.
    pub xyz: Tensor,
    /// `[N, 3]` colors in `[0, 1]`.
    pub rgb: Tensor,
    /// `[N, M, 3]` offsets to the keypoints divided by `scale`.
    pub offsets: Tensor,
    /// `[N, 3]` offsets to the object center divided by `scale`.
    pub center: Tensor,
    pub labels: Vec<usize>,
    pub indicator: Vec<bool>,
    pub centroid: V3,
    pub scale: f64,
}

impl HeadExample {
    pub fn new(
        points: &[V3],
        colors: &[[f64; 3]],
        labels: &[usize],
        keypoints_cam: &[V3],
        center_cam: &V3,
        scale: f64,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("head example points"));
        }
        if colors.len() != n || labels.len() != n {
            return Err(Error::Mismatch(format!("{n} points, {} colors, {} labels", colors.len(), labels.len())));
        }
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let centroid = points.iter().sum::<V3>() / n as f64;
        let m = keypoints_cam.len();
        let xyz = Tensor::from_fn(&[n, 3], |i| (points[i / 3][i % 3] - centroid[i % 3]) / scale);
        let rgb = Tensor::from_fn(&[n, 3], |i| colors[i / 3][i % 3]);
        let offsets = Tensor::from_fn(&[n, m, 3], |i| {
            let (p, j, a) = (i / (3 * m), (i / 3) % m, i % 3);
            (keypoints_cam[j][a] - points[p][a]) / scale
        });
        let center = Tensor::from_fn(&[n, 3], |i| (center_cam[i % 3] - points[i / 3][i % 3]) / scale);
        Ok(Self {
            xyz,
            rgb,
            offsets,
            center,
            labels: labels.to_vec(),
            indicator: vec![true; n],
            centroid,
            scale,
        })
    }

    /// Inputs only, for inference; the targets are zero.
    pub fn unlabeled(points: &[V3], colors: &[[f64; 3]], keypoints: usize, scale: f64) -> Result<Self> {
        let n = points.len();
        let mut ex = Self::new(points, colors, &vec![0; n], &vec![V3::zeros(); keypoints], &V3::zeros(), scale)?;
        ex.offsets = Tensor::zeros(&[n, keypoints, 3]);
        ex.center = Tensor::zeros(&[n, 3]);
        Ok(ex)
    }

    /// Keeps `count` points chosen by a seeded shuffle.
    pub fn subsample(&self, count: usize, seed: u64) -> HeadExample {
        let n = self.labels.len();
        if count >= n {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, count).into_vec();
        idx.sort_unstable();
        let m = self.offsets.shape()[1];
        let pick = |t: &Tensor, w: usize| Tensor::from_fn(&[count, w], |i| t.data()[idx[i / w] * w + i % w]);
        HeadExample {
            xyz: pick(&self.xyz, 3),
            rgb: pick(&self.rgb, 3),
            offsets: pick(&self.offsets, 3 * m).reshape(&[count, m, 3]).expect("same size"),
            center: pick(&self.center, 3),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            indicator: idx.iter().map(|&i| self.indicator[i]).collect(),
            centroid: self.centroid,
            scale: self.scale,
        }
    }
}

/// Multitask loss of the head on one example.
pub fn head_loss(g: &Graph, store: &ParamStore, head: &PoseHead, ex: &HeadExample, weights: LossWeights) -> Result<Var> {
    let out = head.forward(g, store, g.constant(ex.xyz.clone()), g.constant(ex.rgb.clone()))?;
    let l_kp = keypoint_loss(g, out.offsets, &ex.offsets, &ex.indicator)?;
    let l_sem = focal_loss(g, out.probs, &ex.labels, FocalParams::default())?;
    let l_ctr = center_loss(g, out.center, &ex.center, &ex.indicator)?;
    multitask_loss(g, l_kp, l_sem, l_ctr, weights)
}

/// Predicted camera-frame offsets `[N][M]` and class labels for an example.
pub fn predict_offsets(head: &PoseHead, store: &ParamStore, ex: &HeadExample) -> Result<(Vec<Vec<V3>>, Vec<usize>)> {
    let g = Graph::new();
    let out = head.forward(&g, store, g.constant(ex.xyz.clone()), g.constant(ex.rgb.clone()))?;
    let off = g.value(out.offsets);
    let probs = g.value(out.probs);
    let (n, m, c) = (off.shape()[0], off.shape()[1], probs.shape()[1]);
    let offsets = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| V3::from_fn(|a, _| off.data()[(i * m + j) * 3 + a] * ex.scale))
                .collect()
        })
        .collect();
    let labels = (0..n)
        .map(|i| (0..c).max_by(|&a, &b| probs.data()[i * c + a].total_cmp(&probs.data()[i * c + b])).unwrap_or(0))
        .collect();
    Ok((offsets, labels))
}

pub struct TrainedHead {
    pub head: PoseHead,
    pub store: ParamStore,
    /// Loss per step.
    pub losses: Vec<f64>,
}

/// Adam on the multitask loss, one example per step in order.
pub fn train_head(examples: &[HeadExample], config: HeadConfig, steps: usize, schedule: LrSchedule, seed: u64) -> Result<TrainedHead> {
    if examples.is_empty() {
        return Err(Error::Empty("head training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = PoseHead::new(&mut store, &mut rng, config)?;
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: schedule.lr_at(0),
            ..AdamConfig::default()
        },
    )?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let g = Graph::new();
        let loss = head_loss(&g, &store, &head, &examples[step % examples.len()], LossWeights::default())?;
        losses.push(g.scalar_value(loss)?);
        g.backward(loss)?;
        adam.set_lr(schedule.lr_at(step))?;
        let grads = g.param_grads(&store);
        adam.step(&mut store, &grads)?;
    }
    Ok(TrainedHead { head, store, losses })
}

/// Writes `head.json` plus the parameter tensors under `dir`.
pub fn save_head(dir: &Path, config: &HeadConfig, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::corrupt("head config", e.to_string()))?;
    let path = dir.join("head.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    io::save_params(store, dir.join("params"))?;
    Ok(())
}

pub fn load_head(dir: &Path) -> Result<(PoseHead, ParamStore)> {
    let path = dir.join("head.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: HeadConfig = serde_json::from_str(&text).map_err(|e| Error::corrupt("head config", e.to_string()))?;
    let mut store = ParamStore::new();
    let head = PoseHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), config)?;
    io::load_params_into(&mut store, dir.join("params"))?;
    Ok((head, store))
}
