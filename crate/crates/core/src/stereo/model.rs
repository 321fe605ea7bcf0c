use numkernel::ops;
use numkernel::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::config::TscaConfig;
use super::features::{ContextNet, FeatureNet};
use super::gru::{ContextInjection, ConvGru};
use super::volume::{correlation_volume, lookup, soft_argmax, Regularizer};
use crate::error::{Error, Result};
use crate::geometry::DisparityMap;
use crate::nn::Conv2d;

/// TSCA stereo network at a configurable scale.
#[derive(Clone, Debug)]
pub struct Tsca {
    pub config: TscaConfig,
    pub feature: FeatureNet,
    pub context: ContextNet,
    pub regularizer: Regularizer,
    /// Per scale, `c → 4c`: initial hidden state and the z, r, q injections.
    pub inject: [Conv2d; 3],
    pub motion: Conv2d,
    /// Finest to coarsest.
    pub grus: [ConvGru; 3],
    pub head: [Conv2d; 2],
}

/// Graph handles and recorded values of one forward pass.
pub struct TscaOutput {
    /// `K + 1` disparity maps `[H, W]` at input resolution, initial estimate first.
    pub iterates: Vec<Var>,
    /// The same iterates at 1/4 resolution, `[1, H/4, W/4]`.
    pub coarse: Vec<Var>,
    /// Detached disparity each update started from.
    pub detached: Vec<Tensor>,
    pub c_corr: Var,
    pub c_g: Var,
    pub hidden: [Var; 3],
}

impl Tsca {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: TscaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let lookup_ch = (1 + config.groups) * (2 * config.radius + 1);
        let inject = [0, 1, 2].map(|i| Conv2d::new(store, rng, &format!("update.inject{i}"), c, 4 * c, 3, 1));
        let grus = [
            ConvGru::new(store, rng, "update.gru0", c, 2 * c + 1),
            ConvGru::new(store, rng, "update.gru1", c, 2 * c),
            ConvGru::new(store, rng, "update.gru2", c, c),
        ];
        Ok(Self {
            feature: FeatureNet::new(store, rng, "feature", c),
            context: ContextNet::new(store, rng, "context", c, config.triplet),
            regularizer: Regularizer::new(store, rng, "regularizer", config.groups, c, config.seca),
            inject,
            motion: Conv2d::new(store, rng, "update.motion", lookup_ch + 1, c, 3, 1),
            grus,
            head: [
                Conv2d::new(store, rng, "update.head0", c, c, 3, 1),
                Conv2d::new(store, rng, "update.head1", c, 1, 3, 1),
            ],
            config,
        })
    }

    fn check_image(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s != [3, self.config.height, self.config.width] {
            return Err(Error::Mismatch(format!(
                "expected [3, {}, {}] image, got {s:?}",
                self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    /// Runs the full network on `[3, H, W]` images with values in `[0, 1]`.
    ///
    /// With `replay`, each update starts from the given detached disparity
    /// instead of the current estimate, which makes the graph a fixed
    /// differentiable function for gradient checking.
    pub fn forward(&self, g: &Graph, store: &ParamStore, left: Var, right: Var, replay: Option<&[Tensor]>) -> Result<TscaOutput> {
        self.check_image(g, left)?;
        self.check_image(g, right)?;
        let cfg = &self.config;
        if let Some(r) = replay {
            if r.len() != cfg.iters {
                return Err(Error::Mismatch(format!("replay has {} entries for {} iterations", r.len(), cfg.iters)));
            }
        }
        let norm = |x: Var| -> Result<Var> { Ok(g.add_scalar(g.scale(x, 2.0)?, -1.0)?) };
        let (left, right) = (norm(left)?, norm(right)?);
        let fl = self.feature.forward(g, store, left)?;
        let fr = self.feature.forward(g, store, right)?;
        let ctx = self.context.forward(g, store, left)?;
        let c_corr = correlation_volume(g, fl, fr, cfg.d_max, cfg.groups)?;
        let c_g = self.regularizer.forward(g, store, c_corr)?;
        let mut d = soft_argmax(g, c_g)?;

        let c = cfg.channels;
        let mut hidden = [ctx[0]; 3];
        let mut injections = Vec::with_capacity(3);
        for i in 0..3 {
            let all = self.inject[i].forward(g, store, ctx[i])?;
            hidden[i] = g.tanh(g.slice(all, 0, 0, c)?)?;
            injections.push(ContextInjection {
                cz: g.slice(all, 0, c, c)?,
                cr: g.slice(all, 0, 2 * c, c)?,
                cq: g.slice(all, 0, 3 * c, c)?,
            });
        }

        let (h4, w4) = cfg.feature_dims();
        let upsample = |d: Var| -> Result<Var> {
            let up = ops::resize_bilinear(g, d, cfg.height, cfg.width)?;
            Ok(g.reshape(g.scale(up, 4.0)?, &[cfg.height, cfg.width])?)
        };
        let mut coarse = vec![d];
        let mut iterates = vec![upsample(d)?];
        let mut detached = Vec::with_capacity(cfg.iters);
        let d_top = (cfg.d_max - 1) as f64;
        for k in 0..cfg.iters {
            let base = match replay {
                Some(r) => r[k].clone(),
                None => (*g.value(d)).clone(),
            };
            let pooled1 = ops::avg_pool2(g, hidden[1])?;
            hidden[2] = self.grus[2].step(g, store, hidden[2], pooled1, &injections[2])?;
            let up2 = ops::resize_bilinear(g, hidden[2], h4 / 2, w4 / 2)?;
            let pooled0 = ops::avg_pool2(g, hidden[0])?;
            let in1 = g.concat(&[pooled0, up2], 0)?;
            hidden[1] = self.grus[1].step(g, store, hidden[1], in1, &injections[1])?;

            let d_const = g.constant(base.clone());
            let look_g = lookup(g, c_g, &base, cfg.radius)?;
            let look_c = lookup(g, c_corr, &base, cfg.radius)?;
            let d_in = g.scale(d_const, 1.0 / cfg.d_max as f64)?;
            let motion = g.relu(self.motion.forward(g, store, g.concat(&[look_g, look_c, d_in], 0)?)?)?;
            let up1 = ops::resize_bilinear(g, hidden[1], h4, w4)?;
            let in0 = g.concat(&[motion, d_in, up1], 0)?;
            hidden[0] = self.grus[0].step(g, store, hidden[0], in0, &injections[0])?;

            let delta = g.relu(self.head[0].forward(g, store, hidden[0])?)?;
            let delta = self.head[1].forward(g, store, delta)?;
            d = g.clamp(g.add(d_const, delta)?, 0.0, d_top)?;
            detached.push(base);
            coarse.push(d);
            iterates.push(upsample(d)?);
        }
        Ok(TscaOutput {
            iterates,
            coarse,
            detached,
            c_corr,
            c_g,
            hidden,
        })
    }

    /// Forward pass on plain tensors, returning the final disparity map.
    pub fn predict(&self, store: &ParamStore, left: &Tensor, right: &Tensor) -> Result<DisparityMap> {
        let g = Graph::new();
        let out = self.forward(&g, store, g.constant(left.clone()), g.constant(right.clone()), None)?;
        let last = g.value(*out.iterates.last().expect("at least one iterate"));
        DisparityMap::from_values(self.config.width, self.config.height, last.data().to_vec())
    }
}

/// `Σ_k γ^(n−1−k) · mean_valid |d_k − D_gt|` over `n` iterates.
///
/// Pixels count when valid in `gt` and, if given, set in `mask`.
pub fn sequence_loss(g: &Graph, iterates: &[Var], gt: &DisparityMap, mask: Option<&[bool]>, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if iterates.is_empty() {
        return Err(Error::Empty("sequence of disparity iterates"));
    }
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(Error::Mismatch(format!("mask of {} for {} pixels", m.len(), gt.len())));
        }
    }
    let sel: Vec<bool> = (0..gt.len()).map(|i| gt.valid[i] && mask.is_none_or(|m| m[i])).collect();
    let count = sel.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Empty("valid pixels for sequence loss"));
    }
    let shape = [gt.height, gt.width];
    let target = g.constant(Tensor::new(&shape, (0..gt.len()).map(|i| if sel[i] { gt.values[i] } else { 0.0 }).collect())?);
    let weights = g.constant(Tensor::new(&shape, sel.iter().map(|&s| if s { 1.0 / count as f64 } else { 0.0 }).collect())?);
    let n = iterates.len();
    let mut total: Option<Var> = None;
    for (k, &d) in iterates.iter().enumerate() {
        if g.shape(d) != shape {
            return Err(Error::Mismatch(format!("iterate {:?} vs ground truth {shape:?}", g.shape(d))));
        }
        let err = g.mul(g.abs(g.sub(d, target)?)?, weights)?;
        let term = g.scale(g.sum(err)?, gamma.powi((n - 1 - k) as i32))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty iterates"))
}
