use numkernel::ops::{self, NORM_EPS};
use numkernel::{Graph, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_const, init_uniform, Linear};

/// How the normalized query `Q̂` is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryNorm {
    /// Row-wise L2 normalization.
    L2,
    /// Row-wise layer normalization without affine terms.
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcaaConfig {
    /// Softmax-normalize the token weights `g` before pooling.
    pub softmax_weights: bool,
    pub query_norm: QueryNorm,
}

impl Default for EcaaConfig {
    fn default() -> Self {
        Self {
            softmax_weights: true,
            query_norm: QueryNorm::L2,
        }
    }
}

const L2_EPS: f64 = 1e-12;

/// Additive cross-modal attention with linear cost in the token count.
#[derive(Clone, Debug)]
pub struct Ecaa {
    pub wq: ParamId,
    pub wk: ParamId,
    pub lg: ParamId,
    /// Linear map `T`, shared with the GFFN input of the same direction.
    pub t: Linear,
    pub d: usize,
    pub config: EcaaConfig,
}

/// Intermediate tensors of one ECAA evaluation.
pub struct EcaaParts {
    pub q: Var,
    pub k: Var,
    /// Token weights `[n, 1]`.
    pub g: Var,
    /// Global query `[1, d]`.
    pub q_global: Var,
    pub out: Var,
}

impl Ecaa {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, config: EcaaConfig) -> Self {
        Self {
            wq: init_uniform(store, rng, &format!("{name}.wq"), &[d, d], d),
            wk: init_uniform(store, rng, &format!("{name}.wk"), &[d, d], d),
            lg: init_uniform(store, rng, &format!("{name}.lg"), &[d, 1], d),
            t: Linear::new(store, rng, &format!("{name}.t"), d, d, true),
            d,
            config,
        }
    }

    /// `F_src` supplies keys, `F_tgt` queries; both `[n, d]`.
    pub fn parts(&self, g: &Graph, store: &ParamStore, f_src: Var, f_tgt: Var) -> Result<EcaaParts> {
        let (ss, ts) = (g.shape(f_src), g.shape(f_tgt));
        if ss != ts || ss.len() != 2 || ss[1] != self.d {
            return Err(Error::InvalidArgument(format!(
                "ecaa needs matching [n, {}] inputs, got {ss:?} and {ts:?}",
                self.d
            )));
        }
        if ss[0] == 0 {
            return Err(Error::Empty("ecaa token sequence"));
        }
        let n = ss[0];
        let q = g.matmul(f_tgt, g.param(store, self.wq))?;
        let k = g.matmul(f_src, g.param(store, self.wk))?;
        let logits = g.matmul(q, g.param(store, self.lg))?;
        let logits = g.scale(logits, 1.0 / (self.d as f64).sqrt())?;
        let weights = if self.config.softmax_weights {
            g.softmax(logits, 0)?
        } else {
            logits
        };
        let wt = g.reshape(weights, &[1, n])?;
        let q_global = g.matmul(wt, q)?;
        let kq = g.mul(k, q_global)?;
        let tkq = self.t.forward(g, store, kq)?;
        let q_hat = match self.config.query_norm {
            QueryNorm::L2 => ops::l2_normalize_rows(g, q, L2_EPS)?,
            QueryNorm::LayerNorm => g.layer_norm(q, 1, NORM_EPS)?,
        };
        let out = g.add(q_hat, tkq)?;
        Ok(EcaaParts {
            q,
            k,
            g: weights,
            q_global,
            out,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, f_src: Var, f_tgt: Var) -> Result<Var> {
        Ok(self.parts(g, store, f_src, f_tgt)?.out)
    }
}

/// Gated feed-forward network: `LN(W·(SiLU(cat·U) ⊙ cat·V))` with
/// `cat = [T(x̂) ‖ F]` and an affine layer norm.
#[derive(Clone, Debug)]
pub struct Gffn {
    pub u: Linear,
    pub v: Linear,
    pub w: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl Gffn {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            u: Linear::new(store, rng, &format!("{name}.u"), 2 * d, hidden, true),
            v: Linear::new(store, rng, &format!("{name}.v"), 2 * d, hidden, true),
            w: Linear::new(store, rng, &format!("{name}.w"), hidden, d, true),
            ln_gain: init_const(store, &format!("{name}.ln_gain"), &[d], 1.0),
            ln_bias: init_const(store, &format!("{name}.ln_bias"), &[d], 0.0),
        }
    }

    /// `t` is the direction's shared linear map applied to `x_hat`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x_hat: Var, f_res: Var, t: &Linear) -> Result<Var> {
        if g.shape(x_hat) != g.shape(f_res) {
            return Err(Error::InvalidArgument(format!(
                "gffn inputs {:?} and {:?} differ",
                g.shape(x_hat),
                g.shape(f_res)
            )));
        }
        let tx = t.forward(g, store, x_hat)?;
        let cat = g.concat(&[tx, f_res], 1)?;
        let gate = g.silu(self.u.forward(g, store, cat)?)?;
        let lin = self.v.forward(g, store, cat)?;
        let y = self.w.forward(g, store, g.mul(gate, lin)?)?;
        let y = g.layer_norm(y, 1, NORM_EPS)?;
        let y = g.mul(y, g.param(store, self.ln_gain))?;
        Ok(g.add(y, g.param(store, self.ln_bias))?)
    }
}

/// Augmented shortcut `LN(F·W + b)`, layer norm without affine terms.
#[derive(Clone, Debug)]
pub struct AugSc {
    pub linear: Linear,
}

impl AugSc {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, name, d, d, true),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let y = self.linear.forward(g, store, f)?;
        Ok(g.layer_norm(y, 1, NORM_EPS)?)
    }
}

/// Which modalities receive cross-modal attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDirections {
    /// Point features attend to RGB keys (enriches the point stream).
    pub rgb_to_point: bool,
    /// RGB features attend to point keys (enriches the RGB stream).
    pub point_to_rgb: bool,
}

impl FusionDirections {
    pub const BOTH: Self = Self {
        rgb_to_point: true,
        point_to_rgb: true,
    };

    /// The three ablation settings: RGB→Point, Point→RGB, bidirectional.
    pub fn ablations() -> [(&'static str, FusionDirections); 3] {
        [
            (
                "rgb_to_point",
                Self {
                    rgb_to_point: true,
                    point_to_rgb: false,
                },
            ),
            (
                "point_to_rgb",
                Self {
                    rgb_to_point: false,
                    point_to_rgb: true,
                },
            ),
            ("bidirectional", Self::BOTH),
        ]
    }
}

/// One fusion direction: attention plus gated refinement.
#[derive(Clone, Debug)]
pub struct FusionBranch {
    pub ecaa: Ecaa,
    pub gffn: Gffn,
}

impl FusionBranch {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, config: EcaaConfig) -> Self {
        Self {
            ecaa: Ecaa::new(store, rng, &format!("{name}.ecaa"), d, config),
            gffn: Gffn::new(store, rng, &format!("{name}.gffn"), d, 2 * d),
        }
    }

    /// `M̂` for the `target` modality given the `source` modality.
    pub fn forward(&self, g: &Graph, store: &ParamStore, source: Var, target: Var) -> Result<Var> {
        let x_hat = self.ecaa.forward(g, store, source, target)?;
        self.gffn.forward(g, store, x_hat, target, &self.ecaa.t)
    }
}

/// Bidirectional cross-modal fusion of point features `F_p` and RGB features `F_r`.
#[derive(Clone, Debug)]
pub struct Ecft {
    pub directions: FusionDirections,
    pub to_point: Option<FusionBranch>,
    pub to_rgb: Option<FusionBranch>,
    pub shortcut_p: AugSc,
    pub shortcut_r: AugSc,
}

impl Ecft {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        directions: FusionDirections,
        config: EcaaConfig,
    ) -> Result<Self> {
        if !directions.rgb_to_point && !directions.point_to_rgb {
            return Err(Error::InvalidArgument("ecft needs at least one fusion direction".into()));
        }
        Ok(Self {
            directions,
            to_point: directions
                .rgb_to_point
                .then(|| FusionBranch::new(store, rng, &format!("{name}.rgb_to_point"), d, config)),
            to_rgb: directions
                .point_to_rgb
                .then(|| FusionBranch::new(store, rng, &format!("{name}.point_to_rgb"), d, config)),
            shortcut_p: AugSc::new(store, rng, &format!("{name}.augsc_p"), d),
            shortcut_r: AugSc::new(store, rng, &format!("{name}.augsc_r"), d),
        })
    }

    /// Returns `(F_p^fusion, F_r^fusion)`, each `AugSC(F) + F (+ M̂)`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, f_p: Var, f_r: Var) -> Result<(Var, Var)> {
        let mut out_p = g.add(self.shortcut_p.forward(g, store, f_p)?, f_p)?;
        let mut out_r = g.add(self.shortcut_r.forward(g, store, f_r)?, f_r)?;
        if let Some(b) = &self.to_point {
            out_p = g.add(out_p, b.forward(g, store, f_r, f_p)?)?;
        }
        if let Some(b) = &self.to_rgb {
            out_r = g.add(out_r, b.forward(g, store, f_p, f_r)?)?;
        }
        Ok((out_p, out_r))
    }
}
