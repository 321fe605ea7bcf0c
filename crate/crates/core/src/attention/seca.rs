use std::rc::Rc;

use numkernel::ops;
use numkernel::{Graph, ParamId, ParamStore, Var, ZERO_INDEX};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_uniform, Conv3d};

/// Adaptive 1-D kernel length for `c` channels: `t = ⌊(log₂c + 1)/2⌋`, bumped to odd.
pub fn eca_kernel_size(c: usize) -> usize {
    let t = (((c.max(1) as f64).log2() + 1.0) / 2.0).abs().floor() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: global average pool, 1-D convolution across
/// channels, sigmoid, per-channel rescaling.
#[derive(Clone, Debug)]
pub struct Eca {
    pub kernel: ParamId,
    pub k: usize,
}

impl Eca {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        let k = eca_kernel_size(channels);
        Self {
            kernel: init_uniform(store, rng, &format!("{name}.kernel"), &[k, 1], k),
            k,
        }
    }

    /// Per-channel scale factors `[C]`, each in `(0, 1)`.
    pub fn scales(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.is_empty() || s[0] == 0 {
            return Err(Error::InvalidArgument(format!("eca needs [C, ...] with C ≥ 1, got {s:?}")));
        }
        let c = s[0];
        let rest: usize = s[1..].iter().product();
        let flat = g.reshape(x, &[c, rest])?;
        let pooled = g.mean_axis(flat, 1)?;
        let half = (self.k / 2) as isize;
        let mut index = Vec::with_capacity(c * self.k);
        for ch in 0..c as isize {
            for j in 0..self.k as isize {
                let src = ch + j - half;
                index.push(if (0..c as isize).contains(&src) { src as usize } else { ZERO_INDEX });
            }
        }
        let windows = g.gather(pooled, Rc::new(index), &[c, self.k])?;
        let kernel = g.param(store, self.kernel);
        let y = g.matmul(windows, kernel)?;
        let y = g.reshape(y, &[c])?;
        Ok(g.sigmoid(y)?)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        let scales = self.scales(g, store, x)?;
        let mut bshape = vec![1; s.len()];
        bshape[0] = s[0];
        let scales = g.reshape(scales, &bshape)?;
        Ok(g.mul(x, scales)?)
    }
}

/// Spatial and efficient channel attention over `[C, D, H, W]` volumes.
///
/// `X_q`, `X_k`, `X_v` come from 3³, 5³ and 1³ same-padded convolutions with
/// ReLU. The softmax of `X_q ⊙ X_k` over all `D·H·W` positions (per channel)
/// weights `X_v`; the result is concatenated with the ECA branch, instance
/// normalized and fused by a 1³ convolution with ReLU.
#[derive(Clone, Debug)]
pub struct Seca {
    pub eca: Eca,
    pub q: Conv3d,
    pub k: Conv3d,
    pub v: Conv3d,
    pub fuse: Conv3d,
}

/// Intermediate tensors of one SECA evaluation.
pub struct SecaParts {
    pub x_eca: Var,
    pub weights: Var,
    pub x_attn: Var,
    pub out: Var,
}

impl Seca {
    /// `c_in` input channels, `c_out` output channels of the fusion convolution.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            eca: Eca::new(store, rng, &format!("{name}.eca"), c_in),
            q: Conv3d::same(store, rng, &format!("{name}.q"), c_in, c_in, 3),
            k: Conv3d::same(store, rng, &format!("{name}.k"), c_in, c_in, 5),
            v: Conv3d::same(store, rng, &format!("{name}.v"), c_in, c_in, 1),
            fuse: Conv3d::same(store, rng, &format!("{name}.fuse"), 2 * c_in, c_out, 1),
        }
    }

    pub fn parts(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<SecaParts> {
        let s = g.shape(x);
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!("seca needs [C,D,H,W], got {s:?}")));
        }
        let x_eca = self.eca.forward(g, store, x)?;
        let xq = g.relu(self.q.forward(g, store, x)?)?;
        let xk = g.relu(self.k.forward(g, store, x)?)?;
        let xv = g.relu(self.v.forward(g, store, x)?)?;
        let u = g.mul(xq, xk)?;
        let l: usize = s[1..].iter().product();
        let flat = g.reshape(u, &[s[0], l])?;
        let t = g.softmax(flat, 1)?;
        let weights = g.reshape(t, &s)?;
        let x_attn = g.mul(weights, xv)?;
        let cat = g.concat(&[x_attn, x_eca], 0)?;
        let normed = ops::instance_norm(g, cat)?;
        let out = g.relu(self.fuse.forward(g, store, normed)?)?;
        Ok(SecaParts {
            x_eca,
            weights,
            x_attn,
            out,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.parts(g, store, x)?.out)
    }
}
