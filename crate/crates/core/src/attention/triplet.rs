use numkernel::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{unsqueeze, Conv2d};

/// Branch convolution size.
pub const TA_KERNEL: usize = 7;

/// Stacks `[max, mean]` over `axis`, which becomes an axis of extent 2.
pub fn zpool(g: &Graph, x: Var, axis: usize) -> Result<Var> {
    let max = g.max_axis(x, axis)?;
    let mean = g.mean_axis(x, axis)?;
    let max = unsqueeze(g, max, axis)?;
    let mean = unsqueeze(g, mean, axis)?;
    Ok(g.concat(&[max, mean], axis)?)
}

/// Three-branch attention over the (C,H), (C,W) and (H,W) subspaces of a
/// `[C, H, W]` map. Each branch pools the remaining axis with [`zpool`],
/// convolves the 2-channel summary to one gate map and rescales the input.
#[derive(Clone, Debug)]
pub struct TripletAttention {
    pub branches: [Conv2d; 3],
}

impl TripletAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut R, b: &str| {
            Conv2d::new(store, rng, &format!("{name}.{b}"), 2, 1, TA_KERNEL, 1)
        };
        Self {
            branches: [mk(store, rng, "ch"), mk(store, rng, "cw"), mk(store, rng, "hw")],
        }
    }

    /// Gate maps of the three branches, each broadcastable against `[C, H, W]`.
    pub fn gates(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<[Var; 3]> {
        let s = g.shape(x);
        if s.len() != 3 {
            return Err(Error::InvalidArgument(format!("triplet attention needs [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        // (C,H): pool W, gate is [C, H, 1].
        let p = zpool(g, x, 2)?;
        let p = g.permute(p, &[2, 0, 1])?;
        let a = self.branches[0].forward(g, store, p)?;
        let a = g.reshape(g.sigmoid(a)?, &[c, h, 1])?;
        // (C,W): pool H, gate is [C, 1, W].
        let p = zpool(g, x, 1)?;
        let p = g.permute(p, &[1, 0, 2])?;
        let b = self.branches[1].forward(g, store, p)?;
        let b = g.reshape(g.sigmoid(b)?, &[c, 1, w])?;
        // (H,W): pool C, gate is [1, H, W].
        let p = zpool(g, x, 0)?;
        let cgate = self.branches[2].forward(g, store, p)?;
        let cgate = g.sigmoid(cgate)?;
        Ok([a, b, cgate])
    }

    /// `(y₁ + y₂ + y₃)/3` with `yᵢ = gateᵢ ⊙ x`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gates = self.gates(g, store, x)?;
        let y1 = g.mul(x, gates[0])?;
        let y2 = g.mul(x, gates[1])?;
        let y3 = g.mul(x, gates[2])?;
        let s = g.add(g.add(y1, y2)?, y3)?;
        Ok(g.scale(s, 1.0 / 3.0)?)
    }
}
