use numkernel::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Gate activations of one GRU step.
pub struct GruGates {
    pub z: Var,
    pub r: Var,
    pub q: Var,
}

/// Precomputed context terms added to the z, r and q pre-activations.
#[derive(Clone, Copy)]
pub struct ContextInjection {
    pub cz: Var,
    pub cr: Var,
    pub cq: Var,
}

/// Convolutional GRU with 3×3 gates.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub convz: Conv2d,
    pub convr: Conv2d,
    pub convq: Conv2d,
    pub hidden: usize,
}

impl ConvGru {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, hidden: usize, input: usize) -> Self {
        Self {
            convz: Conv2d::new(store, rng, &format!("{name}.convz"), hidden + input, hidden, 3, 1),
            convr: Conv2d::new(store, rng, &format!("{name}.convr"), hidden + input, hidden, 3, 1),
            convq: Conv2d::new(store, rng, &format!("{name}.convq"), hidden + input, hidden, 3, 1),
            hidden,
        }
    }

    pub fn gates(&self, g: &Graph, store: &ParamStore, h: Var, x: Var, ctx: &ContextInjection) -> Result<GruGates> {
        let (hs, xs) = (g.shape(h), g.shape(x));
        if hs.len() != 3 || xs.len() != 3 || hs[0] != self.hidden || hs[1..] != xs[1..] {
            return Err(Error::Mismatch(format!("gru hidden {hs:?} vs input {xs:?}")));
        }
        let hx = g.concat(&[h, x], 0)?;
        let z = g.sigmoid(g.add(self.convz.forward(g, store, hx)?, ctx.cz)?)?;
        let r = g.sigmoid(g.add(self.convr.forward(g, store, hx)?, ctx.cr)?)?;
        let rhx = g.concat(&[g.mul(r, h)?, x], 0)?;
        let q = g.tanh(g.add(self.convq.forward(g, store, rhx)?, ctx.cq)?)?;
        Ok(GruGates { z, r, q })
    }

    /// `h' = (1 − z)·h + z·q`.
    pub fn update(&self, g: &Graph, h: Var, gates: &GruGates) -> Result<Var> {
        let keep = g.mul(h, g.add_scalar(g.neg(gates.z)?, 1.0)?)?;
        Ok(g.add(keep, g.mul(gates.z, gates.q)?)?)
    }

    pub fn step(&self, g: &Graph, store: &ParamStore, h: Var, x: Var, ctx: &ContextInjection) -> Result<Var> {
        let gates = self.gates(g, store, h, x, ctx)?;
        self.update(g, h, &gates)
    }
}
