use numkernel::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;

/// `softmax(QKᵀ/√d)·V` over `[n, d]` inputs.
pub fn vanilla_attention(g: &Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::InvalidArgument(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let scores = g.matmul(q, g.transpose(k)?)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = g.softmax(scores, 1)?;
    Ok(g.matmul(weights, v)?)
}

/// Single-head dot-product attention block with Q/K/V/output projections.
#[derive(Clone, Debug)]
pub struct VanillaAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl VanillaAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, false),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, false),
        }
    }

    /// Queries from `f_tgt`, keys and values from `f_src`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, f_src: Var, f_tgt: Var) -> Result<Var> {
        let q = self.wq.forward(g, store, f_tgt)?;
        let k = self.wk.forward(g, store, f_src)?;
        let v = self.wv.forward(g, store, f_src)?;
        let a = vanilla_attention(g, q, k, v)?;
        self.wo.forward(g, store, a)
    }
}
