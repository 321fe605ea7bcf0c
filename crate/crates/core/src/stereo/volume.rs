use std::rc::Rc;

use numkernel::ops::{self, ConvSpec};
use numkernel::{Graph, ParamId, ParamStore, Taps, Tensor, Var, ZERO_INDEX};
use rand::Rng;

use crate::attention::Seca;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Conv3d};

const COSINE_EPS: f64 = 1e-8;

/// Cosine-similarity cost volume `[G, D, H, W]` between `[C, H, W]` features.
///
/// Bin `d` compares left pixel `u` with right pixel `u − d`; lookups left of
/// the image are zero. Channels are split into `groups` contiguous groups,
/// each normalized separately.
pub fn correlation_volume(g: &Graph, f_left: Var, f_right: Var, d_max: usize, groups: usize) -> Result<Var> {
    let s = g.shape(f_left);
    if s != g.shape(f_right) || s.len() != 3 {
        return Err(Error::Mismatch(format!(
            "correlation features {:?} and {:?}",
            s,
            g.shape(f_right)
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if d_max == 0 || d_max > w {
        return Err(Error::InvalidArgument(format!("d_max {d_max} outside 1..={w}")));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!("{groups} groups do not divide {c} channels")));
    }
    let cg = c / groups;
    let normalize = |f: Var| -> Result<Var> {
        let grouped = g.reshape(f, &[groups, cg, h * w])?;
        let ss = g.sum_axis(g.square(grouped)?, 1)?;
        let norm = g.sqrt(g.add_scalar(ss, COSINE_EPS)?)?;
        let norm = g.reshape(norm, &[groups, 1, h * w])?;
        Ok(g.reshape(g.div(grouped, norm)?, &[c, 1, h, w])?)
    };
    let nl = normalize(f_left)?;
    let nr = normalize(f_right)?;
    let mut index = Vec::with_capacity(c * d_max * h * w);
    for ch in 0..c {
        for d in 0..d_max {
            for y in 0..h {
                for x in 0..w {
                    index.push(if x >= d { (ch * h + y) * w + x - d } else { ZERO_INDEX });
                }
            }
        }
    }
    let shifted = g.gather(nr, Rc::new(index), &[c, d_max, h, w])?;
    let prod = g.mul(shifted, nl)?;
    let prod = g.reshape(prod, &[groups, cg, d_max, h, w])?;
    Ok(g.sum_axis(prod, 1)?)
}

/// Transposed 3-D convolution doubling every extent, followed by ReLU.
#[derive(Clone, Debug)]
pub struct Up3d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Up3d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let fan_in = cin * 27 / 8;
        Self {
            weight: init_uniform(store, rng, &format!("{name}.weight"), &[cout, cin, 3, 3, 3], fan_in),
            bias: init_uniform(store, rng, &format!("{name}.bias"), &[cout], fan_in),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = ops::conv_transpose3d_x2(g, x, g.param(store, self.weight), Some(g.param(store, self.bias)))?;
        Ok(g.relu(y)?)
    }
}

/// Either SECA or a plain 1³ convolution with ReLU.
#[derive(Clone, Debug)]
pub enum Mixer {
    Seca(Seca),
    Plain(Conv3d),
}

impl Mixer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, seca: bool) -> Self {
        if seca {
            Mixer::Seca(Seca::new(store, rng, &format!("{name}.seca"), cin, cout))
        } else {
            Mixer::Plain(Conv3d::same(store, rng, &format!("{name}.mix"), cin, cout, 1))
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Mixer::Seca(s) => s.forward(g, store, x),
            Mixer::Plain(c) => Ok(g.relu(c.forward(g, store, x)?)?),
        }
    }
}

/// Encoder stage: stride-2 depthwise 3³ conv, pointwise conv, ReLU, then SECA.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub depthwise: Conv3d,
    pub pointwise: Conv3d,
    pub seca: Option<Seca>,
}

impl EncoderStage {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, seca: bool) -> Self {
        let spec = ConvSpec::same([3; 3]).with_stride([2; 3]).with_groups(cin);
        Self {
            depthwise: Conv3d::new(store, rng, &format!("{name}.dw"), cin, cin, [3; 3], spec, true),
            pointwise: Conv3d::same(store, rng, &format!("{name}.pw"), cin, cout, 1),
            seca: seca.then(|| Seca::new(store, rng, &format!("{name}.seca"), cout, cout)),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(g, store, x)?;
        let y = g.relu(self.pointwise.forward(g, store, y)?)?;
        match &self.seca {
            Some(s) => s.forward(g, store, y),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Up3d,
    pub mix: Mixer,
}

/// Three-level hourglass over the cost volume producing a 1-channel `C_G`.
#[derive(Clone, Debug)]
pub struct Regularizer {
    pub encoder: [EncoderStage; 3],
    /// Ordered coarse to fine.
    pub decoder: [DecoderStage; 3],
    pub head: Conv3d,
}

impl Regularizer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, groups: usize, c: usize, seca: bool) -> Self {
        let ch = [groups, c / 2, c, c];
        let encoder = [0, 1, 2].map(|i| EncoderStage::new(store, rng, &format!("{name}.enc{i}"), ch[i], ch[i + 1], seca));
        // Decoder level j upsamples to the resolution of skip ch[j].
        let out = [c / 2, c / 2, c];
        let decoder = [2, 1, 0].map(|j| {
            let cin = if j == 2 { ch[3] } else { out[j + 1] };
            let up = Up3d::new(store, rng, &format!("{name}.dec{j}.up"), cin, out[j]);
            let mix = Mixer::new(store, rng, &format!("{name}.dec{j}"), out[j] + ch[j], out[j], seca);
            DecoderStage { up, mix }
        });
        let head = Conv3d::same(store, rng, &format!("{name}.head"), out[0], 1, 1);
        Self { encoder, decoder, head }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, c_corr: Var) -> Result<Var> {
        let s = g.shape(c_corr);
        if s.len() != 4 || s[1..].iter().any(|&n| n == 0 || n % 8 != 0) {
            return Err(Error::InvalidArgument(format!("regularizer needs [G,D,H,W] with D,H,W multiples of 8, got {s:?}")));
        }
        let mut skips = vec![c_corr];
        let mut x = c_corr;
        for stage in &self.encoder {
            x = stage.forward(g, store, x)?;
            skips.push(x);
        }
        for (stage, skip) in self.decoder.iter().zip(skips[..3].iter().rev()) {
            let up = stage.up.forward(g, store, x)?;
            let cat = g.concat(&[up, *skip], 0)?;
            x = stage.mix.forward(g, store, cat)?;
        }
        self.head.forward(g, store, x)
    }
}

/// `d₀(u) = Σ_d d·softmax_d(C(0, d, u))` for a `[1, D, H, W]` volume; returns `[1, H, W]`.
pub fn soft_argmax(g: &Graph, volume: Var) -> Result<Var> {
    let s = g.shape(volume);
    if s.len() != 4 || s[0] != 1 || s[1] == 0 {
        return Err(Error::InvalidArgument(format!("soft_argmax needs [1,D,H,W], got {s:?}")));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    let flat = g.reshape(volume, &[d, h * w])?;
    let p = g.softmax(flat, 0)?;
    let bins = g.constant(Tensor::from_fn(&[1, d], |i| i as f64));
    let out = g.matmul(bins, p)?;
    Ok(g.reshape(out, &[1, h, w])?)
}

/// Linear-interpolation taps sampling `[C, D, H, W]` at `disp(u) + o` for
/// `o ∈ [−r, r]`, giving `[C·(2r+1), H, W]`. Samples outside `[0, D−1]` are zero.
pub fn lookup_taps(shape: &[usize], disp: &[f64], radius: usize) -> Taps {
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut taps = Taps::new();
    for ch in 0..c {
        for o in -(radius as isize)..=radius as isize {
            for p in 0..h * w {
                let pos = disp[p] + o as f64;
                if pos >= 0.0 && pos <= (d - 1) as f64 {
                    let i0 = pos.floor() as usize;
                    let f = pos - i0 as f64;
                    taps.push((ch * d + i0) * h * w + p, 1.0 - f);
                    if f > 0.0 {
                        taps.push((ch * d + i0 + 1) * h * w + p, f);
                    }
                }
                taps.end_row();
            }
        }
    }
    taps
}

/// Samples `volume` around `disp` (values of a `[1, H, W]` map).
pub fn lookup(g: &Graph, volume: Var, disp: &Tensor, radius: usize) -> Result<Var> {
    let s = g.shape(volume);
    if s.len() != 4 || disp.len() != s[2] * s[3] {
        return Err(Error::Mismatch(format!("lookup volume {s:?} vs disparity {:?}", disp.shape())));
    }
    let taps = lookup_taps(&s, disp.data(), radius);
    Ok(g.resample(volume, Rc::new(taps), &[s[0] * (2 * radius + 1), s[2], s[3]])?)
}
