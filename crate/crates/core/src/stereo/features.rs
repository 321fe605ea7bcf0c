use numkernel::{Graph, ParamStore, Var};
use rand::Rng;

use crate::attention::TripletAttention;
use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Four 3×3 convolutions with strides 2, 1, 2, 1: `[3, H, W]` → `[c, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub convs: [Conv2d; 4],
}

impl FeatureNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        Self {
            convs: [
                Conv2d::new(store, rng, &format!("{name}.conv0"), 3, c, 3, 2),
                Conv2d::new(store, rng, &format!("{name}.conv1"), c, c, 3, 1),
                Conv2d::new(store, rng, &format!("{name}.conv2"), c, c, 3, 2),
                Conv2d::new(store, rng, &format!("{name}.conv3"), c, c, 3, 1),
            ],
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, store, x)?;
            if i + 1 < self.convs.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// `relu(x + conv(relu(conv(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl ResBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        Self {
            a: Conv2d::new(store, rng, &format!("{name}.a"), c, c, 3, 1),
            b: Conv2d::new(store, rng, &format!("{name}.b"), c, c, 3, 1),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.relu(self.a.forward(g, store, x)?)?;
        let y = self.b.forward(g, store, y)?;
        Ok(g.relu(g.add(x, y)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContextLevel {
    pub down: Conv2d,
    pub res: ResBlock,
    pub ta: Option<TripletAttention>,
}

/// Multi-scale context pyramid with optional triplet attention refinement.
#[derive(Clone, Debug)]
pub struct ContextNet {
    pub stem: Conv2d,
    pub levels: [ContextLevel; 3],
}

impl ContextNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize, triplet: bool) -> Self {
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), 3, c, 3, 2);
        let levels = [0, 1, 2].map(|i| ContextLevel {
            down: Conv2d::new(store, rng, &format!("{name}.level{i}.down"), c, c, 3, 2),
            res: ResBlock::new(store, rng, &format!("{name}.level{i}.res"), c),
            ta: triplet.then(|| TripletAttention::new(store, rng, &format!("{name}.level{i}.ta"))),
        });
        Self { stem, levels }
    }

    /// `[T₁, T₂, T₃]` at 1/4, 1/8 and 1/16 of the input resolution.
    pub fn forward(&self, g: &Graph, store: &ParamStore, image: Var) -> Result<[Var; 3]> {
        let s = g.shape(image);
        if s.len() != 3 || !s[1].is_multiple_of(16) || !s[2].is_multiple_of(16) || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidArgument(format!("context net needs [C,H,W] with H, W multiples of 16, got {s:?}")));
        }
        let mut x = g.relu(self.stem.forward(g, store, image)?)?;
        let mut out = [x; 3];
        for (i, level) in self.levels.iter().enumerate() {
            x = g.relu(level.down.forward(g, store, x)?)?;
            x = level.res.forward(g, store, x)?;
            if let Some(ta) = &level.ta {
                x = ta.forward(g, store, x)?;
            }
            out[i] = x;
        }
        Ok(out)
    }
}
