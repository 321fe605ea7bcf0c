use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved intensities in `[0, 1]`, row-major, 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image with {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn at(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels + c]
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Channel-major `[C, H, W]` copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; w * h * c];
        for v in 0..h {
            for u in 0..w {
                for ch in 0..c {
                    out[(ch * h + v) * w + u] = self.data[(v * w + u) * c + ch];
                }
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for x in &mut self.data {
            *x = x.clamp(0.0, 1.0);
        }
    }
}

/// Image degradations. `angle_deg` is measured counter-clockwise from +u.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    None,
    Speckle { sigma: f64 },
    GaussianBlur { sigma: f64 },
    MotionBlur { length: f64, angle_deg: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseSpec::None => true,
            NoiseSpec::Speckle { sigma } | NoiseSpec::GaussianBlur { sigma } => sigma >= 0.0,
            NoiseSpec::MotionBlur { length, angle_deg } => length >= 1.0 && angle_deg.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("bad noise spec {self:?}")));
        }
        Ok(())
    }
}

/// Applies `spec` to `img`; deterministic given `(spec, seed)`. Output is clamped to `[0, 1]`.
pub fn degrade(img: &Image, spec: &NoiseSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut out = match *spec {
        NoiseSpec::None => img.clone(),
        NoiseSpec::Speckle { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = img.clone();
            let n_px = img.width * img.height;
            for p in 0..n_px {
                let n: f64 = StandardNormal.sample(&mut rng);
                for c in 0..img.channels {
                    out.data[p * img.channels + c] *= 1.0 + sigma * n;
                }
            }
            out
        }
        NoiseSpec::GaussianBlur { sigma } => gaussian_blur(img, sigma),
        NoiseSpec::MotionBlur { length, angle_deg } => {
            let kernel = motion_kernel(length, angle_deg);
            convolve_replicate(img, &kernel)
        }
    };
    out.clamp01();
    Ok(out)
}

/// Normalized 1-D Gaussian truncated at `3σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let horiz = Kernel2 {
        radius_u: r,
        radius_v: 0,
        weights: k.clone(),
    };
    let vert = Kernel2 {
        radius_u: 0,
        radius_v: r,
        weights: k,
    };
    convolve_replicate(&convolve_replicate(img, &horiz), &vert)
}

/// Dense odd-sized 2-D kernel, rows over `v`.
#[derive(Clone, Debug)]
pub struct Kernel2 {
    pub radius_u: isize,
    pub radius_v: isize,
    pub weights: Vec<f64>,
}

/// Line kernel of `length` pixels at `angle_deg`, built by bilinear splatting of
/// unit-spaced samples and normalized to sum 1.
pub fn motion_kernel(length: f64, angle_deg: f64) -> Kernel2 {
    let theta = angle_deg.to_radians();
    let (du, dv) = (theta.cos(), -theta.sin());
    let half = (length - 1.0) / 2.0;
    let r = half.ceil() as isize + 1;
    let side = (2 * r + 1) as usize;
    let mut w = vec![0.0; side * side];
    let samples = length.round().max(1.0) as usize;
    for s in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + (2.0 * half) * s as f64 / (samples - 1) as f64
        };
        let (x, y) = (t * du + r as f64, t * dv + r as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
            for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                if wx * wy > 0.0 {
                    w[yy as usize * side + xx as usize] += wx * wy;
                }
            }
        }
    }
    let s: f64 = w.iter().sum();
    Kernel2 {
        radius_u: r,
        radius_v: r,
        weights: w.into_iter().map(|x| x / s).collect(),
    }
}

/// Correlation with edge-replicate borders.
pub fn convolve_replicate(img: &Image, k: &Kernel2) -> Image {
    let (w, h, c) = (img.width as isize, img.height as isize, img.channels);
    let kw = 2 * k.radius_u + 1;
    let mut out = vec![0.0; img.data.len()];
    for v in 0..h {
        for u in 0..w {
            let o = ((v * w + u) as usize) * c;
            for dv in -k.radius_v..=k.radius_v {
                let sv = (v + dv).clamp(0, h - 1);
                for du in -k.radius_u..=k.radius_u {
                    let wt = k.weights[((dv + k.radius_v) * kw + du + k.radius_u) as usize];
                    if wt == 0.0 {
                        continue;
                    }
                    let su = (u + du).clamp(0, w - 1);
                    let s = ((sv * w + su) as usize) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * img.data[s + ch];
                    }
                }
            }
        }
    }
    Image {
        width: img.width,
        height: img.height,
        channels: c,
        data: out,
    }
}
