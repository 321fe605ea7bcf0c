//! Composite differentiable operations built from graph primitives.
//!
//! Convolution unfolds input patches with a gather and multiplies by the
//! reshaped kernel, so its gradient comes from the gather and matmul rules.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Taps, Var, ZERO_INDEX};

/// Normalization epsilon shared by layer and instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Stride, symmetric zero padding and group count of a 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves extents for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1; 3],
            pad: kernel.map(|k| k / 2),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} larger than padded extent {padded} (stride {stride})"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Patch-unfolding indices for channels `c0..c0+cin` of a `[C, D, H, W]` input.
/// Rows are `(channel, kz, ky, kx)`, columns are output positions.
fn unfold_index(
    dims: [usize; 3],
    c0: usize,
    cin: usize,
    k: [usize; 3],
    spec: &ConvSpec,
    out: [usize; 3],
) -> Vec<usize> {
    let [d, h, w] = dims;
    let cols = out[0] * out[1] * out[2];
    let mut index = Vec::with_capacity(cin * k[0] * k[1] * k[2] * cols);
    for c in c0..c0 + cin {
        for kz in 0..k[0] {
            for ky in 0..k[1] {
                for kx in 0..k[2] {
                    for oz in 0..out[0] {
                        let z = (oz * spec.stride[0] + kz) as isize - spec.pad[0] as isize;
                        for oy in 0..out[1] {
                            let y = (oy * spec.stride[1] + ky) as isize - spec.pad[1] as isize;
                            for ox in 0..out[2] {
                                let x = (ox * spec.stride[2] + kx) as isize - spec.pad[2] as isize;
                                let inside = z >= 0
                                    && y >= 0
                                    && x >= 0
                                    && (z as usize) < d
                                    && (y as usize) < h
                                    && (x as usize) < w;
                                index.push(if inside {
                                    ((c * d + z as usize) * h + y as usize) * w + x as usize
                                } else {
                                    ZERO_INDEX
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    index
}

/// Cross-correlation of `x: [C_in, D, H, W]` with `kernel: [C_out, C_in/groups, kd, kh, kw]`,
/// plus an optional per-output-channel `bias: [C_out]`.
pub fn conv3d(g: &Graph, x: Var, kernel: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
    let xs = g.shape(x);
    let ks = g.shape(kernel);
    if xs.len() != 4 || ks.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            lhs: xs,
            rhs: ks,
        });
    }
    let (cin, cout, groups) = (xs[0], ks[0], spec.groups);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || ks[1] != cin / groups {
        return Err(Error::ShapeMismatch {
            op: "conv3d groups",
            lhs: xs,
            rhs: ks,
        });
    }
    let k = [ks[2], ks[3], ks[4]];
    let dims = [xs[1], xs[2], xs[3]];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = out_extent(dims[a], k[a], spec.stride[a], spec.pad[a])?;
    }
    let cols = out[0] * out[1] * out[2];
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let rows = cin_g * k[0] * k[1] * k[2];
    let kmat = g.reshape(kernel, &[cout, rows])?;

    let mut parts = Vec::with_capacity(groups);
    for gi in 0..groups {
        let index = unfold_index(dims, gi * cin_g, cin_g, k, spec, out);
        let patches = g.gather(x, Rc::new(index), &[rows, cols])?;
        let kg = if groups == 1 {
            kmat
        } else {
            g.slice(kmat, 0, gi * cout_g, cout_g)?
        };
        parts.push(g.matmul(kg, patches)?);
    }
    let y = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 0)?
    };
    let y = g.reshape(y, &[cout, out[0], out[1], out[2]])?;
    match bias {
        Some(b) => {
            let b = g.reshape(b, &[cout, 1, 1, 1])?;
            g.add(y, b)
        }
        None => Ok(y),
    }
}

/// 2-D convolution of `x: [C_in, H, W]` with `kernel: [C_out, C_in/groups, kh, kw]`.
pub fn conv2d(
    g: &Graph,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let xs = g.shape(x);
    let ks = g.shape(kernel);
    if xs.len() != 3 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ks,
        });
    }
    let x4 = g.reshape(x, &[xs[0], 1, xs[1], xs[2]])?;
    let k5 = g.reshape(kernel, &[ks[0], ks[1], 1, ks[2], ks[3]])?;
    let spec = ConvSpec {
        stride: [1, stride, stride],
        pad: [0, pad, pad],
        groups,
    };
    let y = conv3d(g, x4, k5, bias, &spec)?;
    let ys = g.shape(y);
    g.reshape(y, &[ys[0], ys[2], ys[3]])
}

/// Doubles every spatial extent of `x: [C, D, H, W]` by zero insertion and
/// convolves with an odd `kernel: [C_out, C_in, k, k, k]`. This is a stride-2
/// transposed convolution with the kernel indexed in correlation order.
pub fn conv_transpose3d_x2(g: &Graph, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let xs = g.shape(x);
    let ks = g.shape(kernel);
    if xs.len() != 4 || ks.len() != 5 || ks[2].is_multiple_of(2) {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose3d_x2",
            lhs: xs,
            rhs: ks,
        });
    }
    let (c, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut index = Vec::with_capacity(c * d2 * h2 * w2);
    for ci in 0..c {
        for z in 0..d2 {
            for y in 0..h2 {
                for x_ in 0..w2 {
                    index.push(if z % 2 == 0 && y % 2 == 0 && x_ % 2 == 0 {
                        ((ci * d + z / 2) * h + y / 2) * w + x_ / 2
                    } else {
                        ZERO_INDEX
                    });
                }
            }
        }
    }
    let dilated = g.gather(x, Rc::new(index), &[c, d2, h2, w2])?;
    conv3d(g, dilated, kernel, bias, &ConvSpec::same([ks[2], ks[3], ks[4]]))
}

/// Per-channel normalization of `x: [C, ...]` over all remaining axes.
pub fn instance_norm(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    if shape.is_empty() {
        return Err(Error::InvalidArgument("instance_norm of a scalar".into()));
    }
    let rest: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[shape[0], rest])?;
    let normed = g.layer_norm(flat, 1, NORM_EPS)?;
    g.reshape(normed, &shape)
}

/// `x · w + b` for token matrix `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
pub fn linear(g: &Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Row-wise L2 normalization of a `[n, d]` matrix: `x / sqrt(Σx² + eps)`.
pub fn l2_normalize_rows(g: &Graph, x: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "l2_normalize_rows needs rank 2, got {shape:?}"
        )));
    }
    let sq = g.square(x)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.add_scalar(ss, eps)?;
    let norm = g.sqrt(ss)?;
    let norm = g.reshape(norm, &[shape[0], 1])?;
    g.div(x, norm)
}

/// Bilinear resize taps (half-pixel centers, edge clamp) for `[C, H, W]` to `[C, oh, ow]`.
pub fn bilinear_taps(c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Taps {
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut taps = Taps::new();
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = axis(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = axis(ox, w, ow);
                let base = ci * h * w;
                for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wt = wy * wx;
                        if wt != 0.0 {
                            taps.push(base + y * w + x, wt);
                        }
                    }
                }
                taps.end_row();
            }
        }
    }
    taps
}

/// 2×2 average-pool taps for `[C, H, W]` with even `H`, `W`.
pub fn avg_pool2_taps(c: usize, h: usize, w: usize) -> Taps {
    let mut taps = Taps::new();
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    taps.push(ci * h * w + (2 * oy + dy) * w + 2 * ox + dx, 0.25);
                }
                taps.end_row();
            }
        }
    }
    taps
}

/// Bilinear resize of `x: [C, H, W]` to `[C, oh, ow]`.
pub fn resize_bilinear(g: &Graph, x: Var, oh: usize, ow: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("resize needs [C,H,W], got {s:?}")));
    }
    g.resample(x, Rc::new(bilinear_taps(s[0], s[1], s[2], oh, ow)), &[s[0], oh, ow])
}

/// 2×2 average pooling of `x: [C, H, W]`.
pub fn avg_pool2(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("avg_pool2 needs even [C,H,W], got {s:?}")));
    }
    g.resample(x, Rc::new(avg_pool2_taps(s[0], s[1], s[2])), &[s[0], s[1] / 2, s[2] / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation used as the oracle.
    pub(crate) fn naive_conv3d(x: &Tensor, k: &Tensor, spec: &ConvSpec) -> Tensor {
        let (xs, ks) = (x.shape(), k.shape());
        let (cin, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g) = (ks[0], ks[1]);
        let cout_g = cout / spec.groups;
        let od = (d + 2 * spec.pad[0] - ks[2]) / spec.stride[0] + 1;
        let oh = (h + 2 * spec.pad[1] - ks[3]) / spec.stride[1] + 1;
        let ow = (w + 2 * spec.pad[2] - ks[4]) / spec.stride[2] + 1;
        let mut out = Tensor::zeros(&[cout, od, oh, ow]);
        assert_eq!(cin / spec.groups, cin_g);
        for co in 0..cout {
            let gi = co / cout_g;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for cl in 0..cin_g {
                            let ci = gi * cin_g + cl;
                            for kz in 0..ks[2] {
                                for ky in 0..ks[3] {
                                    for kx in 0..ks[4] {
                                        let z = (oz * spec.stride[0] + kz) as isize - spec.pad[0] as isize;
                                        let y = (oy * spec.stride[1] + ky) as isize - spec.pad[1] as isize;
                                        let xx = (ox * spec.stride[2] + kx) as isize - spec.pad[2] as isize;
                                        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= w as isize {
                                            continue;
                                        }
                                        acc += k.get(&[co, cl, kz, ky, kx])
                                            * x.get(&[ci, z as usize, y as usize, xx as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[co, oz, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor, k: &Tensor, spec: &ConvSpec) -> Tensor {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        (*g.value(conv3d(&g, xv, kv, None, spec).unwrap())).clone()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 4, 5, 6], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        k.set(&[0, 0, 1, 1, 1], 1.0);
        assert_eq!(run_conv(&x, &k, &ConvSpec::same([3, 3, 3])), x);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cases = [
            ([2, 5, 4, 6], [3, 2, 3, 3, 3], ConvSpec::same([3, 3, 3])),
            ([2, 5, 4, 6], [3, 2, 3, 3, 3], ConvSpec { stride: [2, 2, 2], pad: [0, 0, 0], groups: 1 }),
            ([4, 6, 6, 6], [4, 1, 3, 3, 3], ConvSpec::same([3, 3, 3]).with_groups(4).with_stride([2, 2, 2])),
            ([4, 3, 5, 5], [6, 2, 1, 3, 3], ConvSpec { stride: [1, 1, 2], pad: [0, 1, 1], groups: 2 }),
            ([3, 8, 8, 8], [2, 3, 5, 5, 5], ConvSpec::same([5, 5, 5])),
        ];
        for (xs, ks, spec) in cases {
            let x = Tensor::randn(&xs, 1.0, &mut rng);
            let k = Tensor::randn(&ks, 1.0, &mut rng);
            let fast = run_conv(&x, &k, &spec);
            let slow = naive_conv3d(&x, &k, &spec);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{xs:?} {ks:?}");
        }
    }

    #[test]
    fn rejects_bad_groups() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
        let k = g.constant(Tensor::zeros(&[2, 2, 1, 1, 1]));
        let spec = ConvSpec::same([1, 1, 1]).with_groups(2);
        assert!(conv3d(&g, x, k, None, &spec).is_err());
    }

    #[test]
    fn transpose_conv_doubles_extent() {
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2, 3, 4]));
        let k = g.constant(Tensor::ones(&[5, 2, 3, 3, 3]));
        let y = conv_transpose3d_x2(&g, x, k, None).unwrap();
        assert_eq!(g.shape(y), vec![5, 4, 6, 8]);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 4], 3.0));
        let y = g.value(resize_bilinear(&g, x, 16, 16).unwrap());
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-14));
        let p = g.value(avg_pool2(&g, x).unwrap());
        assert_eq!(p.shape(), &[2, 2, 2]);
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        // eps = 1e-5 shrinks σ by ~eps/(2·var); a spread of 5 keeps that under 1e-6
        let x = g.constant(Tensor::randn(&[3, 4, 5, 6], 5.0, &mut rng));
        let y = g.value(instance_norm(&g, x).unwrap());
        for c in 0..3 {
            let lane = &y.data()[c * 120..(c + 1) * 120];
            let mean = lane.iter().sum::<f64>() / 120.0;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 120.0;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
