//! Straight-line reimplementations of graph computations, each returning the
//! largest absolute deviation it saw.

use nalgebra::Vector3;
use numkernel::ops::{self, ConvSpec};
use numkernel::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereopose::attention::{eca_kernel_size, Ecaa, EcaaConfig, Seca};
use stereopose::metrics::{bad_tau, d1, epe, evaluate_disparity, rmse};
use stereopose::pose::{center_loss, focal_loss, keypoint_loss, multitask_loss, FocalParams, LossWeights};
use stereopose::DisparityMap;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-padded stride-1 3-D convolution with bias over `[C, D, H, W]`.
fn conv3d_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (c, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(&[co, d, h, wd]);
    for o in 0..co {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sz, sy, sx) = (
                                        z as isize + kz as isize - p,
                                        y as isize + ky as isize - p,
                                        xx as isize + kx as isize - p,
                                    );
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.get(&[ci, sz as usize, sy as usize, sx as usize]) * w.get(&[o, ci, kz, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[o, z, y, xx], acc);
                }
            }
        }
    }
    out
}

/// SECA against loops over every stage, including the ECA and attention branches.
pub fn seca() -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng(1);
    let (c, d, h, w) = (3, 3, 4, 5);
    let mut store = ParamStore::new();
    let seca = Seca::new(&mut store, &mut r, "seca", c, 2);
    let x = Tensor::randn(&[c, d, h, w], 1.0, &mut r);
    let g = Graph::new();
    let parts = seca.parts(&g, &store, g.constant(x.clone())).unwrap();
    let got = g.value(parts.out);

    let l = d * h * w;
    let p = |id| store.get(id).clone();
    // channel attention
    let pooled: Vec<f64> = (0..c).map(|ch| x.data()[ch * l..(ch + 1) * l].iter().sum::<f64>() / l as f64).collect();
    let k = eca_kernel_size(c);
    let kern = p(seca.eca.kernel);
    let mut x_eca = vec![0.0; c * l];
    for ch in 0..c {
        let mut acc = 0.0;
        for j in 0..k {
            let src = ch as isize + j as isize - (k / 2) as isize;
            if (0..c as isize).contains(&src) {
                acc += kern.data()[j] * pooled[src as usize];
            }
        }
        let s = sigmoid(acc);
        for i in 0..l {
            x_eca[ch * l + i] = x.data()[ch * l + i] * s;
        }
    }
    // spatial attention
    let relu = |t: Tensor| t.map(|v| v.max(0.0));
    let conv = |m: &stereopose::nn::Conv3d| relu(conv3d_same(&x, &p(m.weight), &p(m.bias.unwrap())));
    let (q, kk, v) = (conv(&seca.q), conv(&seca.k), conv(&seca.v));
    let mut x_attn = vec![0.0; c * l];
    for ch in 0..c {
        let u: Vec<f64> = (0..l).map(|i| q.data()[ch * l + i] * kk.data()[ch * l + i]).collect();
        let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = u.iter().map(|a| (a - m).exp()).sum();
        for i in 0..l {
            x_attn[ch * l + i] = (u[i] - m).exp() / z * v.data()[ch * l + i];
        }
    }
    // instance norm of the concatenation, then the 1×1×1 fuse
    let mut cat = x_attn.clone();
    cat.extend_from_slice(&x_eca);
    for ch in 0..2 * c {
        let s = &mut cat[ch * l..(ch + 1) * l];
        let mu = s.iter().sum::<f64>() / l as f64;
        let var = s.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / l as f64;
        for a in s.iter_mut() {
            *a = (*a - mu) / (var + 1e-5).sqrt();
        }
    }
    let cat = Tensor::new(&[2 * c, d, h, w], cat).unwrap();
    let fused = relu(conv3d_same(&cat, &p(seca.fuse.weight), &p(seca.fuse.bias.unwrap())));

    assert_eq!(got.shape(), fused.shape());
    worst = worst.max(got.max_abs_diff(&fused));
    let eca_t = Tensor::new(&[c, d, h, w], x_eca).unwrap();
    worst = worst.max(g.value(parts.x_eca).max_abs_diff(&eca_t));
    let attn_t = Tensor::new(&[c, d, h, w], x_attn).unwrap();
    worst.max(g.value(parts.x_attn).max_abs_diff(&attn_t))
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.get(&[i, j])).collect()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

/// ECAA over three seeds, checking weights, pooled query and output.
pub fn ecaa() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let (n, d) = (7, 5);
        let mut store = ParamStore::new();
        let ecaa = Ecaa::new(&mut store, &mut r, "ecaa", d, EcaaConfig::default());
        let src = Tensor::randn(&[n, d], 1.0, &mut r);
        let tgt = Tensor::randn(&[n, d], 1.0, &mut r);
        let g = Graph::new();
        let parts = ecaa.parts(&g, &store, g.constant(src.clone()), g.constant(tgt.clone())).unwrap();

        let q = mm(&mat(&tgt), &mat(store.get(ecaa.wq)));
        let k = mm(&mat(&src), &mat(store.get(ecaa.wk)));
        let lg = mat(store.get(ecaa.lg));
        let logits: Vec<f64> = mm(&q, &lg).iter().map(|row| row[0] / (d as f64).sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|a| (a - m).exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|a| (a - m).exp() / z).collect();
        let q_global: Vec<f64> = (0..d).map(|j| (0..n).map(|i| weights[i] * q[i][j]).sum()).collect();
        let kq: Vec<Vec<f64>> = k.iter().map(|row| row.iter().zip(&q_global).map(|(a, b)| a * b).collect()).collect();
        let tw = mat(store.get(ecaa.t.weight));
        let tb = store.get(ecaa.t.bias.unwrap()).data().to_vec();
        let tkq = mm(&kq, &tw);
        for i in 0..n {
            let norm = (q[i].iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
            for j in 0..d {
                let expect = q[i][j] / norm + tkq[i][j] + tb[j];
                worst = worst.max((g.value(parts.out).get(&[i, j]) - expect).abs());
            }
            worst = worst.max((g.value(parts.g).data()[i] - weights[i]).abs());
        }
        for j in 0..d {
            worst = worst.max((g.value(parts.q_global).data()[j] - q_global[j]).abs());
        }
    }
    worst
}

fn map(values: &[f64]) -> DisparityMap {
    DisparityMap::from_values(values.len(), 1, values.to_vec()).unwrap()
}

/// EPE, RMSE, bad-τ and D1 on maps with invalid pixels and a mask.
pub fn disparity_metrics() -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng(3);
    for _ in 0..20 {
        let gt: Vec<f64> = (0..50)
            .map(|i| if i % 7 == 3 { f64::NAN } else { rand::Rng::random_range(&mut r, 1.0..80.0) })
            .collect();
        let pred: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(i, g)| if i % 11 == 5 { f64::INFINITY } else { g + rand::Rng::random_range(&mut r, -10.0..10.0) })
            .collect();
        let mask: Vec<bool> = (0..50).map(|i| i % 13 != 0).collect();
        let idx: Vec<usize> = (0..50).filter(|&i| gt[i].is_finite() && pred[i].is_finite() && mask[i]).collect();
        let n = idx.len() as f64;
        let err = |i: usize| (pred[i] - gt[i]).abs();
        let e = idx.iter().map(|&i| err(i)).sum::<f64>() / n;
        let rm = (idx.iter().map(|&i| err(i).powi(2)).sum::<f64>() / n).sqrt();
        let b2 = idx.iter().filter(|&&i| err(i) > 2.0).count() as f64 / n;
        let dd = idx.iter().filter(|&&i| err(i) > 3.0 && err(i) / gt[i] > 0.05).count() as f64 / n;
        let (p, gm) = (map(&pred), map(&gt));
        let rep = evaluate_disparity(&p, &gm, Some(&mask), &[2.0]).unwrap();
        assert_eq!(rep.n, idx.len());
        for diff in [
            epe(&p, &gm, Some(&mask)).unwrap() - e,
            rmse(&p, &gm, Some(&mask)).unwrap() - rm,
            bad_tau(&p, &gm, Some(&mask), 2.0).unwrap() - b2,
            d1(&p, &gm, Some(&mask)).unwrap() - dd,
            rep.epe - e,
            rep.bad[0].1 - b2,
        ] {
            worst = worst.max(diff.abs());
        }
    }
    worst
}

/// Keypoint, center, focal and weighted multitask losses.
pub fn pose_losses() -> f64 {
    let mut r = rng(4);
    let (n, m) = (6, 3);
    let pred = Tensor::randn(&[n, m, 3], 1.0, &mut r);
    let gt = Tensor::randn(&[n, m, 3], 1.0, &mut r);
    let cp = Tensor::randn(&[n, 3], 1.0, &mut r);
    let cg = Tensor::randn(&[n, 3], 1.0, &mut r);
    let ind: Vec<bool> = (0..n).map(|i| i != 2).collect();
    let probs = Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { 0.1 + 0.13 * (i / 2) as f64 } else { 0.9 - 0.13 * (i / 2) as f64 });
    let labels: Vec<usize> = (0..n).map(|i| (i * 5) % 2).collect();

    let v = |t: &Tensor, i: usize, j: usize, w: usize| Vector3::from_fn(|a, _| t.data()[(i * w + j) * 3 + a]);
    let mut kp = 0.0;
    let mut ctr = 0.0;
    for i in 0..n {
        if !ind[i] {
            continue;
        }
        for j in 0..m {
            kp += (v(&pred, i, j, m) - v(&gt, i, j, m)).norm();
        }
        ctr += (v(&cp, i, 0, 1) - v(&cg, i, 0, 1)).norm();
    }
    kp /= n as f64;
    ctr /= n as f64;
    let fp = FocalParams::default();
    let focal = -fp.alpha / n as f64
        * (0..n)
            .map(|i| {
                let pt = probs.get(&[i, labels[i]]);
                (1.0 - pt).powf(fp.gamma) * pt.ln()
            })
            .sum::<f64>();

    let g = Graph::new();
    let lk = keypoint_loss(&g, g.constant(pred), &gt, &ind).unwrap();
    let lc = center_loss(&g, g.constant(cp), &cg, &ind).unwrap();
    let lf = focal_loss(&g, g.constant(probs), &labels, fp).unwrap();
    let mut worst = 0.0f64;
    for (v, expect) in [(lk, kp), (lc, ctr), (lf, focal)] {
        worst = worst.max((g.scalar_value(v).unwrap() - expect).abs());
    }
    let w = LossWeights {
        keypoint: 0.5,
        semantic: 2.0,
        center: 1.5,
    };
    let total = multitask_loss(&g, lk, lf, lc, w).unwrap();
    worst.max((g.scalar_value(total).unwrap() - (0.5 * kp + 2.0 * focal + 1.5 * ctr)).abs())
}

/// Strided, padded, grouped conv3d against nested loops.
pub fn conv3d() -> f64 {
    let mut r = rng(21);
    let mut worst = 0.0f64;
    for (cin, cout, groups, stride, pad) in [(2, 3, 1, 1, 1), (4, 4, 2, 2, 1), (3, 6, 3, 1, 0), (2, 2, 1, 2, 2)] {
        let (d, h, w, k) = (5, 6, 7, 3);
        let x = Tensor::randn(&[cin, d, h, w], 1.0, &mut r);
        let kern = Tensor::randn(&[cout, cin / groups, k, k, k], 1.0, &mut r);
        let bias = Tensor::randn(&[cout], 1.0, &mut r);
        let spec = ConvSpec { stride: [stride; 3], pad: [pad; 3], groups };
        let g = Graph::new();
        let got = g.value(ops::conv3d(&g, g.constant(x.clone()), g.constant(kern.clone()), Some(g.constant(bias.clone())), &spec).unwrap());
        let out_len = |n: usize| (n + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (out_len(d), out_len(h), out_len(w));
        assert_eq!(got.shape(), &[cout, od, oh, ow]);
        let (cig, cog) = (cin / groups, cout / groups);
        for o in 0..cout {
            let grp = o / cog;
            for (z, y, xx) in (0..od).flat_map(|z| (0..oh).flat_map(move |y| (0..ow).map(move |xx| (z, y, xx)))) {
                let mut acc = bias.data()[o];
                for ci in 0..cig {
                    for (kz, ky, kx) in (0..k).flat_map(|a| (0..k).flat_map(move |b| (0..k).map(move |c| (a, b, c)))) {
                        let src = |o: usize, kk: usize| (o * stride + kk) as isize - pad as isize;
                        let (sz, sy, sx) = (src(z, kz), src(y, ky), src(xx, kx));
                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += x.get(&[grp * cig + ci, sz as usize, sy as usize, sx as usize]) * kern.get(&[o, ci, kz, ky, kx]);
                    }
                }
                worst = worst.max((got.get(&[o, z, y, xx]) - acc).abs());
            }
        }
    }
    worst
}

/// Softmax along each axis of a rank-3 tensor, including large logits.
pub fn softmax() -> f64 {
    let mut r = rng(22);
    let x = Tensor::randn(&[3, 4, 5], 30.0, &mut r);
    let mut worst = 0.0f64;
    for axis in 0..3 {
        let g = Graph::new();
        let got = g.value(g.softmax(g.constant(x.clone()), axis).unwrap());
        let s = x.shape().to_vec();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let idx = [i, j, k];
                    let lane: Vec<f64> = (0..s[axis])
                        .map(|a| {
                            let mut id = idx;
                            id[axis] = a;
                            x.get(&id)
                        })
                        .collect();
                    let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = lane.iter().map(|v| (v - m).exp()).sum();
                    worst = worst.max((got.get(&idx) - (x.get(&idx) - m).exp() / z).abs());
                }
            }
        }
    }
    worst
}
