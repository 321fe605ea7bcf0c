use numkernel::ops::{self, ConvSpec};
use numkernel::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn forward(f: impl Fn(&Graph) -> numkernel::Var) -> Tensor {
    let g = Graph::new();
    let y = f(&g);
    (*g.value(y)).clone()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = Tensor::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
    let c = forward(|g| g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap());
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += a.get(&[i, p]) * b.get(&[p, j]);
            }
            assert!((c.get(&[i, j]) - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

#[test]
fn softmax_matches_direct_formula() {
    let mut r = rng(12);
    let x = Tensor::randn(&[9], 3.0, &mut r);
    let y = forward(|g| g.softmax(g.constant(x.clone()), 0).unwrap());
    let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = compensated_sum(x.data().iter().map(|v| (v - max).exp()));
    for (yi, xi) in y.data().iter().zip(x.data()) {
        let want = (xi - max).exp() / z;
        assert!((yi - want).abs() <= 1e-12 * want.max(1e-300) + 1e-16);
    }
    assert!((compensated_sum(y.data().iter().cloned()) - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_edge_cases() {
    let y = forward(|g| g.softmax(g.constant(Tensor::zeros(&[2])), 0).unwrap());
    assert_eq!(y.data(), &[0.5, 0.5]);
    let y = forward(|g| {
        g.softmax(g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap()), 0).unwrap()
    });
    assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
    let g = Graph::new();
    let empty = g.constant(Tensor::zeros(&[3, 0]));
    assert!(g.softmax(empty, 1).is_err());
}

#[test]
fn all_ones_kernel_is_local_sum() {
    let mut r = rng(13);
    let x = Tensor::randn(&[1, 5, 6, 4], 1.0, &mut r);
    let k = Tensor::ones(&[1, 1, 3, 3, 3]);
    let spec = ConvSpec { stride: [1; 3], pad: [0; 3], groups: 1 };
    let y = forward(|g| ops::conv3d(g, g.constant(x.clone()), g.constant(k.clone()), None, &spec).unwrap());
    assert_eq!(y.shape(), &[1, 3, 4, 2]);
    for z in 0..3 {
        for v in 0..4 {
            for u in 0..2 {
                let mut acc = 0.0;
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += x.get(&[0, z + dz, v + dy, u + dx]);
                        }
                    }
                }
                assert!((y.get(&[0, z, v, u]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn depthwise_conv_equals_per_channel_conv() {
    let mut r = rng(14);
    let x = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut r);
    let k = Tensor::randn(&[3, 1, 3, 3, 3], 1.0, &mut r);
    let spec = ConvSpec::same([3, 3, 3]).with_groups(3);
    let y = forward(|g| ops::conv3d(g, g.constant(x.clone()), g.constant(k.clone()), None, &spec).unwrap());
    for c in 0..3 {
        let xc = Tensor::new(&[1, 4, 5, 5], x.data()[c * 100..(c + 1) * 100].to_vec()).unwrap();
        let kc = Tensor::new(&[1, 1, 3, 3, 3], k.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
        let yc = forward(|g| {
            ops::conv3d(g, g.constant(xc.clone()), g.constant(kc.clone()), None, &ConvSpec::same([3, 3, 3]))
                .unwrap()
        });
        assert_eq!(&y.data()[c * 100..(c + 1) * 100], yc.data());
    }
}

#[test]
fn norms_and_activations() {
    let y = forward(|g| g.layer_norm(g.constant(Tensor::full(&[6], 2.5)), 0, ops::NORM_EPS).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = forward(|g| g.silu(g.constant(Tensor::scalar(0.0))).unwrap());
    assert_eq!(y.item().unwrap(), 0.0);
    let mut r = rng(15);
    let x = Tensor::randn(&[4, 10], 3.0, &mut r);
    let y = forward(|g| g.layer_norm(g.constant(x.clone()), 1, ops::NORM_EPS).unwrap());
    for row in y.data().chunks(10) {
        let mean: f64 = row.iter().sum::<f64>() / 10.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
    let g = Graph::new();
    let empty = g.constant(Tensor::zeros(&[2, 0]));
    assert!(g.layer_norm(empty, 1, ops::NORM_EPS).is_err());
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let run = || {
        let mut r = rng(16);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let k = Tensor::randn(&[2, 2, 3, 3, 3], 1.0, &mut r);
        let g = Graph::new();
        let (vx, vk) = (g.variable(x), g.variable(k));
        let y = ops::conv3d(&g, vx, vk, None, &ConvSpec::same([3, 3, 3])).unwrap();
        let y = ops::instance_norm(&g, y).unwrap();
        let s = g.softmax(y, 3).unwrap();
        let l = g.sum(g.square(s).unwrap()).unwrap();
        g.backward(l).unwrap();
        (g.scalar_value(l).unwrap(), g.grad(vx), g.grad(vk))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = data.len();
        let y = forward(|g| g.softmax(g.constant(Tensor::new(&[n], data.clone()).unwrap()), 0).unwrap());
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn conv3d_matches_nested_loops(
        cin in 1usize..3, cout in 1usize..3, d in 1usize..5, h in 1usize..6, w in 1usize..6,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..100,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[cin, d, h, w], 1.0, &mut r);
        let kern = Tensor::randn(&[cout, cin, k, k, k], 1.0, &mut r);
        let spec = ConvSpec::same([k, k, k]).with_stride([stride; 3]);
        let y = forward(|g| ops::conv3d(g, g.constant(x.clone()), g.constant(kern.clone()), None, &spec).unwrap());
        let p = (k / 2) as isize;
        let ys = y.shape().to_vec();
        for co in 0..cout { for oz in 0..ys[1] { for oy in 0..ys[2] { for ox in 0..ys[3] {
            let mut acc = 0.0;
            for ci in 0..cin { for kz in 0..k { for ky in 0..k { for kx in 0..k {
                let z = (oz * stride + kz) as isize - p;
                let yy = (oy * stride + ky) as isize - p;
                let xx = (ox * stride + kx) as isize - p;
                if z >= 0 && yy >= 0 && xx >= 0 && (z as usize) < d && (yy as usize) < h && (xx as usize) < w {
                    acc += x.get(&[ci, z as usize, yy as usize, xx as usize]) * kern.get(&[co, ci, kz, ky, kx]);
                }
            }}}}
            prop_assert!((y.get(&[co, oz, oy, ox]) - acc).abs() < 1e-12);
        }}}}
    }
}
