use numkernel::gradcheck::primitive_checks;
use numkernel::{gradcheck, GradcheckOptions, Graph, Tensor};
use proptest::prelude::*;

#[test]
fn primitives_match_central_differences() {
    for seed in 0..3 {
        let options = GradcheckOptions { seed, ..Default::default() };
        for check in primitive_checks(seed) {
            let report = check.run(&options).unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{} (seed {seed}): rel err {:.3e} at input {} element {}: analytic {} numeric {}",
                check.name,
                report.max_rel_err,
                report.worst_input,
                report.worst_element,
                report.analytic,
                report.numeric
            );
        }
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let options = GradcheckOptions { corrupt: 0.01, ..Default::default() };
    for check in primitive_checks(0).into_iter().take(5) {
        assert!(check.run(&options).unwrap().max_rel_err > 1e-3, "{}", check.name);
    }
}

#[test]
fn sum_of_matmul_gradient_is_ones_times_bt() {
    let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
    let b = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
    let g = Graph::new();
    let (va, vb) = (g.variable(a), g.variable(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let ga = g.grad(va);
    for i in 0..2 {
        for p in 0..3 {
            let row_sum: f64 = (0..4).map(|j| b.get(&[p, j])).sum();
            assert_eq!(ga.get(&[i, p]), row_sum);
        }
    }
    let report = gradcheck(
        &[Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1), b],
        &GradcheckOptions::default(),
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tanh_softmax_chain_gradients(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        seed in 0u64..1000,
    ) {
        let x = Tensor::new(&[3, 4], data).unwrap();
        let options = GradcheckOptions { seed, ..Default::default() };
        let report = gradcheck(&[x], &options, |g, v| {
            let t = g.tanh(v[0])?;
            let s = g.softmax(t, 1)?;
            g.mul(s, v[0])
        })
        .unwrap();
        prop_assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }
}
