//! Finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    /// Seeds the output weighting and element sampling.
    pub seed: u64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Multiplies every analytic gradient by `1 + corrupt`; a nonzero value
    /// simulates a broken backward rule.
    pub corrupt: f64,
    /// Skip elements whose one-sided differences disagree by more than this
    /// (relative, same floor): the step straddles a kink there.
    pub kink_tol: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_elements: None,
            seed: 0,
            floor: 1e-3,
            corrupt: 0.0,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements left out because of [`GradcheckOptions::kink_tol`].
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` may return any shape; it is reduced to a scalar by a fixed random
/// weighting `Σ wᵢ yᵢ` so that normalizing ops (whose plain output sum is
/// constant) still get a non-trivial check.
pub fn gradcheck<F>(inputs: &[Tensor], options: &GradcheckOptions, f: F) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let probe = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &vars)?;
        g.shape(y)
    };
    let n_out: usize = probe.iter().product();
    let weights = if n_out == 1 {
        Tensor::ones(&probe)
    } else {
        Tensor::uniform(&probe, -1.0, 1.0, &mut rng)
    };

    let eval = |xs: &[Tensor], track: bool| -> Result<(f64, Vec<Tensor>)> {
        let g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| if track { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let y = f(&g, &vars)?;
        let w = g.constant(weights.clone());
        let wy = g.mul(y, w)?;
        let loss = g.sum(wy)?;
        let value = g.scalar_value(loss)?;
        if !track {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
    };

    let (f0, analytic) = eval(inputs, true)?;
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let elements: Vec<usize> = match options.max_elements {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = input.data()[e];
            let numeric = difference(f0, options, |delta| {
                work[i].data_mut()[e] = orig + delta;
                let r = eval(&work, false);
                work[i].data_mut()[e] = orig;
                Ok(r?.0)
            })?;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[i].data()[e] * (1.0 + options.corrupt);
            record(&mut report, i, e, a, numeric, options.floor);
        }
    }
    Ok(report)
}

/// Like [`gradcheck`], but differentiates with respect to tensors held in a
/// [`ParamStore`]. Only parameters listed in `ids` are perturbed.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    options: &GradcheckOptions,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let probe = {
        let g = Graph::new();
        let y = f(&g, store)?;
        g.shape(y)
    };
    let n_out: usize = probe.iter().product();
    let weights = if n_out == 1 {
        Tensor::ones(&probe)
    } else {
        Tensor::uniform(&probe, -1.0, 1.0, &mut rng)
    };
    let eval = |s: &ParamStore, track: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let g = Graph::new();
        let y = f(&g, s)?;
        let w = g.constant(weights.clone());
        let wy = g.mul(y, w)?;
        let loss = g.sum(wy)?;
        let value = g.scalar_value(loss)?;
        if !track {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, g.param_grads(s)))
    };
    let (f0, analytic) = eval(store, true)?;
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let elements: Vec<usize> = match options.max_elements {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in elements {
            let orig = store.get(id).data()[e];
            let numeric = difference(f0, options, |delta| {
                work.get_mut(id).data_mut()[e] = orig + delta;
                let r = eval(&work, false);
                work.get_mut(id).data_mut()[e] = orig;
                Ok(r?.0)
            })?;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[e]) * (1.0 + options.corrupt);
            record(&mut report, id.index(), e, a, numeric, options.floor);
        }
    }
    Ok(report)
}

/// Central difference of `f` around the current point, where `f(δ)` evaluates
/// at an offset `δ` and `f0` is the unperturbed value. With a kink tolerance,
/// a step whose one-sided differences disagree is retried at a tenth of the
/// size; `None` means both straddle a kink.
fn difference(f0: f64, options: &GradcheckOptions, mut f: impl FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let steps: &[f64] = if options.kink_tol.is_some() { &[1.0, 0.1] } else { &[1.0] };
    for &scale in steps {
        let h = options.h * scale;
        let (fp, fm) = (f(h)?, f(-h)?);
        let smooth = options.kink_tol.is_none_or(|tol| {
            let (ahead, behind) = ((fp - f0) / h, (f0 - fm) / h);
            (ahead - behind).abs() <= tol * ahead.abs().max(behind.abs()).max(options.floor)
        });
        if smooth {
            return Ok(Some((fp - fm) / (2.0 * h)));
        }
    }
    Ok(None)
}

fn record(report: &mut GradcheckReport, input: usize, element: usize, a: f64, numeric: f64, floor: f64) {
    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
    report.checked += 1;
    if report.checked == 1 || rel > report.max_rel_err {
        report.max_rel_err = rel;
        report.worst_input = input;
        report.worst_element = element;
        report.analytic = a;
        report.numeric = numeric;
    }
}

type CheckFn = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

/// A named gradient check: inputs plus the function under test.
pub struct Check {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CheckFn,
}

impl Check {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor>,
        f: impl Fn(&Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            f: Box::new(f),
        }
    }

    pub fn run(&self, options: &GradcheckOptions) -> Result<GradcheckReport> {
        gradcheck(&self.inputs, options, &self.f)
    }
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Gradient checks for every primitive op and the composite helpers in
/// [`crate::ops`], with inputs drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Vec<Check> {
    use crate::ops;
    use std::rc::Rc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0b5);
    let mut randn = |s: &[usize]| Tensor::randn(s, 1.0, &mut rng);
    let a34 = randn(&[3, 4]);
    let b34 = randn(&[3, 4]);
    let b4 = randn(&[4]);
    let c231 = randn(&[2, 3, 1]);
    let a54 = randn(&[5, 4]);
    let b43 = randn(&[4, 3]);
    let v7 = randn(&[7]);
    let m235 = randn(&[2, 3, 5]);
    let x3d = randn(&[2, 3, 4, 5]);
    let k3d = randn(&[3, 2, 3, 3, 3]);
    let bias3 = randn(&[3]);
    let x2d = randn(&[4, 6, 6]);
    let k2d = randn(&[4, 2, 3, 3]);
    let xt = randn(&[2, 2, 2, 3]);
    let kt = randn(&[2, 2, 3, 3, 3]);
    let inorm = randn(&[3, 2, 3, 4]);
    let xl = randn(&[5, 4]);
    let wl = randn(&[4, 6]);
    let bl = randn(&[6]);
    let img = randn(&[2, 4, 4]);
    let gathered = randn(&[6]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xab5);
    let kinked = away_from_zero(&[3, 4], &mut rng);
    let positive = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.3..2.0));
    let denom = away_from_zero(&[4], &mut rng);
    let distinct = Tensor::from_fn(&[3, 5], |i| ((i * 7) % 15) as f64 * 0.3 + rng.random_range(0.0..0.1));

    vec![
        Check::new("add", vec![a34.clone(), b4.clone()], |g, v| g.add(v[0], v[1])),
        Check::new("sub", vec![a34.clone(), b34.clone()], |g, v| g.sub(v[0], v[1])),
        Check::new("mul", vec![c231.clone(), a34.clone()], |g, v| g.mul(v[0], v[1])),
        Check::new("div", vec![a34.clone(), denom], |g, v| g.div(v[0], v[1])),
        Check::new("scale", vec![a34.clone()], |g, v| g.scale(v[0], -1.7)),
        Check::new("add_scalar", vec![a34.clone()], |g, v| g.add_scalar(v[0], 0.3)),
        Check::new("exp", vec![a34.clone()], |g, v| g.exp(v[0])),
        Check::new("log", vec![positive.clone()], |g, v| g.log(v[0])),
        Check::new("sqrt", vec![positive], |g, v| g.sqrt(v[0])),
        Check::new("tanh", vec![a34.clone()], |g, v| g.tanh(v[0])),
        Check::new("sigmoid", vec![a34.clone()], |g, v| g.sigmoid(v[0])),
        Check::new("relu", vec![kinked.clone()], |g, v| g.relu(v[0])),
        Check::new("silu", vec![a34.clone()], |g, v| g.silu(v[0])),
        Check::new("abs", vec![kinked.clone()], |g, v| g.abs(v[0])),
        Check::new("square", vec![a34.clone()], |g, v| g.square(v[0])),
        Check::new("clamp", vec![kinked], |g, v| g.clamp(v[0], -1.55, 0.19)),
        Check::new("matmul", vec![a54, b43], |g, v| g.matmul(v[0], v[1])),
        Check::new("transpose", vec![a34.clone()], |g, v| g.transpose(v[0])),
        Check::new("sum", vec![a34.clone()], |g, v| g.sum(v[0])),
        Check::new("mean", vec![a34.clone()], |g, v| g.mean(v[0])),
        Check::new("sum_axis", vec![m235.clone()], |g, v| g.sum_axis(v[0], 1)),
        Check::new("mean_axis", vec![m235.clone()], |g, v| g.mean_axis(v[0], 2)),
        Check::new("max_axis", vec![distinct], |g, v| g.max_axis(v[0], 1)),
        Check::new("softmax", vec![v7.clone()], |g, v| g.softmax(v[0], 0)),
        Check::new("softmax_axis", vec![m235.clone()], |g, v| g.softmax(v[0], 1)),
        Check::new("layer_norm", vec![m235.clone()], |g, v| {
            g.layer_norm(v[0], 2, ops::NORM_EPS)
        }),
        Check::new("reshape", vec![m235.clone()], |g, v| g.reshape(v[0], &[6, 5])),
        Check::new("permute", vec![m235.clone()], |g, v| g.permute(v[0], &[2, 0, 1])),
        Check::new("concat", vec![a34.clone(), b34], |g, v| g.concat(&[v[0], v[1]], 0)),
        Check::new("slice", vec![m235], |g, v| g.slice(v[0], 2, 1, 3)),
        Check::new("gather", vec![gathered], |g, v| {
            let index = Rc::new(vec![0, 3, 3, crate::graph::ZERO_INDEX, 5, 1]);
            g.gather(v[0], index, &[2, 3])
        }),
        Check::new("resample", vec![img.clone()], |g, v| ops::resize_bilinear(g, v[0], 7, 5)),
        Check::new("avg_pool2", vec![img], |g, v| ops::avg_pool2(g, v[0])),
        Check::new("conv3d", vec![x3d, k3d, bias3], |g, v| {
            ops::conv3d(g, v[0], v[1], Some(v[2]), &ops::ConvSpec::same([3, 3, 3]))
        }),
        Check::new("conv2d_grouped_strided", vec![x2d, k2d], |g, v| {
            ops::conv2d(g, v[0], v[1], None, 2, 1, 2)
        }),
        Check::new("conv_transpose3d_x2", vec![xt, kt], |g, v| {
            ops::conv_transpose3d_x2(g, v[0], v[1], None)
        }),
        Check::new("instance_norm", vec![inorm], |g, v| ops::instance_norm(g, v[0])),
        Check::new("linear", vec![xl.clone(), wl, bl], |g, v| {
            ops::linear(g, v[0], v[1], Some(v[2]))
        }),
        Check::new("l2_normalize_rows", vec![xl], |g, v| ops::l2_normalize_rows(g, v[0], 1e-12)),
    ]
}
