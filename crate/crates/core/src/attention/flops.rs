use std::time::{Duration, Instant};

use numkernel::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ecft::{Ecaa, EcaaConfig};
use super::vanilla::VanillaAttention;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Vanilla,
    Ecaa,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::Ecaa => "ecaa",
        }
    }
}

/// Analytic multiply-add count for one attention block over `n` tokens of width `d`.
///
/// Vanilla: Q/K/V/output projections `4nd²`, plus `QKᵀ` and `A·V` at `n²d` each.
/// ECAA: Q/K projections and `T` at `nd²` each, plus the linear terms
/// `Q·l_g`, `gᵀQ`, `K⊙q`, `Q̂` (`nd` each) and the token softmax (`n`).
pub fn flop_count(mechanism: Mechanism, n: u64, d: u64) -> Result<u64> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("flop_count needs n, d ≥ 1, got n={n}, d={d}")));
    }
    Ok(match mechanism {
        Mechanism::Vanilla => 4 * n * d * d + 2 * n * n * d,
        Mechanism::Ecaa => 3 * n * d * d + 4 * n * d + n,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("fit_exponent needs ≥ 2 paired samples".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("fit_exponent needs positive samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("fit_exponent: all x equal".into()));
    }
    Ok(sxy / sxx)
}

/// Median forward wall time of one attention block on random `[n, d]` inputs.
pub fn bench_forward(mechanism: Mechanism, n: usize, d: usize, reps: usize, seed: u64) -> Result<Duration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let src = Tensor::randn(&[n, d], 1.0, &mut rng);
    let tgt = Tensor::randn(&[n, d], 1.0, &mut rng);
    let run: Box<dyn Fn() -> Result<()>> = match mechanism {
        Mechanism::Vanilla => {
            let block = VanillaAttention::new(&mut store, &mut rng, "attn", d);
            Box::new(move || {
                let g = Graph::new();
                let (s, t) = (g.constant(src.clone()), g.constant(tgt.clone()));
                block.forward(&g, &store, s, t).map(|_| ())
            })
        }
        Mechanism::Ecaa => {
            let block = Ecaa::new(&mut store, &mut rng, "attn", d, EcaaConfig::default());
            Box::new(move || {
                let g = Graph::new();
                let (s, t) = (g.constant(src.clone()), g.constant(tgt.clone()));
                block.forward(&g, &store, s, t).map(|_| ())
            })
        }
    };
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecaa_is_affine_in_n() {
        for d in [1, 8, 64] {
            let f = |n| flop_count(Mechanism::Ecaa, n, d).unwrap() as i64;
            for n in [1, 10, 500] {
                assert_eq!(f(n + 2) - 2 * f(n + 1) + f(n), 0);
            }
        }
    }

    #[test]
    fn doubling_ratios() {
        let d = 16;
        for n in [512u64, 1024, 4096] {
            let r = |m| flop_count(m, 2 * n, d).unwrap() as f64 / flop_count(m, n, d).unwrap() as f64;
            assert!((r(Mechanism::Ecaa) - 2.0).abs() <= 0.1);
            assert!((r(Mechanism::Vanilla) - 4.0).abs() <= 0.2);
        }
    }

    #[test]
    fn ecaa_cheaper_beyond_d() {
        for d in [2u64, 4, 16, 64] {
            for n in (d + 1)..(d + 200) {
                assert!(flop_count(Mechanism::Ecaa, n, d).unwrap() < flop_count(Mechanism::Vanilla, n, d).unwrap());
            }
        }
    }

    #[test]
    fn exponent_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_exponent(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(fit_exponent(&[1.0], &[1.0]).is_err());
        assert!(flop_count(Mechanism::Ecaa, 0, 4).is_err());
    }
}
