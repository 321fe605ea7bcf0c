use nalgebra::Vector3;

use crate::error::{Error, Result};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanShiftConfig {
    pub bandwidth: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Seeds are drawn from the votes at an even stride, at most this many.
    pub max_seeds: usize,
}

impl MeanShiftConfig {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            tol: 1e-6,
            max_iter: 100,
            max_seeds: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MeanShiftResult {
    /// Merged modes, largest cluster first.
    pub modes: Vec<V3>,
    /// Votes assigned to each mode.
    pub sizes: Vec<usize>,
    /// Mode index of every vote.
    pub assignment: Vec<usize>,
    /// Whether the two largest clusters have equal size.
    pub tie: bool,
}

impl MeanShiftResult {
    pub fn center(&self) -> V3 {
        self.modes[0]
    }
}

/// Gaussian-kernel mean shift.
///
/// Each seed climbs until its step is below `tol` or `max_iter` is reached;
/// modes closer than `bandwidth / 2` are merged and every vote joins its
/// nearest mode. The mode with most votes is reported first.
pub fn meanshift(votes: &[V3], config: &MeanShiftConfig) -> Result<MeanShiftResult> {
    if votes.is_empty() {
        return Err(Error::Empty("mean shift votes"));
    }
    if !(config.bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {}", config.bandwidth)));
    }
    let inv = 1.0 / (2.0 * config.bandwidth * config.bandwidth);
    let stride = votes.len().div_ceil(config.max_seeds.max(1));
    let mut modes: Vec<V3> = Vec::new();
    for seed in votes.iter().step_by(stride) {
        let mut x = *seed;
        for _ in 0..config.max_iter {
            let mut num = V3::zeros();
            let mut den = 0.0;
            for v in votes {
                let w = (-(v - x).norm_squared() * inv).exp();
                num += w * v;
                den += w;
            }
            let next = num / den;
            let step = (next - x).norm();
            x = next;
            if step < config.tol {
                break;
            }
        }
        if !modes.iter().any(|m| (m - x).norm() < config.bandwidth / 2.0) {
            modes.push(x);
        }
    }
    let assignment: Vec<usize> = votes
        .iter()
        .map(|v| {
            (0..modes.len())
                .min_by(|&a, &b| (v - modes[a]).norm_squared().total_cmp(&(v - modes[b]).norm_squared()))
                .expect("at least one mode")
        })
        .collect();
    let mut sizes = vec![0; modes.len()];
    for &a in &assignment {
        sizes[a] += 1;
    }
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut rank = vec![0; modes.len()];
    for (r, &o) in order.iter().enumerate() {
        rank[o] = r;
    }
    let tie = order.len() > 1 && sizes[order[0]] == sizes[order[1]];
    Ok(MeanShiftResult {
        modes: order.iter().map(|&o| modes[o]).collect(),
        sizes: order.iter().map(|&o| sizes[o]).collect(),
        assignment: assignment.iter().map(|&a| rank[a]).collect(),
        tie,
    })
}
