use nalgebra::Vector3;

use crate::error::{Error, Result};

type V3 = Vector3<f64>;

/// Default keypoint count.
pub const DEFAULT_KEYPOINTS: usize = 8;

/// Greedy farthest-point sampling of `m` indices.
///
/// The first pick is the point farthest from the centroid; each later pick
/// maximizes the distance to the already selected set. Ties go to the lower index.
pub fn fps_indices(points: &[V3], m: usize) -> Result<Vec<usize>> {
    if m == 0 || points.len() < m {
        return Err(Error::InvalidArgument(format!(
            "farthest point sampling of {m} from {} points",
            points.len()
        )));
    }
    let centroid = points.iter().sum::<V3>() / points.len() as f64;
    let argmax = |d: &[f64]| {
        d.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let first = argmax(&points.iter().map(|p| (p - centroid).norm_squared()).collect::<Vec<_>>());
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < m {
        let next = argmax(&dist);
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    Ok(chosen)
}

pub fn fps_select(points: &[V3], m: usize) -> Result<Vec<V3>> {
    Ok(fps_indices(points, m)?.into_iter().map(|i| points[i]).collect())
}

/// `votes[j]` holds `p_i + offsets[i][j]` for every point with `indicator[i]`.
pub fn vote_keypoints(points: &[V3], offsets: &[Vec<V3>], indicator: &[bool]) -> Result<Vec<Vec<V3>>> {
    if offsets.len() != points.len() || indicator.len() != points.len() {
        return Err(Error::Mismatch(format!(
            "{} points, {} offset rows, {} indicators",
            points.len(),
            offsets.len(),
            indicator.len()
        )));
    }
    let m = offsets.first().map_or(0, |o| o.len());
    if offsets.iter().any(|o| o.len() != m) {
        return Err(Error::Mismatch("ragged offset field".into()));
    }
    let mut votes = vec![Vec::new(); m];
    for ((p, row), &inside) in points.iter().zip(offsets).zip(indicator) {
        if inside {
            for (j, of) in row.iter().enumerate() {
                votes[j].push(p + of);
            }
        }
    }
    Ok(votes)
}

/// Minimum pairwise distance of a point set.
pub fn min_pairwise_distance(points: &[V3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((points[i] - points[j]).norm());
        }
    }
    best
}
