//! Clustered linear regression: inputs come from well-separated clusters and
//! each cluster has its own target map.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::{gaussian_matrix, gaussian_vec, seeded};

/// Distance of every cluster center from the origin.
pub const CENTER_RADIUS: f64 = 4.0;
/// Half-width of the uniform per-coordinate spread around a center.
pub const INPUT_SPREAD: f64 = 0.5;
const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub cluster_count: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub noise: f64,
    pub centers: Vec<Vec<f64>>,
    /// Per-cluster target maps `M_c` (`d_out × d_in`).
    pub maps: Vec<Matrix>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Deterministic task with targets `y = M_c·x + ε`, `ε ~ N(0, noise²)`.
///
/// Centers are orthogonal directions of norm [`CENTER_RADIUS`] when
/// `clusters ≤ d_in`, which keeps clusters linearly separable.
pub fn make_task(
    clusters: usize,
    samples_per_cluster: usize,
    d_in: usize,
    d_out: usize,
    noise: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    if clusters == 0 || samples_per_cluster == 0 || d_in == 0 || d_out == 0 {
        return Err(MoeError::invalid("task needs clusters, samples and dimensions ≥ 1"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(MoeError::invalid(format!("noise {noise} must be finite and ≥ 0")));
    }
    let mut rng = seeded(seed);
    let centers = cluster_centers(clusters, d_in, &mut rng);
    let maps: Vec<Matrix> = (0..clusters)
        .map(|_| gaussian_matrix(&mut rng, d_out, d_in, 1.0 / (d_in as f64).sqrt()))
        .collect();
    let mut samples = Vec::with_capacity(clusters * samples_per_cluster);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_cluster {
            let x: Vec<f64> = center.iter().map(|v| v + rng.random_range(-INPUT_SPREAD..=INPUT_SPREAD)).collect();
            let eps = gaussian_vec(&mut rng, d_out, noise);
            let y = maps[c].matvec(&x)?.iter().zip(eps).map(|(a, b)| a + b).collect();
            samples.push(Sample { x, y, cluster: c });
        }
    }
    samples.shuffle(&mut rng);
    let n_eval = ((samples.len() as f64 * EVAL_FRACTION).round() as usize).clamp(1, samples.len());
    let train = samples.split_off(n_eval);
    let eval = samples;
    Ok(SyntheticTask { cluster_count: clusters, d_in, d_out, noise, centers, maps, train, eval })
}

fn cluster_centers<R: Rng>(clusters: usize, d_in: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut centers = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let mut v: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        if basis.len() < d_in {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
                v.iter_mut().zip(b).for_each(|(p, q)| *p -= proj * q);
            }
        }
        let n = norm(&v).max(f64::MIN_POSITIVE);
        let unit: Vec<f64> = v.iter().map(|p| p / n).collect();
        if basis.len() < d_in {
            basis.push(unit.clone());
        }
        centers.push(unit.into_iter().map(|p| p * CENTER_RADIUS).collect());
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    #[test]
    fn deterministic() {
        assert_eq!(make_task(3, 10, 6, 2, 0.1, 4).unwrap(), make_task(3, 10, 6, 2, 0.1, 4).unwrap());
        assert_ne!(make_task(3, 10, 6, 2, 0.1, 4).unwrap(), make_task(3, 10, 6, 2, 0.1, 5).unwrap());
    }

    #[test]
    fn oracle_maps_fit_noise_free_targets() {
        let t = make_task(4, 20, 8, 3, 0.0, 1).unwrap();
        for s in t.train.iter().chain(&t.eval) {
            let pred = t.maps[s.cluster].matvec(&s.x).unwrap();
            assert_eq!(pred, s.y);
        }
        assert_eq!(t.train.len() + t.eval.len(), 80);
        assert_eq!(make_task(1, 5, 3, 2, 0.0, 1).unwrap().maps.len(), 1);
    }

    #[test]
    fn clusters_are_linearly_separable() {
        let t = make_task(4, 50, 16, 2, 0.0, 7).unwrap();
        let all: Vec<&Sample> = t.train.iter().chain(&t.eval).collect();
        for a in 0..4 {
            for b in 0..4 {
                if a == b {
                    continue;
                }
                let w: Vec<f64> = t.centers[a].iter().zip(&t.centers[b]).map(|(p, q)| p - q).collect();
                let mid: Vec<f64> = t.centers[a].iter().zip(&t.centers[b]).map(|(p, q)| 0.5 * (p + q)).collect();
                let side = |x: &[f64]| dot(&w, x) - dot(&w, &mid);
                for s in &all {
                    if s.cluster == a {
                        assert!(side(&s.x) > 0.0);
                    } else if s.cluster == b {
                        assert!(side(&s.x) < 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_degenerate() {
        assert!(make_task(0, 1, 1, 1, 0.0, 0).is_err());
        assert!(make_task(1, 1, 1, 1, -1.0, 0).is_err());
    }
}
