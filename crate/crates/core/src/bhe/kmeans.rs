//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{squared_distance, Scalar};
use crate::seed;

#[derive(Debug, Clone)]
pub struct KmeansOutcome<S: Scalar = f64> {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<S>>,
    /// Squared Euclidean distance of every point to every final center
    /// (`n x k`).
    pub distances: Matrix<S>,
    /// Objective (sum of min squared distances) after each assignment step.
    pub objective_trace: Vec<f64>,
}

/// Cluster `points` into `k` groups. Iterates to an assignment fixpoint or
/// 300 iterations; an emptied cluster is re-seeded to the point farthest from
/// its assigned center. The Lloyd objective is asserted non-increasing across
/// iterations.
pub fn kmeans<S: Scalar>(points: &[Vec<S>], k: usize, seed_value: u64) -> Result<KmeansOutcome<S>> {
    if k == 0 {
        return Err(Error::argument("k must be >= 1"));
    }
    if points.is_empty() {
        return Err(Error::argument("kmeans requires at least one point"));
    }
    if k > points.len() {
        return Err(Error::argument(format!(
            "k = {k} exceeds point count {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::argument("points must share one dimension"));
    }

    let mut rng = seed::rng(seed_value, "kmeans");
    let mut centers = plus_plus_init(points, k, &mut rng);
    let (mut labels, mut objective) = assign(points, &centers);
    let mut trace = vec![objective];

    const MAX_ITERS: usize = 300;
    for _ in 0..MAX_ITERS {
        centers = update_centers(points, &labels, &centers, dim, k);
        let (new_labels, new_objective) = assign(points, &centers);
        assert!(
            new_objective <= objective,
            "Lloyd objective increased: {objective} -> {new_objective}"
        );
        trace.push(new_objective);
        let fixpoint = new_labels == labels;
        labels = new_labels;
        objective = new_objective;
        if fixpoint {
            break;
        }
    }

    let mut distances = Matrix::zeros(points.len(), k);
    for (i, p) in points.iter().enumerate() {
        for (c, center) in centers.iter().enumerate() {
            distances.set(i, c, squared_distance(p, center));
        }
    }
    Ok(KmeansOutcome { labels, centers, distances, objective_trace: trace })
}

fn plus_plus_init<S: Scalar>(points: &[Vec<S>], k: usize, rng: &mut impl Rng) -> Vec<Vec<S>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]).to_f64())
        .collect();
    while centers.len() < k {
        let total: f64 = min_d.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in min_d.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centers.last().unwrap()).to_f64();
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    centers
}

/// Nearest-center assignment (ties to the lowest index) and the resulting
/// objective.
fn assign<S: Scalar>(points: &[Vec<S>], centers: &[Vec<S>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut objective = 0.0;
    for p in points {
        let mut best = 0;
        let mut best_d = squared_distance(p, &centers[0]);
        for (c, center) in centers.iter().enumerate().skip(1) {
            let d = squared_distance(p, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels.push(best);
        objective += best_d.to_f64();
    }
    (labels, objective)
}

fn update_centers<S: Scalar>(
    points: &[Vec<S>],
    labels: &[usize],
    old_centers: &[Vec<S>],
    dim: usize,
    k: usize,
) -> Vec<Vec<S>> {
    let mut sums = vec![vec![S::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut centers = Vec::with_capacity(k);
    for c in 0..k {
        if counts[c] > 0 {
            let n = S::from_usize(counts[c]);
            centers.push(sums[c].iter().map(|&s| s / n).collect());
        } else {
            centers.push(old_centers[c].clone());
        }
    }
    // Re-seed each emptied cluster to the point currently farthest from its
    // assigned center, one cluster at a time.
    let mut used: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far_idx = 0;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if used.contains(&i) {
                continue;
            }
            let d = squared_distance(p, &centers[labels[i]]).to_f64();
            if d > far_d {
                far_d = d;
                far_idx = i;
            }
        }
        centers[c] = points[far_idx].clone();
        used.push(far_idx);
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn k1_center_is_coordinate_mean() {
        let points = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]];
        let out = kmeans(&points, 1, 0).unwrap();
        assert_eq!(out.centers[0], vec![2.0, 2.0]);
        assert!(out.labels.iter().all(|&l| l == 0));
        // distances are squared norms to the mean
        assert_eq!(out.distances.get(0, 0), 8.0);
    }

    #[test]
    fn two_blobs_recovered_exactly() {
        let mut rng = crate::seed::rng(5, "blobs");
        let mut points = Vec::new();
        for _ in 0..20 {
            points.push(vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]);
        }
        for _ in 0..20 {
            points.push(vec![10.0 + rng.gen_range(-0.1..0.1), 10.0 + rng.gen_range(-0.1..0.1)]);
        }
        let out = kmeans(&points, 2, 3).unwrap();
        // brute-force oracle: nearest planted blob center
        let oracle: Vec<usize> = points
            .iter()
            .map(|p| {
                let d0 = squared_distance(p, &vec![0.0, 0.0]);
                let d1 = squared_distance(p, &vec![10.0, 10.0]);
                usize::from(d1 < d0)
            })
            .collect();
        let agree = out
            .labels
            .iter()
            .zip(&oracle)
            .filter(|(a, b)| a == b)
            .count();
        // partition must match the blobs exactly, up to label swap
        assert!(agree == points.len() || agree == 0, "agree = {agree}");
    }

    #[test]
    fn identical_points_have_zero_objective() {
        let points = vec![vec![1.5, -2.0]; 8];
        let out = kmeans(&points, 3, 1).unwrap();
        assert_eq!(*out.objective_trace.last().unwrap(), 0.0);
        assert!(out.distances.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn objective_trace_is_non_increasing() {
        let mut rng = crate::seed::rng(8, "trace");
        let points: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let out = kmeans(&points, 5, 2).unwrap();
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "objective increased: {w:?}");
        }
        // every point ends on its nearest center
        for (i, p) in points.iter().enumerate() {
            let assigned = out.distances.get(i, out.labels[i]);
            for c in 0..5 {
                assert!(assigned <= out.distances.get(i, c));
            }
        }
    }

    #[test]
    fn k_larger_than_point_count_is_rejected() {
        let points = vec![vec![0.0]; 2];
        assert!(kmeans(&points, 3, 0).is_err());
    }
}
