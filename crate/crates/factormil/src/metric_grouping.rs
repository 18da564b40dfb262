//! Phase 1: a trainable low-rank metric d(x, y) = ‖A(x−y)‖₂ (so the induced
//! W = AᵀA is positive semi-definite by construction) and KMeans grouping of
//! a bag's encoded instances into three latent groups in the A-subspace.
//!
//! Grouping is deterministic and order-invariant: initialization selects
//! points by value (max latent norm, then farthest-first), and every mean is
//! accumulated in canonical value order, so permuting a bag's rows permutes
//! the assignment vector without changing the partition or the centroids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cmp_slices, mean_of_rows, sum_sorted, Matrix, SeededStream};

/// Number of latent groups; the pipeline always partitions a bag three ways.
pub const NUM_GROUPS: usize = 3;

/// Iteration cap for Lloyd's algorithm.
pub const MAX_KMEANS_ITERS: usize = 100;

/// Low-rank factor A (r × d) of the metric matrix W = AᵀA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    a: Matrix,
}

impl MetricParams {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::Config("metric factor must be non-empty".into()));
        }
        Ok(MetricParams { a })
    }

    /// Seeded Gaussian draw with the rows orthonormalized, so the initial
    /// map is an exact isometry onto a random r-dimensional subspace (a
    /// random rotation when r = d). A raw Gaussian factor is Euclidean-like
    /// only in expectation; individual draws skew the latent geometry enough
    /// to visibly degrade the grouping. ‖A‖_F = √r holds by construction.
    pub fn init(rank: usize, dim: usize, stream: &mut SeededStream) -> Result<Self> {
        if rank > dim {
            return Err(Error::Config(format!(
                "metric rank {rank} cannot exceed dimension {dim}"
            )));
        }
        let std = (1.0 / dim as f64).sqrt();
        let mut rows: Vec<Vec<f64>> = (0..rank)
            .map(|_| (0..dim).map(|_| std * stream.draw_gaussian()).collect())
            .collect();
        // modified Gram-Schmidt
        for i in 0..rank {
            for j in 0..i {
                let proj: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                for (v, p) in rows[i].iter_mut().zip(&prev) {
                    *v -= proj * p;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numerical("degenerate metric initialization draw".into()));
            }
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        MetricParams::new(Matrix::from_rows(&rows)?)
    }

    /// Default projection rank for a given encoder width.
    pub fn default_rank(dim: usize) -> usize {
        dim.min(64)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn factor(&self) -> &Matrix {
        &self.a
    }

    pub fn factor_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    /// A·x, the latent-space image of x.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.a.matvec(x)
    }
}

/// d(x, y) = ‖A(x−y)‖₂ = √((x−y)ᵀAᵀA(x−y)).
pub fn metric_distance(metric: &MetricParams, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() != metric.dim() {
        return Err(Error::Dimension(format!(
            "metric_distance: metric dim {}, x {}, y {}",
            metric.dim(),
            x.len(),
            y.len()
        )));
    }
    let diff: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
    let projected = metric.project(&diff)?;
    Ok(projected.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Materializes W = AᵀA (d × d, symmetric, positive semi-definite).
pub fn materialize_psd(metric: &MetricParams) -> Matrix {
    let at = metric.a.transpose();
    at.matmul(&metric.a).expect("AᵀA dimensions always agree")
}

/// Rescales A to the Frobenius sphere ‖A‖_F = √r. Group assignments are
/// unchanged: positive scaling preserves distance ordering.
pub fn renormalize_metric(metric: &mut MetricParams) -> Result<()> {
    let norm = metric.a.frobenius_norm();
    if norm <= 0.0 {
        return Err(Error::DegenerateMetric("cannot renormalize a zero metric factor".into()));
    }
    let target = (metric.rank() as f64).sqrt();
    metric.a.scale_in_place(target / norm);
    Ok(())
}

/// Result of grouping one bag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupingResult {
    /// Per-instance group index in {0, 1, 2}.
    pub assignments: Vec<usize>,
    /// Group centroids in latent space (NUM_GROUPS × r).
    pub centroids: Matrix,
    /// Lloyd objective after each assignment round; non-increasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Groups left without members at termination.
    pub empty_groups: Vec<usize>,
}

impl GroupingResult {
    pub fn degenerate(&self) -> bool {
        !self.empty_groups.is_empty()
    }

    pub fn group_size(&self, k: usize) -> usize {
        self.assignments.iter().filter(|&&g| g == k).count()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Selects the index maximizing `key`, breaking ties by lexicographically
/// greatest latent coordinates. Order-invariant in the input rows.
fn argmax_by_value(latent: &[Vec<f64>], key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_key = key(0);
    for i in 1..latent.len() {
        let k = key(i);
        match k.total_cmp(&best_key) {
            std::cmp::Ordering::Greater => {
                best = i;
                best_key = k;
            }
            std::cmp::Ordering::Equal => {
                if cmp_slices(&latent[i], &latent[best]) == std::cmp::Ordering::Greater {
                    best = i;
                }
            }
            std::cmp::Ordering::Less => {}
        }
    }
    best
}

/// Groups a bag's rows into three clusters in the metric's latent space with
/// Lloyd's algorithm. Initialization is farthest-first seeded at the point of
/// maximal latent norm; it uses no randomness, so the partition depends only
/// on the multiset of rows.
pub fn kmeans_group(metric: &MetricParams, z: &Matrix) -> Result<GroupingResult> {
    let n = z.rows();
    if n < NUM_GROUPS {
        return Err(Error::Grouping(format!(
            "need at least {NUM_GROUPS} instances to form {NUM_GROUPS} groups, got {n}"
        )));
    }
    if z.cols() != metric.dim() {
        return Err(Error::Dimension(format!(
            "kmeans_group: metric dim {}, instance dim {}",
            metric.dim(),
            z.cols()
        )));
    }

    let latent: Vec<Vec<f64>> = (0..n)
        .map(|i| metric.project(z.row(i)))
        .collect::<Result<_>>()?;

    // Farthest-first seeding.
    let first = argmax_by_value(&latent, |i| latent[i].iter().map(|v| v * v).sum());
    let mut centers: Vec<Vec<f64>> = vec![latent[first].clone()];
    while centers.len() < NUM_GROUPS {
        let next = argmax_by_value(&latent, |i| {
            centers
                .iter()
                .map(|c| sq_dist(&latent[i], c))
                .fold(f64::INFINITY, f64::min)
        });
        centers.push(latent[next].clone());
    }

    let mut assignments = vec![0usize; n];
    let mut prev: Option<Vec<usize>> = None;
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_KMEANS_ITERS {
        iterations += 1;
        for (i, l) in latent.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(l, &centers[0]);
            for (k, c) in centers.iter().enumerate().skip(1) {
                let d = sq_dist(l, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            assignments[i] = best;
        }
        objective_trace.push(sum_sorted(
            latent
                .iter()
                .zip(&assignments)
                .map(|(l, &k)| sq_dist(l, &centers[k]))
                .collect(),
        ));
        if prev.as_deref() == Some(assignments.as_slice()) {
            break;
        }
        prev = Some(assignments.clone());

        // Centroid update; empty groups reseed at the point farthest from
        // its currently assigned centroid.
        let mut reseeded: Vec<usize> = Vec::new();
        for k in 0..NUM_GROUPS {
            let members: Vec<&[f64]> = latent
                .iter()
                .enumerate()
                .filter(|(i, _)| assignments[*i] == k)
                .map(|(_, l)| l.as_slice())
                .collect();
            if members.is_empty() {
                let far = argmax_by_value(&latent, |i| {
                    if reseeded.contains(&i) {
                        f64::NEG_INFINITY
                    } else {
                        sq_dist(&latent[i], &centers[assignments[i]])
                    }
                });
                reseeded.push(far);
                centers[k] = latent[far].clone();
            } else {
                centers[k] = mean_of_rows(&members);
            }
        }
    }

    let empty_groups: Vec<usize> = (0..NUM_GROUPS)
        .filter(|&k| !assignments.contains(&k))
        .collect();
    let centroids = Matrix::from_rows(&centers)?;
    Ok(GroupingResult { assignments, centroids, objective_trace, iterations, empty_groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric_from(rows: &[Vec<f64>]) -> MetricParams {
        MetricParams::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn identity_metric_is_euclidean() {
        let m = MetricParams::new(Matrix::identity(3)).unwrap();
        let d = metric_distance(&m, &[1.0, 2.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn distance_to_self_is_zero() {
        let m = metric_from(&[vec![0.3, -1.2], vec![2.0, 0.7]]);
        assert_eq!(metric_distance(&m, &[4.2, -0.1], &[4.2, -0.1]).unwrap(), 0.0);
    }

    #[test]
    fn rank_one_projection_by_hand() {
        let m = metric_from(&[vec![1.0, 0.0]]);
        let d = metric_distance(&m, &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = metric_from(&[vec![1.0, 0.0]]);
        assert!(metric_distance(&m, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn materialize_zero_and_rank_one() {
        let zero = metric_from(&[vec![0.0, 0.0]]);
        assert_eq!(materialize_psd(&zero).data(), &[0.0, 0.0, 0.0, 0.0]);

        // A = [[1,1]] -> W = [[1,1],[1,1]], eigenvalues {0, 2}
        let m = metric_from(&[vec![1.0, 1.0]]);
        let w = materialize_psd(&m);
        assert_eq!(w.data(), &[1.0, 1.0, 1.0, 1.0]);
        let trace = w.get(0, 0) + w.get(1, 1);
        let det = w.get(0, 0) * w.get(1, 1) - w.get(0, 1) * w.get(1, 0);
        assert!((trace - 2.0).abs() < 1e-12 && det.abs() < 1e-12);
    }

    #[test]
    fn psd_quadratic_form_non_negative() {
        let mut stream = SeededStream::new(11);
        for _ in 0..100 {
            let a_data: Vec<f64> = (0..2 * 4).map(|_| stream.draw_gaussian()).collect();
            let m = MetricParams::new(Matrix::from_vec(2, 4, a_data).unwrap()).unwrap();
            let w = materialize_psd(&m);
            let v: Vec<f64> = (0..4).map(|_| stream.draw_gaussian()).collect();
            let wv = w.matvec(&v).unwrap();
            let quad: f64 = v.iter().zip(&wv).map(|(a, b)| a * b).sum();
            assert!(quad >= -1e-9, "vᵀWv = {quad}");
        }
    }

    #[test]
    fn renormalize_fixpoint_and_projectivity() {
        let mut m = metric_from(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let before = m.factor().clone();
        renormalize_metric(&mut m).unwrap();
        assert_eq!(m.factor(), &before); // already on the sphere

        let mut scaled = metric_from(&[vec![5.0, 0.0], vec![0.0, 5.0]]);
        renormalize_metric(&mut scaled).unwrap();
        assert_eq!(scaled.factor(), &before);
    }

    #[test]
    fn renormalize_zero_metric_fails() {
        let mut m = metric_from(&[vec![0.0, 0.0]]);
        assert!(matches!(renormalize_metric(&mut m), Err(Error::DegenerateMetric(_))));
    }

    fn blob_data(centers: &[[f64; 2]], per_blob: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut stream = SeededStream::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                rows.push(vec![
                    c[0] + spread * stream.draw_gaussian(),
                    c[1] + spread * stream.draw_gaussian(),
                ]);
                labels.push(b);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (z, labels) = blob_data(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 8, 1.0, 4);
        let m = MetricParams::new(Matrix::identity(2)).unwrap();
        let result = kmeans_group(&m, &z).unwrap();
        assert!(result.empty_groups.is_empty());
        // partition must match blob membership exactly (up to group labels)
        let mut mapping = std::collections::HashMap::new();
        for (g, b) in result.assignments.iter().zip(labels.iter()) {
            let entry = mapping.entry(*b).or_insert(*g);
            assert_eq!(entry, g, "blob {b} split across groups");
        }
        assert_eq!(mapping.values().collect::<std::collections::HashSet<_>>().len(), 3);
    }

    #[test]
    fn kmeans_three_distinct_points() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let m = MetricParams::new(Matrix::identity(2)).unwrap();
        let result = kmeans_group(&m, &z).unwrap();
        assert!(result.empty_groups.is_empty());
        let last = *result.objective_trace.last().unwrap();
        assert_eq!(last, 0.0);
        let mut sorted = result.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_objective_trace_non_increasing() {
        let mut stream = SeededStream::new(9);
        for _ in 0..50 {
            let n = 5 + stream.draw_choice(20);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| stream.draw_gaussian()).collect())
                .collect();
            let z = Matrix::from_rows(&rows).unwrap();
            let a_data: Vec<f64> = (0..2 * 3).map(|_| stream.draw_gaussian()).collect();
            let m = MetricParams::new(Matrix::from_vec(2, 3, a_data).unwrap()).unwrap();
            let result = kmeans_group(&m, &z).unwrap();
            for w in result.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "trace increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_too_few_instances() {
        let z = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let m = MetricParams::new(Matrix::identity(1)).unwrap();
        assert!(matches!(kmeans_group(&m, &z), Err(Error::Grouping(_))));
    }

    #[test]
    fn kmeans_identical_points_flagged_degenerate() {
        let z = Matrix::from_rows(&vec![vec![1.0, 1.0]; 5]).unwrap();
        let m = MetricParams::new(Matrix::identity(2)).unwrap();
        let result = kmeans_group(&m, &z).unwrap();
        assert!(result.degenerate());
        assert!(result.assignments.iter().all(|&g| g == result.assignments[0]));
        for w in result.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn grouping_is_permutation_invariant() {
        let (z, _) = blob_data(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 6, 1.2, 21);
        let m = metric_from(&[vec![0.8, 0.1], vec![-0.2, 1.1]]);
        let base = kmeans_group(&m, &z).unwrap();

        let mut stream = SeededStream::new(33);
        let mut perm: Vec<usize> = (0..z.rows()).collect();
        stream.shuffle(&mut perm);
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| z.row(i).to_vec()).collect();
        let permuted = Matrix::from_rows(&permuted_rows).unwrap();
        let shuffled = kmeans_group(&m, &permuted).unwrap();

        // same group label for the same point, bit-identical centroids
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            assert_eq!(shuffled.assignments[new_pos], base.assignments[old_pos]);
        }
        assert_eq!(shuffled.centroids, base.centroids);
    }

    #[test]
    fn assignment_ordering_survives_rescaling() {
        let (z, _) = blob_data(&[[0.0, 0.0], [7.0, 1.0], [1.0, 7.0]], 5, 1.0, 2);
        let m = metric_from(&[vec![0.9, 0.2], vec![0.1, 1.3]]);
        let mut scaled = m.clone();
        scaled.factor_mut().scale_in_place(5.0);
        renormalize_metric(&mut scaled).unwrap();
        let a = kmeans_group(&m, &z).unwrap();
        let b = kmeans_group(&scaled, &z).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }
}
