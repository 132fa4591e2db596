//! Vector math shared by the detector, the steering pipeline and the models.
//!
//! Storage is `f32`; reductions (dot products, norms, entropies, distances)
//! accumulate in `f64` so that results do not depend on summation order
//! quirks of the caller.

use std::ops::Deref;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// Lloyd iteration cap for [`kmeans`].
pub const KMEANS_MAX_ITER: usize = 300;

/// A finite, fixed-dimension `f32` vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(domain("vector must have positive dimension"));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(domain(format!("non-finite entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector must have positive dimension");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f32) -> Vector {
        Vector(self.0.iter().map(|x| x * factor).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

impl Deref for Vector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = crate::error::LpsrError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Vec<f32> {
        v.0
    }
}

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

pub fn squared_distance(u: &[f32], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

/// Cosine similarity `<u/|u|, v/|v|>`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(domain(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(domain("cosine of a zero vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn unit_normalize(u: &[f32]) -> Result<Vector> {
    let n = norm(u);
    if n == 0.0 {
        return Err(domain("cannot normalize a zero vector"));
    }
    Vector::new(u.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Shannon entropy (nats) of `softmax(logits)`.
///
/// Uses max-subtraction, so very negative entries (e.g. `-1e9` used as a
/// mask) contribute exactly zero mass.
pub fn softmax_entropy(logits: &[f32]) -> f64 {
    assert!(!logits.is_empty(), "softmax over an empty vocabulary");
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &l in logits {
        let shifted = l as f64 - max;
        let e = shifted.exp();
        z += e;
        if e > 0.0 {
            weighted += e * shifted;
        }
    }
    (z.ln() - weighted / z).max(0.0)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub centroids: Vec<Vector>,
    pub assignments: Vec<usize>,
    /// Sum over points of the squared distance to the assigned centroid.
    pub inertia: f64,
    /// Which restart produced this result.
    pub restart: usize,
    pub iterations: usize,
}

impl ClusterResult {
    /// Number of points assigned to each centroid.
    pub fn populations(&self) -> Vec<usize> {
        let mut counts = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }
}

/// One Lloyd run: centroids, assignments and the inertia after every
/// assignment step.
pub(crate) struct LloydRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

fn assign(points: &[Vector], centroids: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, slot) in points.iter().zip(out.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter().enumerate() {
            let d = squared_distance(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *slot = best;
        inertia += best_d;
    }
    inertia
}

pub(crate) fn lloyd(points: &[Vector], k: usize, rng: &mut ChaCha8Rng) -> LloydRun {
    let n = points.len();
    let dim = points[0].dim();
    let mut centroids: Vec<Vec<f64>> = sample(rng, n, k)
        .into_iter()
        .map(|i| points[i].iter().map(|&x| x as f64).collect())
        .collect();
    let mut assignments = vec![0usize; n];
    let mut history = vec![assign(points, &centroids, &mut assignments)];

    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / c).collect();
            }
        }
        // Empty clusters take the point farthest from its own centroid.
        let mut taken = vec![false; n];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let d = squared_distance(p, &centroids[assignments[i]]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                taken[i] = true;
                centroids[j] = points[i].iter().map(|&x| x as f64).collect();
            }
        }

        let mut next = vec![0usize; n];
        let inertia = assign(points, &centroids, &mut next);
        history.push(inertia);
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }

    LloydRun {
        centroids,
        assignments,
        inertia_history: history,
    }
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Lloyd's k-means with `restarts` seeded random initializations; the
/// lowest-inertia run wins (lowest restart index on ties).
pub fn kmeans(points: &[Vector], k: usize, restarts: usize, seed: u64) -> Result<ClusterResult> {
    if k == 0 {
        return Err(config("k must be positive"));
    }
    if restarts == 0 {
        return Err(config("restarts must be positive"));
    }
    if points.len() < k {
        return Err(config(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(domain("k-means points have mixed dimensions"));
    }

    let runs: Vec<LloydRun> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(points, k, &mut restart_rng(seed, r)))
        .collect();

    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.inertia_history.last() < runs[best].inertia_history.last() {
            best = r;
        }
    }
    let run = runs.into_iter().nth(best).expect("at least one restart");
    let iterations = run.inertia_history.len() - 1;
    let centroids = run
        .centroids
        .iter()
        .map(|c| Vector::new(c.iter().map(|&x| x as f32).collect()))
        .collect::<Result<Vec<_>>>()?;
    // Inertia against the centroids actually returned.
    let inertia = points
        .iter()
        .zip(&run.assignments)
        .map(|(p, &a)| {
            let c: Vec<f64> = centroids[a].iter().map(|&x| x as f64).collect();
            squared_distance(p, &c)
        })
        .sum();
    Ok(ClusterResult {
        centroids,
        assignments: run.assignments,
        inertia,
        restart: best,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f32]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basic_cases() {
        let u = [0.3f32, -1.2, 2.0];
        let neg: Vec<f32> = u.iter().map(|x| -x).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn unit_normalize_cases() {
        let n = unit_normalize(&[3.0, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-7 && (n[1] - 0.8).abs() < 1e-7);
        let again = unit_normalize(&n).unwrap();
        assert_eq!(again, n);
        assert!(unit_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f32::NAN]).is_err());
        assert!(Vector::new(vec![f32::INFINITY]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert!(serde_json::from_str::<Vector>("[1.0, 2.0]").is_ok());
    }

    #[test]
    fn entropy_reference_values() {
        assert!((softmax_entropy(&[0.7; 8]) - 8f64.ln()).abs() < 1e-9);
        let mut peaked = vec![0.0f32; 16];
        peaked[3] = 50.0;
        assert!(softmax_entropy(&peaked) < 1e-18);
        let mut two = vec![-1e9f32; 10];
        two[2] = 1.5;
        two[7] = 1.5;
        assert!((softmax_entropy(&two) - 2f64.ln()).abs() < 1e-9);
        assert_eq!(softmax_entropy(&[4.0]), 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = vec![v(&[1.0, 2.0]), v(&[3.0, 0.0]), v(&[2.0, 7.0])];
        let r = kmeans(&pts, 1, 3, 9).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-6);
        assert!((r.centroids[0][1] - 3.0).abs() < 1e-6);
        assert_eq!(r.assignments, vec![0, 0, 0]);
    }

    #[test]
    fn kmeans_k_equals_n_has_zero_inertia() {
        let pts: Vec<Vector> = (0..6).map(|i| v(&[i as f32, (i * i) as f32])).collect();
        let r = kmeans(&pts, 6, 2, 1).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn kmeans_rejects_bad_config() {
        let pts = vec![v(&[1.0]), v(&[2.0])];
        assert!(kmeans(&pts, 3, 1, 0).is_err());
        assert!(kmeans(&pts, 0, 1, 0).is_err());
        assert!(kmeans(&pts, 1, 0, 0).is_err());
    }

    /// Exhaustive oracle: try every assignment of the points to two labels
    /// and return the minimum within-cluster sum of squares.
    fn brute_force_two_means(points: &[Vector]) -> f64 {
        let n = points.len();
        let dim = points[0].dim();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut total = 0.0;
            for label in [0, 1] {
                let members: Vec<&Vector> = (0..n)
                    .filter(|&i| ((mask >> i) & 1) as usize == label)
                    .map(|i| &points[i])
                    .collect();
                let mut mean = vec![0.0f64; dim];
                for m in &members {
                    for (a, &x) in mean.iter_mut().zip(m.iter()) {
                        *a += x as f64 / members.len() as f64;
                    }
                }
                total += members
                    .iter()
                    .map(|m| squared_distance(m, &mean))
                    .sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn kmeans_two_clouds_matches_exhaustive_assignment() {
        let cloud_a = [[0.1, 0.2], [-0.2, 0.1], [0.0, -0.15], [0.15, 0.05], [-0.1, -0.1]];
        let cloud_b = [[5.1, 4.9], [4.8, 5.2], [5.0, 5.0], [5.25, 4.85], [4.9, 5.1], [5.05, 5.05]];
        let pts: Vec<Vector> = cloud_a
            .iter()
            .chain(cloud_b.iter())
            .map(|p| v(&[p[0], p[1]]))
            .collect();
        let r = kmeans(&pts, 2, 20, 0).unwrap();
        let oracle = brute_force_two_means(&pts);
        assert!((r.inertia - oracle).abs() < 1e-5, "{} vs {}", r.inertia, oracle);

        let mean = |c: &[[f32; 2]]| {
            let n = c.len() as f32;
            [c.iter().map(|p| p[0]).sum::<f32>() / n, c.iter().map(|p| p[1]).sum::<f32>() / n]
        };
        let (ma, mb) = (mean(&cloud_a), mean(&cloud_b));
        let ca = r.assignments[0];
        let cb = r.assignments[5];
        assert_ne!(ca, cb);
        assert!((r.centroids[ca][0] - ma[0]).abs() < 1e-5 && (r.centroids[ca][1] - ma[1]).abs() < 1e-5);
        assert!((r.centroids[cb][0] - mb[0]).abs() < 1e-5 && (r.centroids[cb][1] - mb[1]).abs() < 1e-5);
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Six copies of one point plus one outlier: some restarts start with
        // duplicate centroids, which leaves a cluster empty.
        let mut pts = vec![v(&[1.0, 1.0]); 6];
        pts.push(v(&[9.0, 9.0]));
        let r = kmeans(&pts, 2, 5, 3).unwrap();
        assert_eq!(r.inertia, 0.0);
        let pops = r.populations();
        assert!(pops.contains(&1) && pops.contains(&6));
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vector>> {
        (1usize..5).prop_flat_map(|dim| {
            prop::collection::vec(
                prop::collection::vec(-10.0f32..10.0, dim).prop_map(|x| Vector::new(x).unwrap()),
                4..40,
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            u in prop::collection::vec(-5.0f32..5.0, 6),
            w in prop::collection::vec(-5.0f32..5.0, 6),
            a in 0.01f32..100.0,
            b in 0.01f32..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&w) > 1e-3);
            let su: Vec<f32> = u.iter().map(|x| x * a).collect();
            let sw: Vec<f32> = w.iter().map(|x| x * b).collect();
            let base = cosine(&u, &w).unwrap();
            prop_assert!((cosine(&su, &sw).unwrap() - base).abs() < 1e-5);
            prop_assert!((cosine(&w, &u).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn entropy_shift_invariant_and_bounded(
            logits in prop::collection::vec(-20.0f32..20.0, 1..64),
            c in -100.0f32..100.0,
        ) {
            let h = softmax_entropy(&logits);
            let shifted: Vec<f32> = logits.iter().map(|x| x + c).collect();
            prop_assert!((softmax_entropy(&shifted) - h).abs() < 1e-5);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (logits.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn lloyd_inertia_never_increases(points in arb_points(), k in 1usize..4, seed in 0u64..1000) {
            prop_assume!(points.len() >= k);
            let run = lloyd(&points, k, &mut restart_rng(seed, 0));
            for w in run.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", run.inertia_history);
            }
        }

        #[test]
        fn kmeans_is_reproducible_and_consistent(points in arb_points(), k in 1usize..4, seed in 0u64..1000) {
            prop_assume!(points.len() >= k);
            let a = kmeans(&points, k, 4, seed).unwrap();
            let b = kmeans(&points, k, 4, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.assignments.iter().all(|&j| j < k));
        }
    }
}
