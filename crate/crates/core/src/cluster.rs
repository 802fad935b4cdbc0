//! Per-object embeddings, spherical k-means and medoid selection.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of frames whose features are averaged per object by default.
pub const DEFAULT_FRAME_COUNT: usize = 32;
pub const DEFAULT_MAX_ITERS: usize = 100;

const EMBEDDING_NORM_TOLERANCE: f64 = 1e-6;
const DEGENERATE_MEAN: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("no input vectors")]
    EmptyInput,
    #[error("mean of normalized inputs has norm below 1e-8")]
    DegenerateMean,
    #[error("input {0} has zero or non-finite norm")]
    ZeroVector(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding for {0} is not unit-norm")]
    NotUnitNorm(String),
    #[error("duplicate object id {0}")]
    DuplicateId(String),
    #[error("k = {k} exceeds the {n} available embeddings")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("cluster is empty")]
    EmptyCluster,
}

/// Unit-norm appearance embedding of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEmbedding {
    id: String,
    vector: Vec<f64>,
}

impl ObjectEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Result<Self, ClusterError> {
        let id = id.into();
        let norm = l2(&vector);
        if vector.is_empty() || !((norm - 1.0).abs() <= EMBEDDING_NORM_TOLERANCE) {
            return Err(ClusterError::NotUnitNorm(id));
        }
        Ok(Self { id, vector })
    }

    /// Normalizes `vector` before storing it.
    pub fn normalized(id: impl Into<String>, vector: Vec<f64>) -> Result<Self, ClusterError> {
        let norm = l2(&vector);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(ClusterError::ZeroVector(0));
        }
        Ok(Self {
            id: id.into(),
            vector: vector.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }
}

fn l2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - dot(a, b)).max(0.0)
}

/// Normalizes each frame feature, averages, and renormalizes the mean.
pub fn aggregate_embedding<V: AsRef<[f64]>>(frames: &[V]) -> Result<Vec<f64>, ClusterError> {
    let first = frames.first().ok_or(ClusterError::EmptyInput)?;
    let dim = first.as_ref().len();
    let mut mean = vec![0.0; dim];
    for (i, frame) in frames.iter().enumerate() {
        let f = frame.as_ref();
        if f.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                found: f.len(),
            });
        }
        let n = l2(f);
        if !(n.is_finite() && n > 0.0) {
            return Err(ClusterError::ZeroVector(i));
        }
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    for m in mean.iter_mut() {
        *m /= frames.len() as f64;
    }
    let norm = l2(&mean);
    if !(norm >= DEGENERATE_MEAN) {
        return Err(ClusterError::DegenerateMean);
    }
    Ok(mean.into_iter().map(|m| m / norm).collect())
}

/// Result of spherical k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    /// Sum of cosine distances to the assigned centroid after every
    /// assignment and update step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    /// Member ids of cluster `c`, sorted.
    pub fn members(&self, c: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &a)| a == c)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Default cluster count: one per hundred objects, at least one.
pub fn default_k(n: usize) -> usize {
    n.div_ceil(100).max(1)
}

/// Spherical k-means with k-means++ seeding under cosine distance.
///
/// Embeddings are processed in object-id order so the result depends only
/// on the set of inputs and the seed.
pub fn kmeans_cosine(
    embeddings: &[ObjectEmbedding],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Clustering, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = embeddings.len();
    if k > n {
        return Err(ClusterError::TooFewPoints { k, n });
    }
    let mut sorted: Vec<&ObjectEmbedding> = embeddings.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for w in sorted.windows(2) {
        if w[0].id == w[1].id {
            return Err(ClusterError::DuplicateId(w[0].id.clone()));
        }
    }
    let dim = sorted[0].vector.len();
    if let Some(e) = sorted.iter().find(|e| e.vector.len() != dim) {
        return Err(ClusterError::DimensionMismatch {
            expected: dim,
            found: e.vector.len(),
        });
    }
    let points: Vec<&[f64]> = sorted.iter().map(|e| e.vector.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut assign = assign_all(&points, &centroids);
    repair_empty(&points, &mut assign, &mut centroids);
    let mut history = vec![objective(&points, &assign, &centroids)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        update_centroids(&points, &assign, &mut centroids);
        history.push(objective(&points, &assign, &centroids));
        let mut next = assign_all(&points, &centroids);
        repair_empty(&points, &mut next, &mut centroids);
        let changed = next != assign;
        assign = next;
        history.push(objective(&points, &assign, &centroids));
        if !changed {
            break;
        }
    }

    Ok(Clustering {
        k,
        assignments: sorted
            .iter()
            .zip(&assign)
            .map(|(e, &c)| (e.id.clone(), c))
            .collect(),
        centroids,
        seed,
        objective_history: history,
        iterations,
    })
}

fn seed_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| cosine_distance(p, points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let weights: Vec<f64> = dist.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` past the final sum
            pick.unwrap_or_else(|| weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(cosine_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let s = dot(p, centroid);
                if s > best_sim {
                    best = c;
                    best_sim = s;
                }
            }
            best
        })
        .collect()
}

/// Moves the point farthest from its own centroid into each empty cluster.
fn repair_empty(points: &[&[f64]], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    for c in 0..centroids.len() {
        if assign.contains(&c) {
            continue;
        }
        let mut sizes = vec![0usize; centroids.len()];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assign[i]] < 2 {
                continue;
            }
            let d = cosine_distance(p, &centroids[assign[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            assign[i] = c;
            centroids[c] = points[i].to_vec();
        }
    }
}

fn update_centroids(points: &[&[f64]], assign: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    for (p, &a) in points.iter().zip(assign) {
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (centroid, sum) in centroids.iter_mut().zip(sums) {
        let norm = l2(&sum);
        if norm >= DEGENERATE_MEAN {
            *centroid = sum.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn objective(points: &[&[f64]], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &a)| 1.0 - dot(p, &centroids[a]))
        .sum()
}

/// The member with the smallest mean cosine distance to all other members;
/// ties go to the lexicographically smallest id.
pub fn medoid(cluster: &[ObjectEmbedding]) -> Result<String, ClusterError> {
    let mut best: Option<(f64, &str)> = None;
    for (i, a) in cluster.iter().enumerate() {
        let mut total = 0.0;
        for (j, b) in cluster.iter().enumerate() {
            if i != j {
                total += 1.0 - dot(&a.vector, &b.vector);
            }
        }
        let mean = if cluster.len() > 1 {
            total / (cluster.len() - 1) as f64
        } else {
            0.0
        };
        let better = match best {
            None => true,
            Some((m, id)) => mean < m || (mean == m && a.id.as_str() < id),
        };
        if better {
            best = Some((mean, &a.id));
        }
    }
    best.map(|(_, id)| String::from(id))
        .ok_or(ClusterError::EmptyCluster)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, v: &[f64]) -> ObjectEmbedding {
        ObjectEmbedding::normalized(id, v.to_vec()).unwrap()
    }

    #[test]
    fn aggregate_edge_cases() {
        assert_eq!(aggregate_embedding(&[vec![3.0, 4.0]]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(
            aggregate_embedding(&[vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap(),
            vec![0.6, 0.8]
        );
        assert_eq!(
            aggregate_embedding(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
            Err(ClusterError::DegenerateMean)
        );
        assert_eq!(
            aggregate_embedding::<Vec<f64>>(&[]),
            Err(ClusterError::EmptyInput)
        );
    }

    #[test]
    fn aggregate_ignores_per_frame_scale() {
        let a = aggregate_embedding(&[vec![1.0, 2.0, 0.5], vec![-0.3, 1.0, 2.0]]).unwrap();
        let b = aggregate_embedding(&[vec![10.0, 20.0, 5.0], vec![-0.03, 0.1, 0.2]]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_centroid_is_global_mean() {
        let es = [emb("a", &[1.0, 0.0]), emb("b", &[0.0, 1.0]), emb("c", &[1.0, 1.0])];
        let c = kmeans_cosine(&es, 1, 3, 100).unwrap();
        assert!(c.assignments.values().all(|&a| a == 0));
        let mean = aggregate_embedding(&[es[0].vector(), es[1].vector(), es[2].vector()]).unwrap();
        for (x, y) in c.centroids[0].iter().zip(&mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let es = [emb("a", &[1.0, 0.0])];
        assert_eq!(
            kmeans_cosine(&es, 2, 0, 10),
            Err(ClusterError::TooFewPoints { k: 2, n: 1 })
        );
        assert_eq!(medoid(&[]), Err(ClusterError::EmptyCluster));
        let dup = [emb("a", &[1.0, 0.0]), emb("a", &[0.0, 1.0])];
        assert!(matches!(kmeans_cosine(&dup, 1, 0, 10), Err(ClusterError::DuplicateId(_))));
    }

    #[test]
    fn no_empty_clusters_with_duplicates() {
        let es: Vec<_> = (0..6)
            .map(|i| emb(&alloc::format!("o{i}"), &[1.0, 0.0, 0.0]))
            .collect();
        let c = kmeans_cosine(&es, 3, 11, 50).unwrap();
        for cluster in 0..3 {
            assert!(!c.members(cluster).is_empty());
        }
    }

    #[test]
    fn medoid_rules() {
        assert_eq!(medoid(&[emb("z", &[1.0, 0.0])]).unwrap(), "z");
        let pair = [emb("b", &[1.0, 0.0]), emb("a", &[0.0, 1.0])];
        assert_eq!(medoid(&pair).unwrap(), "a");
        let three = [
            emb("x", &[1.0, 0.0]),
            emb("y", &[1.0, 1.0]),
            emb("w", &[0.0, 1.0]),
        ];
        assert_eq!(medoid(&three).unwrap(), "y");
    }

    #[test]
    fn default_k_rounds_up() {
        assert_eq!(default_k(0), 1);
        assert_eq!(default_k(100), 1);
        assert_eq!(default_k(101), 2);
    }
}
