use canon9d_core::cluster::{kmeans_cosine, medoid, ObjectEmbedding};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Two planted groups with verified cosine bounds; returns embeddings and labels.
fn planted(rng: &mut ChaCha8Rng, per_group: usize, dim: usize) -> (Vec<ObjectEmbedding>, Vec<usize>) {
    let a = normalize((0..dim).map(|_| gaussian(rng)).collect());
    let mut b: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let proj = dot(&a, &b);
    for (bi, ai) in b.iter_mut().zip(&a) {
        *bi -= proj * ai;
    }
    let b = normalize(b);
    let mut out = Vec::new();
    let mut labels = Vec::new();
    for (g, center) in [&a, &b].into_iter().enumerate() {
        for i in 0..per_group {
            let v = normalize(center.iter().map(|c| c + 0.01 * gaussian(rng)).collect());
            out.push(ObjectEmbedding::new(format!("g{g}_{i:03}"), v).unwrap());
            labels.push(g);
        }
    }
    for i in 0..out.len() {
        for j in 0..out.len() {
            let c = dot(out[i].vector(), out[j].vector());
            if labels[i] == labels[j] {
                assert!(c > 0.99);
            } else {
                assert!(c < 0.1);
            }
        }
    }
    (out, labels)
}

fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

#[test]
fn planted_partition_is_recovered_for_every_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (embs, labels) = planted(&mut rng, 25, 16);
    for seed in 0..20 {
        let c = kmeans_cosine(&embs, 2, seed, 100).unwrap();
        let got: Vec<usize> = embs.iter().map(|e| c.assignments[e.id()]).collect();
        assert_eq!(rand_index(&got, &labels), 1.0, "seed {seed}");
        assert!(c.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

#[test]
fn same_seed_same_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let embs: Vec<_> = (0..60)
        .map(|i| {
            ObjectEmbedding::normalized(format!("o{i}"), (0..8).map(|_| gaussian(&mut rng)).collect())
                .unwrap()
        })
        .collect();
    let a = kmeans_cosine(&embs, 5, 99, 100).unwrap();
    let b = kmeans_cosine(&embs, 5, 99, 100).unwrap();
    assert_eq!(a, b);
    let mut reversed = embs.clone();
    reversed.reverse();
    assert_eq!(kmeans_cosine(&reversed, 5, 99, 100).unwrap().assignments, a.assignments);
}

fn random_embeddings(seed: u64, n: usize, dim: usize) -> Vec<ObjectEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            ObjectEmbedding::normalized(
                format!("e{:02}", rng.random_range(0..1000) * 100 + i),
                (0..dim).map(|_| gaussian(&mut rng)).collect(),
            )
            .unwrap()
        })
        .collect()
}

/// Exhaustive medoid: mean distance to others, ties by id.
fn medoid_oracle(embs: &[ObjectEmbedding]) -> String {
    let mut scores: Vec<(f64, String)> = embs
        .iter()
        .map(|a| {
            let others: Vec<f64> = embs
                .iter()
                .filter(|b| b.id() != a.id())
                .map(|b| 1.0 - dot(a.vector(), b.vector()))
                .collect();
            let mean = if others.is_empty() {
                0.0
            } else {
                others.iter().sum::<f64>() / others.len() as f64
            };
            (mean, a.id().to_string())
        })
        .collect();
    scores.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
    scores[0].1.clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_never_increases(seed in 0u64..10_000, k in 1usize..6) {
        let embs = random_embeddings(seed, 40, 6);
        let c = kmeans_cosine(&embs, k, seed, 100).unwrap();
        prop_assert!(c.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for cluster in 0..k {
            prop_assert!(!c.members(cluster).is_empty());
        }
        for centroid in &c.centroids {
            prop_assert!((dot(centroid, centroid).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn assignments_invariant_under_common_rotation(seed in 0u64..10_000, angle in 0.0f64..std::f64::consts::TAU) {
        let embs = random_embeddings(seed, 30, 3);
        let (s, c) = angle.sin_cos();
        let rotated: Vec<_> = embs
            .iter()
            .map(|e| {
                let v = e.vector();
                let r = vec![c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]];
                ObjectEmbedding::normalized(e.id(), r).unwrap()
            })
            .collect();
        let a = kmeans_cosine(&embs, 3, seed, 100).unwrap();
        let b = kmeans_cosine(&rotated, 3, seed, 100).unwrap();
        prop_assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn medoid_matches_exhaustive_scan(seed in 0u64..10_000, n in 1usize..12) {
        let embs = random_embeddings(seed, n, 5);
        let m = medoid(&embs).unwrap();
        prop_assert!(embs.iter().any(|e| e.id() == m));
        prop_assert_eq!(m, medoid_oracle(&embs));
    }
}
