use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lorafuse::kmeans::{kmeans, medoids, silhouette_score, KMeansConfig};
use lorafuse::matrix::squared_distance;

fn random_points(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
        .collect()
}

fn partition_cost(points: &[Vec<f64>], mask: u32) -> f64 {
    let mut cost = 0.0;
    for side in [true, false] {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| (mask >> i & 1 == 1) == side)
            .map(|(_, p)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean = [0, 1].map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64);
        cost += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
    }
    cost
}

#[test]
fn six_points_reach_the_exhaustive_optimum() {
    for seed in 0..10 {
        let points = random_points(seed, 6);
        let best = (0..1u32 << 6)
            .map(|m| partition_cost(&points, m))
            .fold(f64::INFINITY, f64::min);
        let got = kmeans(&points, 2, &KMeansConfig::default()).unwrap();
        assert!((got.wcss - best).abs() < 1e-9, "seed {seed}: {} vs {best}", got.wcss);
    }
}

#[test]
fn wcss_history_never_increases() {
    let points = random_points(5, 40);
    let model = kmeans(&points, 4, &KMeansConfig::default()).unwrap();
    assert!(!model.wcss_history.is_empty());
    assert!(model.wcss_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!((model.wcss_history.last().unwrap() - model.wcss).abs() < 1e-9);
}

#[test]
fn medoids_match_linear_scan() {
    let points = random_points(8, 6);
    let model = kmeans(&points, 2, &KMeansConfig::default()).unwrap();
    let mut want = Vec::new();
    for j in 0..2 {
        let mut best: Option<(usize, f64)> = None;
        for (i, (p, &c)) in points.iter().zip(&model.assignments).enumerate() {
            if c != j {
                continue;
            }
            let d = squared_distance(p, &model.centroids[j]);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        want.extend(best.map(|(i, _)| i));
    }
    assert_eq!(medoids(&model, &points), want);
}

#[test]
fn kmeans_is_seed_deterministic() {
    let points = random_points(2, 30);
    let config = KMeansConfig {
        seed: 11,
        ..KMeansConfig::default()
    };
    assert_eq!(
        kmeans(&points, 3, &config).unwrap(),
        kmeans(&points, 3, &config).unwrap()
    );
}

#[test]
fn silhouette_of_two_tight_pairs() {
    // a = 1 inside each pair, b = mean of 9 and 10 to the other pair
    let points = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
    let s = silhouette_score(&points, &[0, 0, 1, 1]).unwrap();
    let outer = 1.0 - 1.0 / 10.5;
    let inner = 1.0 - 1.0 / 9.5;
    assert!((s - (outer + inner) / 2.0).abs() < 1e-12);
}
