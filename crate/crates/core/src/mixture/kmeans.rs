use rand::Rng;

use super::linalg::{sq_dist, Vec4};

/// Greedy k-means++ seeding followed by a fixed number of Lloyd iterations.
///
/// Each seeding step draws `2 + ln k` candidates with probability proportional
/// to squared distance and keeps the one that most reduces the total squared
/// distance. Returns the centroids and the final hard labels. Empty clusters
/// keep their previous centroid.
pub fn kmeans_pp<R: Rng>(data: &[Vec4], k: usize, lloyd_iters: usize, rng: &mut R) -> (Vec<Vec4>, Vec<usize>) {
    let n = data.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = Vec::with_capacity(k);
    centroids.push(data[rng.random_range(0..n)]);

    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    let mut candidate_d2 = vec![0.0; n];
    let mut best_d2 = vec![0.0; n];
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                sample_weighted(&d2, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..n)
            };
            let c = data[pick];
            let mut potential = 0.0;
            for ((slot, x), &old) in candidate_d2.iter_mut().zip(data).zip(&d2) {
                *slot = sq_dist(x, &c).min(old);
                potential += *slot;
            }
            if best.is_none_or(|(p, _)| potential < p) {
                best = Some((potential, pick));
                std::mem::swap(&mut best_d2, &mut candidate_d2);
            }
        }
        let (_, pick) = best.expect("at least one trial");
        std::mem::swap(&mut d2, &mut best_d2);
        centroids.push(data[pick]);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..lloyd_iters {
        assign_nearest(data, &centroids, &mut labels);
        let mut sums = vec![[0.0; 4]; k];
        let mut counts = vec![0usize; k];
        for (x, &j) in data.iter().zip(&labels) {
            counts[j] += 1;
            for d in 0..4 {
                sums[j][d] += x[d];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..4 {
                    centroids[j][d] = sums[j][d] / counts[j] as f64;
                }
            }
        }
    }
    assign_nearest(data, &centroids, &mut labels);
    (centroids, labels)
}

/// First index at which the running sum of `weights` exceeds `target`.
fn sample_weighted(weights: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.len() - 1
}

fn assign_nearest(data: &[Vec4], centroids: &[Vec4], labels: &mut [usize]) {
    for (x, label) in data.iter().zip(labels.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *label = best;
    }
}
