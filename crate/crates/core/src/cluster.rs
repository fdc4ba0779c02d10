//! Weighted k-means with k-means++ seeding.

use rand::Rng;

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeans {
    /// Row-major `k × dim` centroids.
    pub centroids: Vec<Vec<f64>>,
    /// Index of the nearest centroid for every input point.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Weighted Lloyd iterations from a k-means++ start.
///
/// Seeding stops early once every remaining point coincides with a chosen
/// centroid, so fewer than `k` centroids come back when the input has fewer
/// than `k` distinct points. Empty clusters keep their previous centroid.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[&[f64]],
    weights: &[f64],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> KMeans {
    assert_eq!(points.len(), weights.len());
    assert!(k >= 1 && !points.is_empty());
    let mut centroids = plus_plus(points, weights, k, rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let dim = points[0].len();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut mass = vec![0.0; centroids.len()];
        for ((p, &w), &a) in points.iter().zip(weights).zip(&assignments) {
            mass[a] += w;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += w * x;
            }
        }
        for (c, (s, m)) in centroids.iter_mut().zip(sums.into_iter().zip(mass)) {
            if m > 0.0 {
                *c = s.into_iter().map(|x| x / m).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    KMeans {
        centroids,
        assignments,
        iterations,
    }
}

fn pick<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &s) in scores.iter().enumerate() {
        if s <= 0.0 {
            continue;
        }
        last = Some(i);
        if target < s {
            return Some(i);
        }
        target -= s;
    }
    last
}

fn plus_plus<R: Rng + ?Sized>(points: &[&[f64]], weights: &[f64], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let first = pick(weights, rng).unwrap_or(0);
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let Some(next) = pick(&scores, rng) else {
            break;
        };
        let c = points[next].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_two_blobs() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { 0.0 } else { 100.0 } + (i % 10) as f64 * 0.1])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let km = kmeans(&refs, &vec![1.0; 20], 2, 100, &mut rng);
        let mut c: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.45).abs() < 1e-12);
        assert!((c[1] - 100.45).abs() < 1e-12);
    }

    #[test]
    fn collapses_on_identical_points() {
        let pts = vec![vec![5.0]; 6];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let km = kmeans(&refs, &[1.0; 6], 3, 10, &mut rng);
        assert_eq!(km.centroids, vec![vec![5.0]]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(nearest(&[1.0], &[vec![0.0], vec![2.0]]), 0);
    }
}
