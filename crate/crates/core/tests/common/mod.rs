#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rwb::measures::euclidean;
use rwb::DiscreteMeasure;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rwb::experiments::stream_rng(seed, 0)
}

/// `s` points uniform in `[0, scale]^d` with weights bounded away from zero.
pub fn random_measure(rng: &mut ChaCha8Rng, s: usize, d: usize, scale: f64) -> DiscreteMeasure {
    let pts = (0..s)
        .map(|_| (0..d).map(|_| rng.random_range(0.0..scale)).collect())
        .collect();
    let w = (0..s).map(|_| rng.random_range(0.1..1.0)).collect();
    DiscreteMeasure::from_unnormalized(pts, w).unwrap()
}

/// Largest distance between any two support points of the measures.
pub fn joint_diameter(measures: &[&DiscreteMeasure]) -> f64 {
    let pts: Vec<&[f64]> = measures.iter().flat_map(|m| m.points()).collect();
    let mut d: f64 = 0.0;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            d = d.max(euclidean(a, b));
        }
    }
    d
}

/// `PASS`/`FAIL` line in a fixed format.
pub fn report(id: &str, ok: bool, detail: &str) {
    println!("criterion {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}
