//! Least-squares alignment and trimaps against brute-force oracles.

use e2p_core::losses::{ssi_l1_depth, trimap_from_alpha, AlignmentFit, FitGradient};
use e2p_core::{DenseMap, SeededRng, Task};

fn column(v: Vec<f64>) -> DenseMap {
    DenseMap::from_vec(1, v.len(), 1, v, Task::Depth).unwrap()
}

fn sse(a: &[f64], y: &[f64], s: f64, t: f64) -> f64 {
    a.iter().zip(y).map(|(a, y)| (s * a + t - y).powi(2)).sum()
}

#[test]
fn fit_minimizes_squared_error() {
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let a: Vec<f64> = (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.5, 4.0)).collect();
        let fit = AlignmentFit::fit(&column(a.clone()), &column(y.clone()), None).unwrap();
        let best = sse(&a, &y, fit.scale, fit.shift);
        // Coordinate probing around the optimum never finds anything lower.
        for &h in &[1e-1, 1e-3, 1e-5] {
            for (ds, dt) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (-h, h), (h, -h), (-h, -h)] {
                assert!(sse(&a, &y, fit.scale + ds, fit.shift + dt) >= best - 1e-12);
            }
        }
        // Normal equations solved by Cramer's rule.
        let n = a.len() as f64;
        let (sa, sy) = (a.iter().sum::<f64>(), y.iter().sum::<f64>());
        let saa: f64 = a.iter().map(|v| v * v).sum();
        let say: f64 = a.iter().zip(&y).map(|(a, y)| a * y).sum();
        let det = saa * n - sa * sa;
        let s = (say * n - sa * sy) / det;
        let t = (saa * sy - sa * say) / det;
        assert!((s - fit.scale).abs() < 1e-9 && (t - fit.shift).abs() < 1e-9);
    }
}

#[test]
fn ssi_l1_is_affine_invariant_over_100_pairs() {
    let mut rng = SeededRng::new(4);
    let y = column((0..16).map(|_| rng.uniform_range(0.5, 8.0)).collect());
    let p = column((0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
    let base = ssi_l1_depth(&p, &y, None, FitGradient::Full).unwrap().0.value;
    for _ in 0..100 {
        let mut a = rng.uniform_range(-5.0, 5.0);
        if a.abs() < 0.1 {
            a = 0.1f64.copysign(a);
        }
        let b = rng.uniform_range(-10.0, 10.0);
        let moved = ssi_l1_depth(&p.map(|v| a * v + b), &y, None, FitGradient::Full).unwrap().0.value;
        assert!((moved - base).abs() <= 1e-9 * base.max(1.0), "a={a} b={b}: {moved} vs {base}");
    }
}

/// Unknown iff some opposite-class pixel lies within Euclidean distance
/// `max(radius, 1)`; computed by scanning every pixel pair.
fn brute_trimap(fg: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let reach = radius.max(1) as f64;
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            (0..h * w).any(|j| {
                let (rr, cc) = ((j / w) as f64, (j % w) as f64);
                fg[j] != fg[i] && ((r - rr).powi(2) + (c - cc).powi(2)).sqrt() <= reach
            })
        })
        .collect()
}

#[test]
fn trimap_matches_pairwise_scan() {
    let mut rng = SeededRng::new(8);
    for radius in [0, 1, 2, 3] {
        for _ in 0..5 {
            let (h, w) = (9, 11);
            let alpha: Vec<f64> = (0..h * w).map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 }).collect();
            let fg: Vec<bool> = alpha.iter().map(|&a| a > 0.5).collect();
            let map = DenseMap::from_vec(h, w, 1, alpha, Task::Matting).unwrap();
            let t = trimap_from_alpha(&map, radius);
            let want = brute_trimap(&fg, h, w, radius);
            for (i, &u) in want.iter().enumerate() {
                assert_eq!(t.is_unknown(i), u, "radius {radius} pixel {i}");
            }
        }
    }
}
