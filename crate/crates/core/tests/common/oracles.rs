//! Quadratic-time reference implementations of the retrieval metrics.

#![allow(dead_code)]

/// Hits among the first `k` ranks, recounted from scratch.
fn hits_at(rel: &[bool], k: usize) -> usize {
    rel[..k].iter().filter(|&&r| r).count()
}

pub fn ap(rel: &[bool], total: usize) -> f64 {
    (1..=rel.len()).filter(|&k| rel[k - 1]).map(|k| hits_at(rel, k) as f64 / k as f64).sum::<f64>() / total as f64
}

pub fn map(queries: &[(Vec<bool>, usize)]) -> f64 {
    let kept: Vec<_> = queries.iter().filter(|q| q.1 > 0).collect();
    kept.iter().map(|(r, t)| ap(r, *t)).sum::<f64>() / kept.len() as f64
}

fn precision_at(rel: &[bool], total: usize, r: f64) -> f64 {
    let pts: Vec<(f64, f64)> = (1..=rel.len())
        .map(|k| (hits_at(rel, k) as f64 / total as f64, hits_at(rel, k) as f64 / k as f64))
        .collect();
    if pts.is_empty() || r > pts[pts.len() - 1].0 {
        return 0.0;
    }
    for k in (0..pts.len() - 1).rev() {
        let ((r0, p0), (r1, p1)) = (pts[k], pts[k + 1]);
        if r0 < r && r <= r1 {
            return p0 + (p1 - p0) * (r - r0) / (r1 - r0);
        }
    }
    pts[0].1
}

pub fn pr(queries: &[(Vec<bool>, usize)], points: usize) -> Vec<(f64, f64)> {
    let kept: Vec<_> = queries.iter().filter(|q| q.1 > 0).collect();
    (0..points)
        .map(|j| {
            let r = j as f64 / (points - 1) as f64;
            (r, kept.iter().map(|(rel, t)| precision_at(rel, *t, r)).sum::<f64>() / kept.len() as f64)
        })
        .collect()
}

/// τ_b by enumerating every pair.
pub fn tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut p, mut q, mut t, mut u) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            match (dx == 0.0, dy == 0.0) {
                (true, true) => {}
                (true, false) => t += 1,
                (false, true) => u += 1,
                (false, false) if (dx > 0.0) == (dy > 0.0) => p += 1,
                _ => q += 1,
            }
        }
    }
    let den = ((p + q + t) as f64) * ((p + q + u) as f64);
    (den > 0.0).then(|| (p - q) as f64 / den.sqrt())
}
