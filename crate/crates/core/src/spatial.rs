//! Uniform-grid neighbour search for atom-level distance queries.

use std::collections::HashMap;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Points bucketed into cubic cells of edge `cell`.
pub struct Grid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> Grid<'a> {
    pub fn new(points: &'a [[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, buckets }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// Visits indices of points in cells that may lie within `radius` of `p`.
    fn candidates(&self, p: &[f64; 3], radius: f64, mut f: impl FnMut(usize) -> bool) {
        let lo = Self::key(&p.map(|v| v - radius), self.cell);
        let hi = Self::key(&p.map(|v| v + radius), self.cell);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(b) = self.buckets.get(&[x, y, z]) {
                        for &i in b {
                            if !f(i) {
                                return;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Whether any point lies within distance `radius` (inclusive) of `p`.
    pub fn any_within(&self, p: &[f64; 3], radius: f64) -> bool {
        let r2 = radius * radius;
        let mut hit = false;
        self.candidates(p, radius, |i| {
            hit = dist2(p, &self.points[i]) <= r2;
            !hit
        });
        hit
    }

    /// Smallest distance from `p` to any point, if one lies within `radius`.
    pub fn nearest_within(&self, p: &[f64; 3], radius: f64) -> Option<f64> {
        let r2 = radius * radius;
        let mut best: Option<f64> = None;
        self.candidates(p, radius, |i| {
            let d = dist2(p, &self.points[i]);
            if d <= r2 && best.map_or(true, |b| d < b) {
                best = Some(d);
            }
            true
        });
        best.map(f64::sqrt)
    }
}

/// Minimum distance between the two sets when it is at most `cutoff`.
pub fn min_distance_within(a: &[[f64; 3]], b: &[[f64; 3]], cutoff: f64) -> Option<f64> {
    let grid = Grid::new(b, cutoff);
    a.iter().filter_map(|p| grid.nearest_within(p, cutoff)).min_by(f64::total_cmp)
}

/// Number of points of `a` within `radius` of some point of `b`.
pub fn count_within(a: &[[f64; 3]], b: &[[f64; 3]], radius: f64) -> usize {
    let grid = Grid::new(b, radius);
    a.iter().filter(|p| grid.any_within(p, radius)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_scan() {
        let a: Vec<[f64; 3]> = (0..40).map(|i| [(i as f64 * 0.71).sin() * 6.0, (i as f64 * 1.3).cos() * 6.0, i as f64 * 0.2]).collect();
        let b: Vec<[f64; 3]> = (0..30).map(|i| [(i as f64 * 0.37).cos() * 5.0 + 1.0, (i as f64).sin() * 4.0, -(i as f64) * 0.1 + 3.0]).collect();
        for cutoff in [0.5, 1.7, 5.0, 50.0] {
            let brute = a.iter().flat_map(|p| b.iter().map(move |q| dist2(p, q).sqrt())).fold(f64::INFINITY, f64::min);
            let expect = (brute <= cutoff).then_some(brute);
            assert_eq!(min_distance_within(&a, &b, cutoff), expect);
            let count = a.iter().filter(|p| b.iter().any(|q| dist2(p, q) <= cutoff * cutoff)).count();
            assert_eq!(count_within(&a, &b, cutoff), count);
        }
    }
}
