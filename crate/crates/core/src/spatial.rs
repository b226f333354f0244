//! Uniform-cell point index for exact nearest-neighbor queries.
//!
//! The index only prunes: results are exact Euclidean distances. Queries
//! expand outward over Chebyshev shells of cells and stop once no
//! unscanned cell can beat the best distance found.

use crate::geom::Point3;
use rustc_hash::FxHashMap;

type Cell = (i32, i32, i32);

pub struct CellIndex<'a> {
    edge: f64,
    points: &'a [Point3],
    cells: FxHashMap<Cell, Vec<u32>>,
    min_cell: Cell,
    max_cell: Cell,
}

#[inline]
fn cell_of(p: Point3, edge: f64) -> Cell {
    (
        (p.x / edge).floor() as i32,
        (p.y / edge).floor() as i32,
        (p.z / edge).floor() as i32,
    )
}

impl<'a> CellIndex<'a> {
    /// Builds an index over `points` with the given cell edge length.
    /// `points` must be nonempty.
    pub fn build(points: &'a [Point3], edge: f64) -> CellIndex<'a> {
        assert!(!points.is_empty(), "cannot index an empty point set");
        assert!(edge > 0.0 && edge.is_finite());
        let mut cells: FxHashMap<Cell, Vec<u32>> = FxHashMap::default();
        let mut min_cell = (i32::MAX, i32::MAX, i32::MAX);
        let mut max_cell = (i32::MIN, i32::MIN, i32::MIN);
        for (i, &p) in points.iter().enumerate() {
            let c = cell_of(p, edge);
            min_cell = (min_cell.0.min(c.0), min_cell.1.min(c.1), min_cell.2.min(c.2));
            max_cell = (max_cell.0.max(c.0), max_cell.1.max(c.1), max_cell.2.max(c.2));
            cells.entry(c).or_default().push(i as u32);
        }
        CellIndex {
            edge,
            points,
            cells,
            min_cell,
            max_cell,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact distance to the nearest indexed point.
    pub fn nearest_distance(&self, p: Point3) -> f64 {
        let center = cell_of(p, self.edge);
        let s_max = self.max_shell(center);
        let mut best = f64::INFINITY;
        let mut shell = 0;
        loop {
            self.scan_shell(center, shell, |q| {
                let d2 = (q - p).norm_squared();
                if d2 < best {
                    best = d2;
                }
            });
            // points in shells > `shell` are farther than shell * edge away
            if best.sqrt() <= shell as f64 * self.edge || shell >= s_max {
                return best.sqrt();
            }
            shell += 1;
        }
    }

    /// True iff some indexed point lies within `radius` (inclusive) of `p`.
    /// Equivalent to `nearest_distance(p) <= radius` but able to stop at
    /// the first hit and bounded to the shells that can matter.
    pub fn any_within(&self, p: Point3, radius: f64) -> bool {
        let center = cell_of(p, self.edge);
        let reach = (radius / self.edge).ceil() as i32 + 1;
        let s_max = self.max_shell(center).min(reach);
        let r2 = radius * radius;
        for shell in 0..=s_max {
            // cells in this shell start at (shell-1)*edge away; beyond the
            // radius they cannot contain a hit
            if shell > 0 && (shell - 1) as f64 * self.edge > radius {
                return false;
            }
            let mut hit = false;
            self.scan_shell(center, shell, |q| {
                if (q - p).norm_squared() <= r2 {
                    hit = true;
                }
            });
            if hit {
                return true;
            }
        }
        false
    }

    fn max_shell(&self, center: Cell) -> i32 {
        let dx = (center.0 - self.min_cell.0).abs().max((center.0 - self.max_cell.0).abs());
        let dy = (center.1 - self.min_cell.1).abs().max((center.1 - self.max_cell.1).abs());
        let dz = (center.2 - self.min_cell.2).abs().max((center.2 - self.max_cell.2).abs());
        dx.max(dy).max(dz)
    }

    fn scan_shell(&self, center: Cell, shell: i32, mut f: impl FnMut(Point3)) {
        let mut visit = |c: Cell| {
            if let Some(slots) = self.cells.get(&c) {
                for &i in slots {
                    f(self.points[i as usize]);
                }
            }
        };
        if shell == 0 {
            visit(center);
            return;
        }
        let s = shell;
        for dx in [-s, s] {
            for dy in -s..=s {
                for dz in -s..=s {
                    visit((center.0 + dx, center.1 + dy, center.2 + dz));
                }
            }
        }
        for dy in [-s, s] {
            for dx in -s + 1..=s - 1 {
                for dz in -s..=s {
                    visit((center.0 + dx, center.1 + dy, center.2 + dz));
                }
            }
        }
        for dz in [-s, s] {
            for dx in -s + 1..=s - 1 {
                for dy in -s + 1..=s - 1 {
                    visit((center.0 + dx, center.1 + dy, center.2 + dz));
                }
            }
        }
    }
}

/// Brute-force nearest-neighbor distance, the oracle the index is tested
/// against and a fallback for tiny point sets.
pub fn brute_force_nearest(points: &[Point3], p: Point3) -> f64 {
    points
        .iter()
        .map(|q| (q - p).norm())
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_on_trivial_cases() {
        let pts = [Point3::new(0.0, 0.0, 0.0)];
        let idx = CellIndex::build(&pts, 0.5);
        assert_eq!(idx.nearest_distance(Point3::new(0.0, 0.0, 0.0)), 0.0);
        assert!((idx.nearest_distance(Point3::new(3.0, 4.0, 0.0)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..1000 {
            let n = rng.gen_range(1..60);
            let pts: Vec<Point3> = (0..n)
                .map(|_| {
                    Point3::new(
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    )
                })
                .collect();
            let edge = rng.gen_range(0.2..2.0);
            let idx = CellIndex::build(&pts, edge);
            let q = Point3::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
            );
            let fast = idx.nearest_distance(q);
            let slow = brute_force_nearest(&pts, q);
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: index {fast} vs brute force {slow}"
            );
            // the capped query agrees with the exact distance
            let radius = rng.gen_range(0.1..4.0);
            assert_eq!(idx.any_within(q, radius), slow <= radius, "trial {trial}");
        }
    }

    #[test]
    fn distant_query_terminates() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let idx = CellIndex::build(&pts, 0.25);
        let d = idx.nearest_distance(Point3::new(100.0, -50.0, 30.0));
        assert!((d - brute_force_nearest(&pts, Point3::new(100.0, -50.0, 30.0))).abs() < 1e-12);
        assert!(!idx.any_within(Point3::new(100.0, -50.0, 30.0), 5.0));
    }
}
