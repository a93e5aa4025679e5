//! Uniform spatial grid for nearest-neighbor queries over point sets.
//!
//! Built once per frame and shared read-only. Ties are broken by the lowest
//! point index so queries are deterministic; brute-force scans remain the
//! test oracle for this index.

use crate::mesh::{bounding_box, Vec3};

#[derive(Debug, Clone)]
pub struct UniformGrid {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: cell start offsets into `order`.
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl UniformGrid {
    /// Builds a grid sized so the average cell holds a handful of points.
    pub fn build(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "spatial grid over empty point set");
        let (lo, hi) = bounding_box(points);
        let extent = hi - lo;
        let target = (points.len() as f64).cbrt().ceil().max(1.0) as usize;
        let max_extent = extent.x.max(extent.y).max(extent.z).max(1e-9);
        let cell = (max_extent / target as f64).max(1e-9);
        let dims = [
            ((extent.x / cell).floor() as usize + 1).max(1),
            ((extent.y / cell).floor() as usize + 1).max(1),
            ((extent.z / cell).floor() as usize + 1).max(1),
        ];

        let ncells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &Vec3| -> usize {
            let ix = (((p.x - lo.x) / cell) as usize).min(dims[0] - 1);
            let iy = (((p.y - lo.y) / cell) as usize).min(dims[1] - 1);
            let iz = (((p.z - lo.z) / cell) as usize).min(dims[2] - 1);
            (iz * dims[1] + iy) * dims[0] + ix
        };

        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut order = vec![0u32; points.len()];
        let mut cursor = counts.clone();
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[cursor[c]] = i as u32;
            cursor[c] += 1;
        }

        Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn cell_coords(&self, p: &Vec3) -> [isize; 3] {
        [
            ((p.x - self.origin.x) / self.cell).floor() as isize,
            ((p.y - self.origin.y) / self.cell).floor() as isize,
            ((p.z - self.origin.z) / self.cell).floor() as isize,
        ]
    }

    /// Index and squared distance of the point nearest to `q`.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let center = self.cell_coords(q);
        let mut best = (usize::MAX, f64::INFINITY);

        let visit = |cx: isize, cy: isize, cz: isize, best: &mut (usize, f64)| {
            if cx < 0
                || cy < 0
                || cz < 0
                || cx >= self.dims[0] as isize
                || cy >= self.dims[1] as isize
                || cz >= self.dims[2] as isize
            {
                return;
            }
            let c = ((cz as usize * self.dims[1]) + cy as usize) * self.dims[0] + cx as usize;
            for &oi in &self.order[self.starts[c]..self.starts[c + 1]] {
                let i = oi as usize;
                let d2 = (self.points[i] - q).norm_squared();
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
        };

        // Rings must reach every grid cell even when the query lies outside
        // the bounding box.
        let max_ring = (0..3)
            .map(|a| center[a].max(self.dims[a] as isize - 1 - center[a]))
            .max()
            .unwrap_or(1)
            .max(1)
            + 1;
        for ring in 0..=max_ring {
            // Points in farther rings are at least (ring-1)·cell away.
            if best.0 != usize::MAX {
                let reachable = (ring - 1).max(0) as f64 * self.cell;
                if reachable * reachable > best.1 {
                    break;
                }
            }
            if ring == 0 {
                visit(center[0], center[1], center[2], &mut best);
                continue;
            }
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        visit(center[0] + dx, center[1] + dy, center[2] + dz, &mut best);
                    }
                }
            }
        }
        debug_assert!(best.0 != usize::MAX);
        best
    }
}

/// Brute-force nearest neighbor with the same lowest-index tie-break.
pub fn nearest_brute_force(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && i < best.0) {
            best = (i, d2);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..100 {
            let n = rng.random_range(1..200);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.2..0.2),
                    )
                })
                .collect();
            let grid = UniformGrid::build(&pts);
            for _ in 0..20 {
                let q = Vec3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-0.5..0.5),
                );
                let (gi, gd) = grid.nearest(&q);
                let (bi, bd) = nearest_brute_force(&pts, &q);
                assert_eq!(gi, bi, "case {case}");
                assert_eq!(gd, bd, "case {case}");
            }
        }
    }

    #[test]
    fn single_point_and_coincident_points() {
        let pts = vec![Vec3::zeros()];
        let grid = UniformGrid::build(&pts);
        assert_eq!(grid.nearest(&Vec3::new(5.0, 5.0, 5.0)).0, 0);

        // Exact ties resolve to the lowest index.
        let pts = vec![Vec3::new(1.0, 0.0, 0.0); 4];
        let grid = UniformGrid::build(&pts);
        assert_eq!(grid.nearest(&Vec3::zeros()).0, 0);
    }
}
