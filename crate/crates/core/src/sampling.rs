//! Ray sampling: turns posed scans into the tagged 4D training pool.
//!
//! Each ray is split at the truncation band into a near-surface region
//! and a free-space region. Free samples close to the sensor (dense
//! coverage) whose same-scan nearest neighbor is farther than the
//! truncation distance are re-tagged as certain free space; those are
//! safe to supervise on the static channel directly, because no surface
//! was observed anywhere near them in that very scan. The pool is built
//! once up front; training shuffles it per epoch.

use crate::config::MapConfig;
use crate::geom::Point3;
use crate::scan::{Scan, ScanSequence};
use crate::spatial::CellIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// RNG stream base for per-scan sampling streams.
pub(crate) const POOL_RNG_STREAM_BASE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Surface,
    Free,
    CertainFree,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSample {
    /// Sample position, world frame.
    pub q: Point3,
    /// Frame index of the originating scan.
    pub t: u32,
    /// Projective signed distance to the ray endpoint: positive in front
    /// of the surface, negative behind it.
    pub d_surf: f64,
    pub region: Region,
}

#[derive(Debug, Default)]
pub struct SamplePool {
    pub surface: Vec<TrainSample>,
    pub free: Vec<TrainSample>,
    pub certain: Vec<TrainSample>,
    /// Rays shorter than the truncation distance, skipped outright.
    pub skipped_rays: usize,
}

impl SamplePool {
    pub fn total(&self) -> usize {
        self.surface.len() + self.free.len() + self.certain.len()
    }

    /// All sample positions, in pool order (surface, free, certain).
    pub fn positions(&self) -> impl Iterator<Item = &Point3> {
        self.surface
            .iter()
            .chain(self.free.iter())
            .chain(self.certain.iter())
            .map(|s| &s.q)
    }

    pub fn sample(&self, id: usize) -> &TrainSample {
        if id < self.surface.len() {
            &self.surface[id]
        } else if id < self.surface.len() + self.free.len() {
            &self.free[id - self.surface.len()]
        } else {
            &self.certain[id - self.surface.len() - self.free.len()]
        }
    }
}

/// Projective signed distance of the sample at ray parameter `lambda`
/// on a ray of length `range`.
#[inline]
pub fn projective_distance(lambda: f64, range: f64) -> f64 {
    (1.0 - lambda) * range
}

/// Draws the per-ray samples: `surface_samples` in the truncation band
/// around the endpoint and `free_samples` in the free section. Returns
/// false (drawing nothing) for rays shorter than the truncation distance,
/// whose truncation band would cross the sensor.
pub fn sample_ray(
    origin: Point3,
    endpoint: Point3,
    frame: u32,
    tau: f64,
    surface_samples: usize,
    free_samples: usize,
    rng: &mut impl Rng,
    out: &mut Vec<TrainSample>,
) -> bool {
    let dir = endpoint - origin;
    let range = dir.norm();
    if range <= tau {
        return false;
    }
    let tau_bar = tau / range;
    for _ in 0..surface_samples {
        let lambda = rng.gen_range(1.0 - tau_bar..1.0 + tau_bar);
        out.push(TrainSample {
            q: origin + lambda * dir,
            t: frame,
            d_surf: projective_distance(lambda, range),
            region: Region::Surface,
        });
    }
    for _ in 0..free_samples {
        let lambda = loop {
            let l = rng.gen_range(0.0..1.0 - tau_bar);
            if l > 0.0 {
                break l;
            }
        };
        out.push(TrainSample {
            q: origin + lambda * dir,
            t: frame,
            d_surf: projective_distance(lambda, range),
            region: Region::Free,
        });
    }
    true
}

/// Exact Euclidean distance from `p` to the nearest endpoint of `scan`.
pub fn nearest_in_scan(scan: &Scan, p: Point3) -> f64 {
    // any positive edge gives the exact answer; a meter is a reasonable
    // cell size for scan-density point sets
    CellIndex::build(&scan.points_world, 1.0).nearest_distance(p)
}

/// Samples every ray of every scan and applies the dense / certain-free
/// split. Deterministic for a fixed config seed: scans draw from their
/// own seeded streams and are concatenated in frame order.
pub fn build_pool(seq: &ScanSequence, cfg: &MapConfig) -> SamplePool {
    let per_scan: Vec<(Vec<TrainSample>, usize)> = seq
        .scans
        .par_iter()
        .map(|scan| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(POOL_RNG_STREAM_BASE + scan.frame as u64);
            let mut samples = Vec::with_capacity(
                scan.points_world.len() * (cfg.surface_samples + cfg.free_samples),
            );
            let mut skipped = 0usize;
            for &endpoint in &scan.points_world {
                if !sample_ray(
                    scan.origin,
                    endpoint,
                    scan.frame as u32,
                    cfg.truncation,
                    cfg.surface_samples,
                    cfg.free_samples,
                    &mut rng,
                    &mut samples,
                ) {
                    skipped += 1;
                }
            }
            // certain-free re-tagging against this scan's own endpoints
            let index = CellIndex::build(&scan.points_world, cfg.truncation);
            for s in &mut samples {
                if s.region == Region::Free {
                    let dense = (s.q - scan.origin).norm() < cfg.r_dense;
                    if dense && !index.any_within(s.q, cfg.truncation) {
                        s.region = Region::CertainFree;
                    }
                }
            }
            (samples, skipped)
        })
        .collect();

    let mut pool = SamplePool::default();
    for (samples, skipped) in per_scan {
        pool.skipped_rays += skipped;
        for s in samples {
            match s.region {
                Region::Surface => pool.surface.push(s),
                Region::Free => pool.free.push(s),
                Region::CertainFree => pool.certain.push(s),
            }
        }
    }
    pool
}
