//! Sparse multi-resolution feature grid.
//!
//! Each level keeps a D-dimensional feature per allocated voxel corner,
//! addressed by exact integer lattice keys (no lossy hashing, so there is
//! no collision aliasing to reason about). Querying trilinearly
//! interpolates the containing voxel's corners at every level and sums the
//! per-level results. Vertices that were never allocated contribute zero
//! and are reported as absent in the interpolation stencil.

use crate::config::MapConfig;
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::scan::ScanSequence;
use rand::Rng;
use rand::SeedableRng;
use rustc_hash::{FxHashMap, FxHashSet};

/// Marker for a stencil corner whose vertex was never allocated.
pub const ABSENT: u32 = u32::MAX;

/// Feature init range: near-zero so an untrained field is flat.
const FEATURE_INIT_SCALE: f64 = 1e-4;

/// RNG stream id used when drawing initial features (see `training` for
/// the other streams derived from the map seed).
pub(crate) const GRID_RNG_STREAM: u64 = 2;

pub type LatticeKey = (i32, i32, i32);

/// Identifies one grid vertex: resolution level plus lattice coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VertexKey {
    pub level: usize,
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

#[derive(Debug, Clone)]
pub struct GridLevel {
    pub voxel_size: f64,
    vertex_index: FxHashMap<LatticeKey, u32>,
    /// Corner slots of fully allocated voxels, for one-lookup interpolation.
    voxel_corners: FxHashMap<LatticeKey, [u32; 8]>,
    /// Vertex keys in insertion order (serialization order).
    keys: Vec<LatticeKey>,
    /// len = vertex_count * D for all four buffers below.
    pub features: Vec<f64>,
    pub grad: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl GridLevel {
    fn new(voxel_size: f64) -> GridLevel {
        GridLevel {
            voxel_size,
            vertex_index: FxHashMap::default(),
            voxel_corners: FxHashMap::default(),
            keys: Vec::new(),
            features: Vec::new(),
            grad: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[LatticeKey] {
        &self.keys
    }

    pub fn vertex_slot(&self, key: LatticeKey) -> Option<u32> {
        self.vertex_index.get(&key).copied()
    }

    fn insert_vertex(&mut self, key: LatticeKey, feature_dim: usize, rng: &mut impl Rng) -> u32 {
        if let Some(&slot) = self.vertex_index.get(&key) {
            return slot;
        }
        let slot = self.keys.len() as u32;
        self.keys.push(key);
        self.vertex_index.insert(key, slot);
        for _ in 0..feature_dim {
            self.features
                .push(rng.gen_range(-FEATURE_INIT_SCALE..FEATURE_INIT_SCALE));
        }
        self.grad.resize(self.features.len(), 0.0);
        self.adam_m.resize(self.features.len(), 0.0);
        self.adam_v.resize(self.features.len(), 0.0);
        slot
    }

    fn insert_voxel(&mut self, voxel: LatticeKey, feature_dim: usize, rng: &mut impl Rng) {
        if self.voxel_corners.contains_key(&voxel) {
            return;
        }
        let mut slots = [0u32; 8];
        for (c, slot) in slots.iter_mut().enumerate() {
            *slot = self.insert_vertex(corner_of(voxel, c), feature_dim, rng);
        }
        self.voxel_corners.insert(voxel, slots);
    }

    /// Corner slots for a voxel, falling back to per-vertex lookups when
    /// the voxel itself was never allocated (e.g. mesher queries in the
    /// dilation ring).
    fn corner_slots(&self, voxel: LatticeKey) -> [u32; 8] {
        if let Some(&slots) = self.voxel_corners.get(&voxel) {
            return slots;
        }
        let mut slots = [ABSENT; 8];
        for (c, slot) in slots.iter_mut().enumerate() {
            if let Some(&s) = self.vertex_index.get(&corner_of(voxel, c)) {
                *slot = s;
            }
        }
        slots
    }
}

#[inline]
fn corner_of(voxel: LatticeKey, corner: usize) -> LatticeKey {
    (
        voxel.0 + (corner & 1) as i32,
        voxel.1 + ((corner >> 1) & 1) as i32,
        voxel.2 + ((corner >> 2) & 1) as i32,
    )
}

#[inline]
pub fn lattice_of(p: Point3, voxel_size: f64) -> LatticeKey {
    (
        (p.x / voxel_size).floor() as i32,
        (p.y / voxel_size).floor() as i32,
        (p.z / voxel_size).floor() as i32,
    )
}

/// Interpolation record for one level: the containing voxel, the corner
/// slots (or [`ABSENT`]) and the trilinear weights, in corner-bit order.
#[derive(Debug, Clone, Copy)]
pub struct LevelStencil {
    pub voxel: LatticeKey,
    pub indices: [u32; 8],
    pub weights: [f64; 8],
}

impl LevelStencil {
    pub fn corner_key(&self, corner: usize) -> LatticeKey {
        corner_of(self.voxel, corner)
    }
}

/// Per-query interpolation stencil across all levels.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub levels: Vec<LevelStencil>,
}

#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub feature_dim: usize,
    pub levels: Vec<GridLevel>,
    /// Finest-level voxels containing at least one scan endpoint; this is
    /// the meshing mask, not the allocation record.
    occupancy: FxHashSet<LatticeKey>,
}

impl FeatureGrid {
    /// Allocates voxels (at every level) around every scan endpoint and
    /// every training-sample position, so that all supervised queries land
    /// on fully backed voxels. Initial features are small uniform noise
    /// drawn deterministically from `cfg.seed`.
    pub fn allocate<'a>(
        seq: &ScanSequence,
        sample_positions: impl Iterator<Item = &'a Point3>,
        cfg: &MapConfig,
    ) -> Result<FeatureGrid> {
        if seq.scans.is_empty() {
            return Err(Error::InvalidInput("cannot allocate around an empty sequence".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(GRID_RNG_STREAM);
        let mut grid = FeatureGrid {
            feature_dim: cfg.feature_dim,
            levels: (0..cfg.levels)
                .map(|l| GridLevel::new(cfg.voxel_size(l)))
                .collect(),
            occupancy: FxHashSet::default(),
        };
        for scan in &seq.scans {
            for p in &scan.points_world {
                grid.allocate_around(*p, &mut rng);
                grid.occupancy
                    .insert(lattice_of(*p, grid.levels[0].voxel_size));
            }
        }
        for p in sample_positions {
            grid.allocate_around(*p, &mut rng);
        }
        Ok(grid)
    }

    /// An empty grid (tests and miniature models).
    pub fn empty(cfg: &MapConfig) -> FeatureGrid {
        FeatureGrid {
            feature_dim: cfg.feature_dim,
            levels: (0..cfg.levels)
                .map(|l| GridLevel::new(cfg.voxel_size(l)))
                .collect(),
            occupancy: FxHashSet::default(),
        }
    }

    pub fn allocate_around(&mut self, p: Point3, rng: &mut impl Rng) {
        let dim = self.feature_dim;
        for level in &mut self.levels {
            let voxel = lattice_of(p, level.voxel_size);
            level.insert_voxel(voxel, dim, rng);
        }
    }

    pub fn mark_occupied(&mut self, p: Point3) {
        self.occupancy
            .insert(lattice_of(p, self.levels[0].voxel_size));
    }

    pub fn occupancy(&self) -> &FxHashSet<LatticeKey> {
        &self.occupancy
    }

    pub fn occupancy_sorted(&self) -> Vec<LatticeKey> {
        let mut keys: Vec<LatticeKey> = self.occupancy.iter().copied().collect();
        keys.sort_unstable();
        keys
    }

    pub(crate) fn set_occupancy(&mut self, keys: impl IntoIterator<Item = LatticeKey>) {
        self.occupancy = keys.into_iter().collect();
    }

    pub fn total_vertices(&self) -> usize {
        self.levels.iter().map(|l| l.vertex_count()).sum()
    }

    /// Trilinear interpolation summed over levels. Writes the fused
    /// feature into `feature` (length D) and records the stencil for the
    /// reverse pass. Absent corners contribute zero.
    pub fn interpolate_into(&self, p: Point3, stencil: &mut Stencil, feature: &mut [f64]) {
        debug_assert_eq!(feature.len(), self.feature_dim);
        feature.fill(0.0);
        stencil.levels.clear();
        for level in &self.levels {
            let inv = 1.0 / level.voxel_size;
            let gx = p.x * inv;
            let gy = p.y * inv;
            let gz = p.z * inv;
            let vx = gx.floor();
            let vy = gy.floor();
            let vz = gz.floor();
            let voxel = (vx as i32, vy as i32, vz as i32);
            let fx = gx - vx;
            let fy = gy - vy;
            let fz = gz - vz;
            let wx = [1.0 - fx, fx];
            let wy = [1.0 - fy, fy];
            let wz = [1.0 - fz, fz];
            let indices = level.corner_slots(voxel);
            let mut weights = [0.0f64; 8];
            for c in 0..8 {
                let w = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1];
                weights[c] = w;
                let idx = indices[c];
                if idx != ABSENT && w != 0.0 {
                    let base = idx as usize * self.feature_dim;
                    let f = &level.features[base..base + self.feature_dim];
                    for (dst, &src) in feature.iter_mut().zip(f) {
                        *dst += w * src;
                    }
                }
            }
            stencil.levels.push(LevelStencil {
                voxel,
                indices,
                weights,
            });
        }
    }

    /// Convenience wrapper returning freshly allocated outputs.
    pub fn interpolate(&self, p: Point3) -> (Vec<f64>, Stencil) {
        let mut stencil = Stencil::default();
        let mut feature = vec![0.0; self.feature_dim];
        self.interpolate_into(p, &mut stencil, &mut feature);
        (feature, stencil)
    }

    /// Reverse pass of [`FeatureGrid::interpolate_into`]: adds
    /// `weight * upstream` into the gradient of every present vertex.
    pub fn scatter_grad(&mut self, stencil: &Stencil, upstream: &[f64]) {
        debug_assert_eq!(upstream.len(), self.feature_dim);
        let dim = self.feature_dim;
        for (level, ls) in self.levels.iter_mut().zip(&stencil.levels) {
            for c in 0..8 {
                let idx = ls.indices[c];
                if idx != ABSENT {
                    let w = ls.weights[c];
                    let base = idx as usize * dim;
                    let g = &mut level.grad[base..base + dim];
                    for (dst, &u) in g.iter_mut().zip(upstream) {
                        *dst += w * u;
                    }
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for level in &mut self.levels {
            level.grad.fill(0.0);
        }
    }

    pub(crate) fn push_level_raw(&mut self, voxel_size: f64, keys: Vec<LatticeKey>, features: Vec<f64>) {
        let mut level = GridLevel::new(voxel_size);
        assert_eq!(features.len(), keys.len() * self.feature_dim);
        for (slot, key) in keys.iter().enumerate() {
            level.vertex_index.insert(*key, slot as u32);
        }
        level.keys = keys;
        level.grad = vec![0.0; features.len()];
        level.adam_m = vec![0.0; features.len()];
        level.adam_v = vec![0.0; features.len()];
        level.features = features;
        level.rebuild_voxel_corners();
        self.levels.push(level);
    }
}

impl GridLevel {
    /// Rebuilds the voxel -> corner-slot cache from the vertex set
    /// (checkpoint load path). A voxel enters the cache iff all 8 of its
    /// corners exist, matching the allocation invariant.
    fn rebuild_voxel_corners(&mut self) {
        self.voxel_corners.clear();
        for &key in &self.keys {
            // each vertex is corner 0 of exactly one candidate voxel
            let mut slots = [ABSENT; 8];
            let mut complete = true;
            for (c, slot) in slots.iter_mut().enumerate() {
                match self.vertex_index.get(&corner_of(key, c)) {
                    Some(&s) => *slot = s,
                    None => {
                        complete = false;
                        break;
                    }
                }
            }
            if complete {
                self.voxel_corners.insert(key, slots);
            }
        }
    }
}
