//! The assembled 4D field: grid features -> decoder -> temporal basis.
//!
//! A query F(p, t) interpolates the grid at p, decodes the fused feature
//! into K weights and dots them with the basis row of frame t. The first
//! weight alone is the static signed distance. Spatial gradients are
//! always central finite differences of F (six extra queries); there is
//! no analytic positional derivative anywhere in the system, and during
//! training each probe query participates in backpropagation.

use crate::basis::{accumulate_basis_grad_into, BasisTable};
use crate::config::MapConfig;
use crate::error::{Error, Result};
use crate::geom::{Point3, Vec3};
use crate::grid::{FeatureGrid, Stencil, ABSENT};
use crate::io::PointClass;
use crate::mlp::{Mlp, MlpTape};
use rand::SeedableRng;

/// RNG stream id for decoder initialization.
pub(crate) const MLP_RNG_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct FieldModel {
    pub cfg: MapConfig,
    pub grid: FeatureGrid,
    pub mlp: Mlp,
    pub basis: BasisTable,
}

/// Reusable per-query workspace so hot loops never allocate.
#[derive(Debug, Clone, Default)]
pub struct QueryScratch {
    pub stencil: Stencil,
    pub feature: Vec<f64>,
    pub tape: MlpTape,
    dweights: Vec<f64>,
    dfeature: Vec<f64>,
}

impl QueryScratch {
    pub fn for_model(model: &FieldModel) -> QueryScratch {
        QueryScratch {
            stencil: Stencil::default(),
            feature: vec![0.0; model.grid.feature_dim],
            tape: MlpTape::default(),
            dweights: vec![0.0; model.mlp.output_dim()],
            dfeature: vec![0.0; model.grid.feature_dim],
        }
    }
}

/// Per-worker gradient accumulation buffers. Grid gradients are recorded
/// as raw (slot, value) scatter entries per level and merged into the
/// master accumulators in a fixed order, which keeps training results
/// independent of thread scheduling.
#[derive(Debug, Clone)]
pub struct GradBuffers {
    pub mlp: Vec<f64>,
    pub basis: Vec<f64>,
    pub grid_slots: Vec<Vec<u32>>,
    /// Per level, `feature_dim` values per recorded slot.
    pub grid_values: Vec<Vec<f64>>,
}

impl GradBuffers {
    pub fn for_model(model: &FieldModel) -> GradBuffers {
        GradBuffers {
            mlp: vec![0.0; model.mlp.param_count()],
            basis: vec![0.0; model.basis.values().len()],
            grid_slots: vec![Vec::new(); model.grid.levels.len()],
            grid_values: vec![Vec::new(); model.grid.levels.len()],
        }
    }

    pub fn clear(&mut self) {
        self.mlp.fill(0.0);
        self.basis.fill(0.0);
        for v in &mut self.grid_slots {
            v.clear();
        }
        for v in &mut self.grid_values {
            v.clear();
        }
    }
}

impl FieldModel {
    /// Fresh model over an allocated grid: DCT basis, seeded decoder.
    pub fn init(cfg: MapConfig, frames: usize, grid: FeatureGrid) -> Result<FieldModel> {
        let basis = BasisTable::init_dct(frames, cfg.basis_count)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MLP_RNG_STREAM);
        let mlp = Mlp::new(
            cfg.feature_dim,
            cfg.mlp_hidden_layers,
            cfg.mlp_hidden_width,
            cfg.basis_count,
            &mut rng,
        );
        FieldModel::assemble(cfg, grid, mlp, basis)
    }

    /// Bundles pre-built parts, checking the shared shape invariants.
    pub fn assemble(
        cfg: MapConfig,
        grid: FeatureGrid,
        mlp: Mlp,
        basis: BasisTable,
    ) -> Result<FieldModel> {
        if basis.basis_count() != mlp.output_dim() {
            return Err(Error::InvalidInput(format!(
                "basis count {} does not match decoder output {}",
                basis.basis_count(),
                mlp.output_dim()
            )));
        }
        if grid.feature_dim != mlp.input_dim() {
            return Err(Error::InvalidInput(format!(
                "grid feature dim {} does not match decoder input {}",
                grid.feature_dim,
                mlp.input_dim()
            )));
        }
        Ok(FieldModel {
            cfg,
            grid,
            mlp,
            basis,
        })
    }

    pub fn frames(&self) -> usize {
        self.basis.frames()
    }

    /// Signed distance at (p, t). Errors if t is out of the frame range.
    pub fn query(&self, p: Point3, t: usize) -> Result<f64> {
        if t >= self.frames() {
            return Err(Error::InvalidInput(format!(
                "frame {t} out of range 0..{}",
                self.frames()
            )));
        }
        let mut scratch = QueryScratch::for_model(self);
        Ok(self.forward(p, t, &mut scratch))
    }

    /// Static signed distance: the weight of the frozen constant basis.
    pub fn query_static(&self, p: Point3) -> f64 {
        let mut scratch = QueryScratch::for_model(self);
        self.forward_static(p, &mut scratch)
    }

    /// Allocation-free query; `t` must be in range.
    #[inline]
    pub fn forward(&self, p: Point3, t: usize, scratch: &mut QueryScratch) -> f64 {
        debug_assert!(t < self.frames());
        self.decode(p, scratch);
        let row = self.basis.row(t);
        let w = scratch.tape.output();
        let mut acc = 0.0;
        for (wi, ri) in w.iter().zip(row) {
            acc += wi * ri;
        }
        acc
    }

    #[inline]
    pub fn forward_static(&self, p: Point3, scratch: &mut QueryScratch) -> f64 {
        self.decode(p, scratch);
        scratch.tape.output()[0]
    }

    #[inline]
    fn decode(&self, p: Point3, scratch: &mut QueryScratch) {
        self.grid
            .interpolate_into(p, &mut scratch.stencil, &mut scratch.feature);
        self.mlp.forward(&scratch.feature, &mut scratch.tape);
    }

    /// Reverse pass of [`FieldModel::forward`] for the query recorded in
    /// `scratch`, scaled by the scalar loss gradient `upstream`.
    pub fn backward(&self, t: usize, upstream: f64, scratch: &mut QueryScratch, bufs: &mut GradBuffers) {
        let w = scratch.tape.output();
        let k = self.basis.basis_count();
        let row_grad = &mut bufs.basis[t * k..(t + 1) * k];
        accumulate_basis_grad_into(row_grad, w, upstream);
        let row = self.basis.row(t);
        for (dw, ri) in scratch.dweights.iter_mut().zip(row) {
            *dw = upstream * ri;
        }
        self.backward_decoded(scratch, bufs);
    }

    /// Reverse pass of [`FieldModel::forward_static`]: upstream lands on
    /// the first decoder output only; the basis is not involved.
    pub fn backward_static(&self, upstream: f64, scratch: &mut QueryScratch, bufs: &mut GradBuffers) {
        scratch.dweights.fill(0.0);
        scratch.dweights[0] = upstream;
        self.backward_decoded(scratch, bufs);
    }

    fn backward_decoded(&self, scratch: &mut QueryScratch, bufs: &mut GradBuffers) {
        self.mlp.backward(
            &mut scratch.tape,
            &scratch.dweights,
            &mut bufs.mlp,
            &mut scratch.dfeature,
        );
        let dim = self.grid.feature_dim;
        for (level, ls) in scratch.stencil.levels.iter().enumerate() {
            let slots = &mut bufs.grid_slots[level];
            let values = &mut bufs.grid_values[level];
            for c in 0..8 {
                let idx = ls.indices[c];
                let w = ls.weights[c];
                if idx != ABSENT && w != 0.0 {
                    slots.push(idx);
                    for d in 0..dim {
                        values.push(w * scratch.dfeature[d]);
                    }
                }
            }
        }
    }

    /// Central-difference spatial gradient of F(., t) with perturbation
    /// `eps`, via six extra queries.
    pub fn numerical_gradient(&self, p: Point3, t: usize, eps: f64) -> Vec3 {
        let mut scratch = QueryScratch::for_model(self);
        central_gradient(|q| self.forward(q, t, &mut scratch), p, eps)
    }

    /// Dynamic iff the static signed distance strictly exceeds the
    /// threshold; ties stay static.
    pub fn classify_point(&self, p: Point3, d_static: f64) -> PointClass {
        if self.query_static(p) > d_static {
            PointClass::Dynamic
        } else {
            PointClass::Static
        }
    }
}

/// Central differences of a scalar field, the only spatial-derivative
/// primitive in the system.
pub fn central_gradient(mut f: impl FnMut(Point3) -> f64, p: Point3, eps: f64) -> Vec3 {
    debug_assert!(eps > 0.0);
    let mut g = Vec3::zeros();
    for axis in 0..3 {
        let mut hi = p;
        let mut lo = p;
        hi[axis] += eps;
        lo[axis] -= eps;
        g[axis] = (f(hi) - f(lo)) / (2.0 * eps);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FeatureGrid;
    use rand::Rng;

    fn tiny_cfg(k: usize) -> MapConfig {
        MapConfig {
            levels: 1,
            feature_dim: 2,
            basis_count: k,
            finest_voxel_size: 1.0,
            ..MapConfig::default()
        }
    }

    /// Model whose decoder ignores the grid: output = biases.
    fn bias_model(biases: &[f64], basis: BasisTable) -> FieldModel {
        let cfg = tiny_cfg(biases.len());
        let grid = FeatureGrid::empty(&cfg);
        let mut mlp = Mlp::zeroed(vec![cfg.feature_dim, biases.len()]);
        let (_, b_off) = mlp.layer_offsets(0);
        mlp.params[b_off..b_off + biases.len()].copy_from_slice(biases);
        FieldModel::assemble(cfg, grid, mlp, basis).unwrap()
    }

    #[test]
    fn query_is_weight_basis_dot_product() {
        let basis = BasisTable::from_raw(1, 2, vec![1.0, 0.5]);
        let model = bias_model(&[0.3, 0.1], basis);
        assert!((model.query(Point3::origin(), 0).unwrap() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn pure_static_weight_is_time_invariant() {
        let basis = BasisTable::init_dct(5, 3).unwrap();
        let model = bias_model(&[0.3, 0.0, 0.0], basis);
        for t in 0..5 {
            assert!((model.query(Point3::origin(), t).unwrap() - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_model_queries_zero() {
        let basis = BasisTable::init_dct(3, 2).unwrap();
        let model = bias_model(&[0.0, 0.0], basis);
        assert_eq!(model.query(Point3::new(4.0, 5.0, 6.0), 1).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_frame_errors() {
        let basis = BasisTable::init_dct(3, 2).unwrap();
        let model = bias_model(&[0.0, 0.0], basis);
        assert!(model.query(Point3::origin(), 3).is_err());
    }

    #[test]
    fn query_static_reads_first_weight() {
        let basis = BasisTable::init_dct(4, 2).unwrap();
        let model = bias_model(&[0.2, 0.7], basis);
        assert!((model.query_static(Point3::origin()) - 0.2).abs() < 1e-15);
        // with zero dynamic weights, static query equals every F(p, t)
        let flat = bias_model(&[0.2, 0.0], BasisTable::init_dct(4, 2).unwrap());
        for t in 0..4 {
            assert_eq!(
                flat.query_static(Point3::origin()),
                flat.query(Point3::origin(), t).unwrap()
            );
        }
    }

    #[test]
    fn time_average_recovers_static_at_dct_init() {
        // At DCT init the columns k >= 2 sum to zero over t, so the frame
        // average of F equals the static value; brute-force the sum.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let n = 12;
        let cfg = MapConfig {
            levels: 2,
            feature_dim: 4,
            basis_count: 6,
            finest_voxel_size: 1.0,
            seed: 5,
            ..MapConfig::default()
        };
        let mut grid = FeatureGrid::empty(&cfg);
        grid.allocate_around(Point3::new(0.4, 0.6, 0.2), &mut rng);
        for level in &mut grid.levels {
            for f in &mut level.features {
                *f = rng.gen_range(-1.0..1.0);
            }
        }
        let mlp = Mlp::new(4, 2, 16, 6, &mut rng);
        let basis = BasisTable::init_dct(n, 6).unwrap();
        let model = FieldModel::assemble(cfg, grid, mlp, basis).unwrap();
        let p = Point3::new(0.4, 0.6, 0.2);
        let avg: f64 =
            (0..n).map(|t| model.query(p, t).unwrap()).sum::<f64>() / n as f64;
        assert!((avg - model.query_static(p)).abs() < 1e-12);
    }

    #[test]
    fn decomposition_splits_static_and_dynamic() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg(4);
        let mut grid = FeatureGrid::empty(&cfg);
        grid.allocate_around(Point3::new(0.5, 0.5, 0.5), &mut rng);
        let mlp = Mlp::new(2, 1, 8, 4, &mut rng);
        let basis = BasisTable::init_dct(6, 4).unwrap();
        let model = FieldModel::assemble(cfg, grid, mlp, basis).unwrap();
        let p = Point3::new(0.3, 0.9, 0.1);
        let mut scratch = QueryScratch::for_model(&model);
        for t in 0..6 {
            let full = model.forward(p, t, &mut scratch);
            let w = scratch.tape.output().to_vec();
            let row = model.basis.row(t);
            let dynamic: f64 = w[1..].iter().zip(&row[1..]).map(|(a, b)| a * b).sum();
            let stat = model.query_static(p);
            assert!((full - stat - dynamic).abs() < 1e-12);
        }
    }

    #[test]
    fn central_gradient_exact_on_polynomials() {
        // linear field: exact (up to rounding) for any eps
        let g = central_gradient(|p| 2.0 * p.x, Point3::new(0.3, -1.0, 2.0), 0.17);
        assert!((g - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        // constant field
        let g = central_gradient(|_| 5.0, Point3::origin(), 0.3);
        assert_eq!(g, Vec3::zeros());
        // quadratic: central difference of x^2 is exactly 2x for any eps
        let p = Point3::new(1.7, 0.0, 0.0);
        let g = central_gradient(|q| q.x * q.x, p, 0.25);
        assert!((g.x - 2.0 * p.x).abs() < 1e-12);
    }

    #[test]
    fn classification_threshold_is_strict() {
        let basis = BasisTable::init_dct(2, 2).unwrap();
        let model = bias_model(&[0.0, 0.4], basis);
        assert_eq!(model.classify_point(Point3::origin(), 0.16), PointClass::Static);

        let basis = BasisTable::init_dct(2, 2).unwrap();
        let model = bias_model(&[0.2, 0.0], basis);
        assert_eq!(model.classify_point(Point3::origin(), 0.16), PointClass::Dynamic);

        // exactly at the threshold: static by convention
        let basis = BasisTable::init_dct(2, 2).unwrap();
        let model = bias_model(&[0.16, 0.0], basis);
        assert_eq!(model.classify_point(Point3::origin(), 0.16), PointClass::Static);
    }

    #[test]
    fn classification_monotone_in_threshold() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let w1: f64 = rng.gen_range(-0.5..0.5);
            let basis = BasisTable::init_dct(2, 2).unwrap();
            let model = bias_model(&[w1, 0.0], basis);
            let lo = rng.gen_range(0.0..0.3);
            let hi = lo + rng.gen_range(0.0..0.3);
            let at_lo = model.classify_point(Point3::origin(), lo);
            let at_hi = model.classify_point(Point3::origin(), hi);
            // raising the threshold never flips static -> dynamic
            assert!(!(at_lo == PointClass::Static && at_hi == PointClass::Dynamic));
        }
    }
}
