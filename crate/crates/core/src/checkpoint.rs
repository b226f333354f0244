//! Versioned binary checkpoint holding everything needed to query a
//! trained model: config, temporal basis, sparse grid (with the meshing
//! occupancy mask), and decoder parameters. All scalars little-endian;
//! grid vertices are written in insertion order and occupancy keys
//! sorted, so identical models produce identical bytes.

use crate::basis::BasisTable;
use crate::config::MapConfig;
use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::grid::FeatureGrid;
use crate::io::write_atomic;
use crate::mlp::Mlp;
use std::path::Path;

const MAGIC: &[u8; 4] = b"T4DM";
const VERSION: u32 = 1;
/// Bytes per stored scalar; this build stores features in f64.
const SCALAR_WIDTH: u8 = 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn write_config(w: &mut Writer, cfg: &MapConfig) {
    w.u32(cfg.levels as u32);
    w.u32(cfg.feature_dim as u32);
    w.u32(cfg.basis_count as u32);
    w.f64(cfg.finest_voxel_size);
    w.f64(cfg.level_scale_factor);
    w.u32(cfg.mlp_hidden_layers as u32);
    w.u32(cfg.mlp_hidden_width as u32);
    w.f64(cfg.truncation);
    w.f64(cfg.r_dense);
    w.u32(cfg.surface_samples as u32);
    w.u32(cfg.free_samples as u32);
    w.f64(cfg.lambda_eikonal);
    w.f64(cfg.lambda_free);
    w.f64(cfg.lambda_certain);
    w.f64(cfg.d_static);
    w.f64(cfg.learning_rate);
    w.u64(cfg.train_steps as u64);
    w.u64(cfg.batch_size as u64);
    w.f64(cfg.eps_start);
    w.f64(cfg.eps_end);
    w.f64(cfg.eps_decay_fraction);
    w.u64(cfg.seed);
}

fn read_config(r: &mut Reader) -> Result<MapConfig> {
    Ok(MapConfig {
        levels: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        basis_count: r.u32()? as usize,
        finest_voxel_size: r.f64()?,
        level_scale_factor: r.f64()?,
        mlp_hidden_layers: r.u32()? as usize,
        mlp_hidden_width: r.u32()? as usize,
        truncation: r.f64()?,
        r_dense: r.f64()?,
        surface_samples: r.u32()? as usize,
        free_samples: r.u32()? as usize,
        lambda_eikonal: r.f64()?,
        lambda_free: r.f64()?,
        lambda_certain: r.f64()?,
        d_static: r.f64()?,
        learning_rate: r.f64()?,
        train_steps: r.u64()? as usize,
        batch_size: r.u64()? as usize,
        eps_start: r.f64()?,
        eps_end: r.f64()?,
        eps_decay_fraction: r.f64()?,
        seed: r.u64()?,
    })
}

pub fn encode(model: &FieldModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(SCALAR_WIDTH);
    write_config(&mut w, &model.cfg);
    w.u64(model.frames() as u64);

    for &v in model.basis.values() {
        w.f64(v);
    }

    let dim = model.grid.feature_dim;
    for level in &model.grid.levels {
        w.f64(level.voxel_size);
        w.u64(level.vertex_count() as u64);
        for (slot, key) in level.keys().iter().enumerate() {
            w.i32(key.0);
            w.i32(key.1);
            w.i32(key.2);
            for &f in &level.features[slot * dim..(slot + 1) * dim] {
                w.f64(f);
            }
        }
    }
    let occ = model.grid.occupancy_sorted();
    w.u64(occ.len() as u64);
    for key in occ {
        w.i32(key.0);
        w.i32(key.1);
        w.i32(key.2);
    }

    w.u32(model.mlp.dims().len() as u32);
    for &d in model.mlp.dims() {
        w.u32(d as u32);
    }
    w.u64(model.mlp.param_count() as u64);
    for &p in &model.mlp.params {
        w.f64(p);
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<FieldModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a map checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let width = r.u8()?;
    if width != SCALAR_WIDTH {
        return Err(Error::Format(format!(
            "unsupported scalar width {width} (expected {SCALAR_WIDTH})"
        )));
    }
    let cfg = read_config(&mut r)?;
    let frames = r.u64()? as usize;

    let basis_values = r.f64_vec(frames * cfg.basis_count)?;
    let basis = BasisTable::from_raw(frames, cfg.basis_count, basis_values);

    let mut grid = FeatureGrid::empty(&cfg);
    grid.levels.clear();
    for _ in 0..cfg.levels {
        let voxel_size = r.f64()?;
        let count = r.u64()? as usize;
        let mut keys = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * cfg.feature_dim);
        for _ in 0..count {
            keys.push((r.i32()?, r.i32()?, r.i32()?));
            features.extend(r.f64_vec(cfg.feature_dim)?);
        }
        grid.push_level_raw(voxel_size, keys, features);
    }
    let occ_count = r.u64()? as usize;
    let mut occ = Vec::with_capacity(occ_count);
    for _ in 0..occ_count {
        occ.push((r.i32()?, r.i32()?, r.i32()?));
    }
    grid.set_occupancy(occ);

    let dim_count = r.u32()? as usize;
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(r.u32()? as usize);
    }
    let mut mlp = Mlp::zeroed(dims);
    let param_count = r.u64()? as usize;
    if param_count != mlp.param_count() {
        return Err(Error::Format(format!(
            "decoder parameter count {param_count} does not match layer sizes \
             (expected {})",
            mlp.param_count()
        )));
    }
    mlp.params = r.f64_vec(param_count)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    FieldModel::assemble(cfg, grid, mlp, basis)
}

pub fn save(model: &FieldModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<FieldModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::scan::{Scan, ScanSequence};
    use rand::{Rng, SeedableRng};

    fn small_model() -> FieldModel {
        let cfg = MapConfig {
            levels: 2,
            feature_dim: 3,
            basis_count: 4,
            finest_voxel_size: 0.5,
            seed: 123,
            ..MapConfig::default()
        };
        let seq = ScanSequence {
            scans: vec![Scan {
                frame: 0,
                origin: Point3::origin(),
                points_world: vec![Point3::new(0.2, 0.3, 0.4), Point3::new(1.7, -0.3, 0.9)],
            }],
        };
        let samples = [Point3::new(0.8, 0.1, 0.5)];
        let grid = FeatureGrid::allocate(&seq, samples.iter(), &cfg).unwrap();
        let mut model = FieldModel::init(cfg, 5, grid).unwrap();
        // perturb everything so the round trip is not trivially zero
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for level in &mut model.grid.levels {
            for f in &mut level.features {
                *f = rng.gen_range(-1.0..1.0);
            }
        }
        for v in model.basis.values_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let bytes = encode(&model);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        // behaviour matches too
        let p = Point3::new(0.3, 0.2, 0.6);
        for t in 0..model.frames() {
            assert_eq!(model.query(p, t).unwrap(), back.query(p, t).unwrap());
        }
        assert_eq!(model.query_static(p), back.query_static(p));
        assert_eq!(
            model.grid.occupancy_sorted(),
            back.grid.occupancy_sorted()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let model = small_model();
        let mut bytes = encode(&model);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let model = small_model();
        let bytes = encode(&model);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn save_load_through_file() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.t4dm");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(encode(&back), encode(&model));
    }
}
