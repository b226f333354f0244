//! Deterministic synthetic scene generator with an analytic SDF oracle.
//!
//! A simulated spinning range sensor travels through an axis-aligned box
//! room containing parametric moving primitives. Rays are cast by sphere
//! tracing the exact scene SDF, so every endpoint sits on an analytic
//! surface and the same oracle doubles as ground truth for training
//! checks. Sign convention matches the map: positive in free space,
//! negative inside walls or objects.

use crate::error::{Error, Result};
use crate::geom::{Point3, Vec3};
use crate::io::PointClass;
use crate::scan::{Scan, ScanSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const HIT_TOL: f64 = 1e-6;
const MAX_TRACE_STEPS: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl PrimitiveSpec {
    fn sdf(&self, rel: Vec3) -> f64 {
        match self {
            PrimitiveSpec::Sphere { radius } => rel.norm() - radius,
            PrimitiveSpec::Box { half_extents } => {
                let q = Vec3::new(
                    rel.x.abs() - half_extents[0],
                    rel.y.abs() - half_extents[1],
                    rel.z.abs() - half_extents[2],
                );
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            PrimitiveSpec::Sphere { radius } => *radius,
            PrimitiveSpec::Box { half_extents } => {
                Vec3::new(half_extents[0], half_extents[1], half_extents[2]).norm()
            }
        }
    }
}

/// One moving primitive: parked at `start` until `move_start`, then
/// translating by `velocity` per frame until `move_end`, parked after.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoverSpec {
    pub shape: PrimitiveSpec,
    pub start: [f64; 3],
    pub velocity: [f64; 3],
    #[serde(default)]
    pub move_start: usize,
    #[serde(default = "usize_max")]
    pub move_end: usize,
}

fn usize_max() -> usize {
    usize::MAX
}

impl MoverSpec {
    pub fn center_at(&self, frame: usize) -> Point3 {
        let lo = self.move_start.min(self.move_end);
        let hi = self.move_start.max(self.move_end);
        let steps = frame.clamp(lo, hi) - lo;
        Point3::new(
            self.start[0] + self.velocity[0] * steps as f64,
            self.start[1] + self.velocity[1] * steps as f64,
            self.start[2] + self.velocity[2] * steps as f64,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
    /// Sensor positions: one entry = static, two = linear path over the
    /// sequence, otherwise one entry per frame.
    pub sensor_path: Vec<[f64; 3]>,
    pub azimuth_count: usize,
    pub elevation_count: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    pub frames: usize,
    pub seed: u64,
    /// Standard deviation of optional isotropic range noise, meters
    /// (0 disables).
    #[serde(default)]
    pub range_noise_sigma: f64,
    #[serde(default = "default_cloud_density")]
    pub static_cloud_per_m2: f64,
}

fn default_cloud_density() -> f64 {
    400.0
}

/// The scene used by the synthetic end-to-end checks: a 10 x 8 x 4 m room
/// with one half-meter sphere crossing 4 m of it mid-sequence while the
/// sensor slides along a 2 m path.
pub fn default_scene() -> SceneSpec {
    SceneSpec {
        room_min: [-5.0, -4.0, 0.0],
        room_max: [5.0, 4.0, 4.0],
        movers: vec![MoverSpec {
            shape: PrimitiveSpec::Sphere { radius: 0.5 },
            start: [-2.0, 1.5, 1.5],
            velocity: [0.1, 0.0, 0.0],
            move_start: 10,
            move_end: 50,
        }],
        sensor_path: vec![[-1.0, -1.0, 1.6], [1.0, -1.0, 1.6]],
        azimuth_count: 360,
        elevation_count: 16,
        elevation_min_deg: -80.0,
        elevation_max_deg: 80.0,
        max_range: 15.0,
        frames: 60,
        seed: 42,
        range_noise_sigma: 0.0,
        static_cloud_per_m2: 400.0,
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Per scan, per point: which primitive the ray hit.
    pub labels: Vec<Vec<PointClass>>,
    /// Uniform sample of the static surfaces (the room walls).
    pub static_cloud: Vec<Point3>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.room_max[a] > self.room_min[a]) {
                return Err(Error::InvalidInput("room box is inverted or empty".into()));
            }
        }
        if self.frames == 0 {
            return Err(Error::InvalidInput("scene needs at least one frame".into()));
        }
        if self.azimuth_count == 0 || self.elevation_count == 0 {
            return Err(Error::InvalidInput("ray fan must be nonempty".into()));
        }
        if self.sensor_path.is_empty() {
            return Err(Error::InvalidInput("sensor path is empty".into()));
        }
        if self.sensor_path.len() > 2 && self.sensor_path.len() != self.frames {
            return Err(Error::InvalidInput(format!(
                "sensor path has {} entries for {} frames (want 1, 2, or one per frame)",
                self.sensor_path.len(),
                self.frames
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::InvalidInput("max_range must be positive".into()));
        }
        for frame in 0..self.frames {
            let o = self.sensor_origin(frame);
            if self.room_sdf(o) <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "sensor leaves the room at frame {frame}"
                )));
            }
            for (i, mover) in self.movers.iter().enumerate() {
                let c = mover.center_at(frame);
                if self.room_sdf(c) < mover.shape.bounding_radius() {
                    return Err(Error::InvalidInput(format!(
                        "mover {i} leaves the room at frame {frame}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sensor_origin(&self, frame: usize) -> Point3 {
        let p = match self.sensor_path.len() {
            1 => self.sensor_path[0],
            2 => {
                let s = if self.frames > 1 {
                    frame as f64 / (self.frames - 1) as f64
                } else {
                    0.0
                };
                let (a, b) = (self.sensor_path[0], self.sensor_path[1]);
                [
                    a[0] + s * (b[0] - a[0]),
                    a[1] + s * (b[1] - a[1]),
                    a[2] + s * (b[2] - a[2]),
                ]
            }
            _ => self.sensor_path[frame],
        };
        Point3::new(p[0], p[1], p[2])
    }

    /// Inward signed distance of the room walls: positive inside the
    /// room, negative in or beyond the walls.
    fn room_sdf(&self, p: Point3) -> f64 {
        let mut d = f64::INFINITY;
        for a in 0..3 {
            d = d.min(p[a] - self.room_min[a]).min(self.room_max[a] - p[a]);
        }
        d
    }

    /// Exact scene SDF at frame `t`: free space positive, inside walls
    /// and movers negative.
    pub fn oracle_sdf(&self, p: Point3, frame: usize) -> f64 {
        let mut d = self.room_sdf(p);
        for mover in &self.movers {
            d = d.min(mover.shape.sdf(p - mover.center_at(frame)));
        }
        d
    }

    /// SDF of the static part alone (the walls).
    pub fn oracle_static_sdf(&self, p: Point3) -> f64 {
        self.room_sdf(p)
    }

    /// Distance to the solid swept by mover `i` over the whole sequence
    /// (exact for spheres; conservative bounding-sphere capsule for
    /// boxes). Negative inside the swept volume.
    pub fn swept_volume_sdf(&self, mover: usize, p: Point3) -> f64 {
        let m = &self.movers[mover];
        let a = m.center_at(0).coords;
        let b = m.center_at(self.frames.saturating_sub(1)).coords;
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p.coords - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let closest = a + t * ab;
        (p.coords - closest).norm() - m.shape.bounding_radius()
    }

    fn ray_direction(&self, az: usize, el: usize) -> Vec3 {
        let theta = 2.0 * std::f64::consts::PI * az as f64 / self.azimuth_count as f64;
        let phi = if self.elevation_count > 1 {
            let s = el as f64 / (self.elevation_count - 1) as f64;
            (self.elevation_min_deg + s * (self.elevation_max_deg - self.elevation_min_deg))
                .to_radians()
        } else {
            self.elevation_min_deg.to_radians()
        };
        Vec3::new(
            phi.cos() * theta.cos(),
            phi.cos() * theta.sin(),
            phi.sin(),
        )
    }

    /// First-hit distance along a ray via sphere tracing, or None past
    /// `max_range`.
    fn trace(&self, origin: Point3, dir: Vec3, frame: usize) -> Option<f64> {
        let mut dist = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let p = origin + dist * dir;
            let s = self.oracle_sdf(p, frame);
            if s < HIT_TOL {
                return Some(dist);
            }
            dist += s;
            if dist > self.max_range {
                return None;
            }
        }
        None
    }

    /// Which primitive is closest at a hit point; movers are dynamic.
    fn classify_hit(&self, p: Point3, frame: usize) -> PointClass {
        let mut best = self.room_sdf(p);
        let mut class = PointClass::Static;
        for mover in &self.movers {
            let d = mover.shape.sdf(p - mover.center_at(frame));
            if d < best {
                best = d;
                class = PointClass::Dynamic;
            }
        }
        class
    }
}

/// Casts the full ray fan for every frame. Returns world-frame scans and
/// ground truth; deterministic for a fixed spec.
pub fn simulate(spec: &SceneSpec) -> Result<(ScanSequence, GroundTruth)> {
    spec.validate()?;
    let frames: Vec<(Scan, Vec<PointClass>)> = (0..spec.frames)
        .into_par_iter()
        .map(|frame| {
            let origin = spec.sensor_origin(frame);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(2000 + frame as u64);
            let mut points = Vec::with_capacity(spec.azimuth_count * spec.elevation_count);
            let mut labels = Vec::with_capacity(points.capacity());
            for el in 0..spec.elevation_count {
                for az in 0..spec.azimuth_count {
                    let dir = spec.ray_direction(az, el);
                    let Some(mut dist) = spec.trace(origin, dir, frame) else {
                        continue;
                    };
                    let label = spec.classify_hit(origin + dist * dir, frame);
                    if spec.range_noise_sigma > 0.0 {
                        dist += spec.range_noise_sigma * standard_normal(&mut rng);
                    }
                    points.push(origin + dist * dir);
                    labels.push(label);
                }
            }
            (
                Scan {
                    frame,
                    origin,
                    points_world: points,
                },
                labels,
            )
        })
        .collect();

    let mut scans = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    for (scan, l) in frames {
        scans.push(scan);
        labels.push(l);
    }
    let static_cloud = sample_static_cloud(spec);
    Ok((
        ScanSequence { scans },
        GroundTruth {
            labels,
            static_cloud,
        },
    ))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; the second variate is discarded
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform samples of the six room walls at the configured density.
fn sample_static_cloud(spec: &SceneSpec) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3000);
    let lo = spec.room_min;
    let hi = spec.room_max;
    let mut cloud = Vec::new();
    // for each axis, the two walls where that coordinate is pinned
    for axis in 0..3 {
        let u_axis = (axis + 1) % 3;
        let v_axis = (axis + 2) % 3;
        let area = (hi[u_axis] - lo[u_axis]) * (hi[v_axis] - lo[v_axis]);
        let count = (area * spec.static_cloud_per_m2).round() as usize;
        for &pinned in &[lo[axis], hi[axis]] {
            for _ in 0..count {
                let mut p = [0.0; 3];
                p[axis] = pinned;
                p[u_axis] = rng.gen_range(lo[u_axis]..hi[u_axis]);
                p[v_axis] = rng.gen_range(lo[v_axis]..hi[v_axis]);
                cloud.push(Point3::new(p[0], p[1], p[2]));
            }
        }
    }
    cloud
}

/// Writes the simulated dataset through the production formats:
/// `scans/NNNNNN.bin`, `poses.txt`, `labels/NNNNNN.label`,
/// `gt_static.ply`, and the scene spec as `scene.toml`.
pub fn write_dataset(
    spec: &SceneSpec,
    seq: &ScanSequence,
    gt: &GroundTruth,
    out_dir: &Path,
) -> Result<()> {
    let scans_dir = out_dir.join("scans");
    let labels_dir = out_dir.join("labels");
    std::fs::create_dir_all(&scans_dir).map_err(|e| Error::io(&scans_dir, e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;

    let mut poses = Vec::with_capacity(seq.scans.len());
    for (scan, labels) in seq.scans.iter().zip(&gt.labels) {
        // sensor frame = world minus origin; the pose carries the offset
        let sensor_points: Vec<Point3> = scan
            .points_world
            .iter()
            .map(|p| Point3::from(p - scan.origin.coords))
            .collect();
        crate::io::write_scan_bin(
            &scans_dir.join(format!("{:06}.bin", scan.frame)),
            &sensor_points,
        )?;
        crate::io::write_labels(
            &labels_dir.join(format!("{:06}.label", scan.frame)),
            labels,
        )?;
        poses.push(crate::geom::Pose::new(
            crate::geom::Mat3::identity(),
            scan.origin.coords,
        )?);
    }
    crate::io::write_poses_kitti(&out_dir.join("poses.txt"), &poses)?;
    crate::ply::write_ply(
        &out_dir.join("gt_static.ply"),
        &gt.static_cloud,
        &[],
        crate::ply::PlyEncoding::BinaryLe,
    )?;
    let toml_text = toml::to_string_pretty(spec)
        .map_err(|e| Error::Format(format!("scene serialization failed: {e}")))?;
    crate::io::write_atomic(&out_dir.join("scene.toml"), toml_text.as_bytes())?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SceneSpec = toml::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}
