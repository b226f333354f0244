//! File ingestion and emission: KITTI-style `.bin` scans, pose text files,
//! binary label files, and atomic writes for pipeline outputs.

use crate::error::{Error, Result};
use crate::geom::{orthonormality_error, reorthonormalize, Mat3, Point3, Pose, Vec3};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Per-point verdict of the dynamic/static segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    Static,
    Dynamic,
}

/// Tolerance within which a loaded pose rotation is re-orthonormalized
/// instead of rejected.
pub const POSE_FIX_TOL: f64 = 1e-3;

/// Reads a KITTI-format point cloud: consecutive little-endian f32
/// quadruples `(x, y, z, intensity)`, intensity discarded. Returns the
/// sensor-frame points and the count of records rejected for non-finite
/// components.
pub fn load_scan_bin(path: &Path) -> Result<(Vec<Point3>, usize)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut rejected = 0usize;
    for rec in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap()) as f64;
        if x.is_finite() && y.is_finite() && z.is_finite() {
            points.push(Point3::new(x, y, z));
        } else {
            rejected += 1;
        }
    }
    if rejected > 0 {
        eprintln!(
            "warning: {}: dropped {rejected} non-finite point record(s)",
            path.display()
        );
    }
    Ok((points, rejected))
}

/// Reads the first `count` poses from a KITTI pose file: 12 whitespace
/// separated reals per line, the row-major upper 3x4 of the transform.
pub fn load_poses_kitti(path: &Path, count: usize) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::with_capacity(count);
    for (lineno, line) in text.lines().enumerate() {
        if poses.len() == count {
            break;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let vals: Vec<f64> = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}:{}: `{tok}` is not a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::Format(format!(
                "{}:{}: expected 12 values, found {}",
                path.display(),
                lineno + 1,
                vals.len()
            )));
        }
        let rotation = Mat3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vec3::new(vals[3], vals[7], vals[11]);
        let err = orthonormality_error(&rotation);
        let det = rotation.determinant();
        if err > POSE_FIX_TOL || (det - 1.0).abs() > POSE_FIX_TOL {
            return Err(Error::Format(format!(
                "{}:{}: rotation is not orthonormal with det +1 \
                 (deviation {err:.3e}, det {det:.6})",
                path.display(),
                lineno + 1
            )));
        }
        let rotation = if err > crate::geom::ROTATION_TOL {
            reorthonormalize(&rotation)
        } else {
            rotation
        };
        poses.push(Pose::new(rotation, translation).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?);
    }
    if poses.len() < count {
        return Err(Error::Format(format!(
            "{}: needed {count} poses, file has {}",
            path.display(),
            poses.len()
        )));
    }
    Ok(poses)
}

/// Writes one little-endian u32 per point: 0 = static, 1 = dynamic.
pub fn write_labels(path: &Path, labels: &[PointClass]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for label in labels {
        let v: u32 = match label {
            PointClass::Static => 0,
            PointClass::Dynamic => 1,
        };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<PointClass>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of 4 bytes",
            path.display(),
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(4)
        .map(|rec| match u32::from_le_bytes(rec.try_into().unwrap()) {
            0 => Ok(PointClass::Static),
            1 => Ok(PointClass::Dynamic),
            other => Err(Error::Format(format!(
                "{}: unknown label value {other}",
                path.display()
            ))),
        })
        .collect()
}

/// Writes a KITTI-format `.bin` scan from sensor-frame points
/// (intensity column zeroed).
pub fn write_scan_bin(path: &Path, points: &[Point3]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Writes a KITTI pose file (12 reals per line, row-major 3x4).
pub fn write_poses_kitti(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::new();
    for pose in poses {
        let r = &pose.rotation;
        let t = &pose.translation;
        let row = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ];
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Loads a directory of `.bin` scans (sorted by filename) with their pose
/// file and assembles the world-frame sequence.
pub fn load_dataset(scans_dir: &Path, poses_path: &Path) -> Result<crate::scan::ScanSequence> {
    let mut bins: Vec<_> = std::fs::read_dir(scans_dir)
        .map_err(|e| Error::io(scans_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    if bins.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .bin scans found in {}",
            scans_dir.display()
        )));
    }
    bins.sort();
    let poses = load_poses_kitti(poses_path, bins.len())?;
    let mut raw_scans = Vec::with_capacity(bins.len());
    for path in &bins {
        let (points, _) = load_scan_bin(path)?;
        raw_scans.push(points);
    }
    crate::scan::assemble_sequence(&raw_scans, &poses)
}

/// Writes `bytes` to a temp file in the target directory and renames it
/// into place, so interrupted runs never leave truncated outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp-{}",
            path.file_name().unwrap_or_default().to_string_lossy(),
            std::process::id()
        )),
        None => Path::new(&format!(".tmp-{}", std::process::id())).to_path_buf(),
    };
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::io(path, e))
}
