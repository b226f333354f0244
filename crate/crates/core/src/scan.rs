//! Posed range scans and their assembly into a world-frame sequence.

use crate::error::{Error, Result};
use crate::geom::{point_is_finite, Point3, Pose};

/// One range scan with its points already in the world frame.
#[derive(Debug, Clone)]
pub struct Scan {
    /// 0-based frame index within the sequence.
    pub frame: usize,
    /// Sensor origin in the world frame, meters.
    pub origin: Point3,
    pub points_world: Vec<Point3>,
}

/// An ordered sequence of scans with contiguous frame indices 0..N-1.
#[derive(Debug, Clone)]
pub struct ScanSequence {
    pub scans: Vec<Scan>,
}

impl ScanSequence {
    pub fn frame_count(&self) -> usize {
        self.scans.len()
    }

    pub fn total_points(&self) -> usize {
        self.scans.iter().map(|s| s.points_world.len()).sum()
    }
}

/// Transforms raw sensor-frame scans into a world-frame [`ScanSequence`],
/// assigning frame indices in input order.
pub fn assemble_sequence(raw_scans: &[Vec<Point3>], poses: &[Pose]) -> Result<ScanSequence> {
    if raw_scans.len() != poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} poses",
            raw_scans.len(),
            poses.len()
        )));
    }
    if raw_scans.is_empty() {
        return Err(Error::InvalidInput("empty scan sequence".into()));
    }
    let mut scans = Vec::with_capacity(raw_scans.len());
    for (frame, (points, pose)) in raw_scans.iter().zip(poses).enumerate() {
        if points.is_empty() {
            return Err(Error::InvalidInput(format!("scan {frame} has no points")));
        }
        let points_world: Vec<Point3> =
            points.iter().map(|&p| pose.transform_point(p)).collect();
        for p in &points_world {
            if !point_is_finite(p) {
                return Err(Error::InvalidInput(format!(
                    "scan {frame} produced a non-finite world point"
                )));
            }
        }
        scans.push(Scan {
            frame,
            origin: Point3::from(pose.translation),
            points_world,
        });
    }
    Ok(ScanSequence { scans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Mat3, Vec3};
    use approx::assert_relative_eq;

    #[test]
    fn identity_pose_passes_through() {
        let seq =
            assemble_sequence(&[vec![Point3::new(1.0, 0.0, 0.0)]], &[Pose::identity()]).unwrap();
        assert_eq!(seq.frame_count(), 1);
        assert_eq!(seq.scans[0].points_world[0], Point3::new(1.0, 0.0, 0.0));
        assert_eq!(seq.scans[0].origin, Point3::new(0.0, 0.0, 0.0));
    }

    #[test]
    fn translation_moves_points_and_origin() {
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap();
        let seq = assemble_sequence(&[vec![Point3::new(1.0, 0.0, 0.0)]], &[pose]).unwrap();
        assert_eq!(seq.scans[0].points_world[0], Point3::new(1.0, 0.0, 2.0));
        assert_eq!(seq.scans[0].origin, Point3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn yaw_rotation_on_second_scan() {
        // 90 degree yaw: (1,0,0) -> (0,1,0); hand-checked matrix product.
        let yaw90 = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let poses = [
            Pose::identity(),
            Pose::new(yaw90, Vec3::new(2.0, 3.0, 0.0)).unwrap(),
        ];
        let raw = [
            vec![Point3::new(1.0, 0.0, 0.0)],
            vec![Point3::new(1.0, 0.0, 0.0)],
        ];
        let seq = assemble_sequence(&raw, &poses).unwrap();
        assert_relative_eq!(
            seq.scans[1].points_world[0].coords,
            Vec3::new(2.0, 4.0, 0.0),
            epsilon = 1e-12
        );
        assert_eq!(seq.scans[1].frame, 1);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(assemble_sequence(&[vec![Point3::origin()]], &[]).is_err());
    }

    #[test]
    fn inverse_transform_recovers_sensor_frame() {
        let yaw = {
            let (s, c) = 0.4_f64.sin_cos();
            Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        };
        let pose = Pose::new(yaw, Vec3::new(-1.0, 2.0, 0.5)).unwrap();
        let sensor = vec![Point3::new(3.0, -2.0, 7.0), Point3::new(0.1, 0.2, 0.3)];
        let seq = assemble_sequence(&[sensor.clone()], std::slice::from_ref(&pose)).unwrap();
        let inv = pose.inverse();
        for (w, s) in seq.scans[0].points_world.iter().zip(&sensor) {
            let back = inv.transform_point(*w);
            assert_relative_eq!(back.coords, s.coords, max_relative = 1e-9);
        }
    }
}
