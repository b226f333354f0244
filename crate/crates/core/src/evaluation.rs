//! Reconstruction metrics (completion, accuracy, Chamfer-L1, F-score)
//! and segmentation metrics (SA, DA, AA).
//!
//! Distance metrics are the standard mean nearest-neighbor definitions,
//! with no distance cap (reports say so explicitly). Reconstruction
//! numbers are reported in centimeters, matching how such tables are
//! usually printed; everything internal stays in meters.

use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::io::PointClass;
use crate::mesher::TriangleMesh;
use crate::spatial::CellIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub completion_cm: f64,
    pub accuracy_cm: f64,
    pub chamfer_l1_cm: f64,
    /// Percent, harmonic mean of precision and recall at the threshold.
    pub f_score_pct: f64,
    pub threshold_cm: f64,
    pub pred_count: usize,
    pub gt_count: usize,
    /// Points per square meter used when the prediction came from a mesh.
    pub sample_density: Option<f64>,
}

impl std::fmt::Display for ReconReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "reconstruction vs ground truth ({} pred / {} gt points)", self.pred_count, self.gt_count)?;
        if let Some(d) = self.sample_density {
            writeln!(f, "  mesh sampled at {d} points/m^2")?;
        }
        writeln!(f, "  completion : {:.4} cm", self.completion_cm)?;
        writeln!(f, "  accuracy   : {:.4} cm", self.accuracy_cm)?;
        writeln!(f, "  chamfer-l1 : {:.4} cm", self.chamfer_l1_cm)?;
        writeln!(
            f,
            "  f-score    : {:.2} % at {} cm (no distance cap applied)",
            self.f_score_pct, self.threshold_cm
        )
    }
}

impl ReconReport {
    /// Machine-readable `key=value` block.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("completion_cm={}\n", self.completion_cm));
        s.push_str(&format!("accuracy_cm={}\n", self.accuracy_cm));
        s.push_str(&format!("chamfer_l1_cm={}\n", self.chamfer_l1_cm));
        s.push_str(&format!("f_score_pct={}\n", self.f_score_pct));
        s.push_str(&format!("threshold_cm={}\n", self.threshold_cm));
        s.push_str(&format!("pred_count={}\n", self.pred_count));
        s.push_str(&format!("gt_count={}\n", self.gt_count));
        if let Some(d) = self.sample_density {
            s.push_str(&format!("sample_density_per_m2={d}\n"));
        }
        s.push_str("distance_cap=none\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegReport {
    /// Percent of ground-truth static points kept static.
    pub sa: Option<f64>,
    /// Percent of ground-truth dynamic points removed as dynamic.
    pub da: Option<f64>,
    /// Geometric mean of the two; undefined when either class is absent.
    pub aa: Option<f64>,
    pub static_total: usize,
    pub dynamic_total: usize,
}

impl std::fmt::Display for SegReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<f64>| match v {
            Some(x) => format!("{x:.2} %"),
            None => "n/a (class absent in ground truth)".to_string(),
        };
        writeln!(
            f,
            "segmentation over {} static / {} dynamic ground-truth points",
            self.static_total, self.dynamic_total
        )?;
        writeln!(f, "  SA: {}", show(self.sa))?;
        writeln!(f, "  DA: {}", show(self.da))?;
        writeln!(f, "  AA: {}", show(self.aa))
    }
}

impl SegReport {
    pub fn to_kv(&self) -> String {
        let line = |k: &str, v: Option<f64>| match v {
            Some(x) => format!("{k}={x}\n"),
            None => format!("{k}=n/a\n"),
        };
        let mut s = String::new();
        s.push_str(&line("sa_pct", self.sa));
        s.push_str(&line("da_pct", self.da));
        s.push_str(&line("aa_pct", self.aa));
        s.push_str(&format!("static_total={}\n", self.static_total));
        s.push_str(&format!("dynamic_total={}\n", self.dynamic_total));
        s
    }
}

/// Mean NN distance from each of `from` to `to`, plus the fraction of
/// `from` within `threshold` (inclusive) of `to`. Deterministic: chunk
/// partials are reduced in order.
fn directed_stats(from: &[Point3], to_index: &CellIndex, threshold_m: f64) -> (f64, f64) {
    let partials: Vec<(f64, usize)> = from
        .par_chunks(4096)
        .map(|chunk| {
            let mut sum = 0.0;
            let mut within = 0usize;
            for &p in chunk {
                let d = to_index.nearest_distance(p);
                sum += d;
                if d <= threshold_m {
                    within += 1;
                }
            }
            (sum, within)
        })
        .collect();
    let mut sum = 0.0;
    let mut within = 0usize;
    for (s, w) in partials {
        sum += s;
        within += w;
    }
    (sum / from.len() as f64, within as f64 / from.len() as f64)
}

fn nn_cell_edge(points: &[Point3], threshold_m: f64) -> f64 {
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let diag = (hi - lo).norm();
    let spacing = diag / (points.len() as f64).cbrt().max(1.0);
    spacing.max(threshold_m).clamp(1e-3, diag.max(1e-3))
}

/// Reconstruction metrics between a predicted point sample and a
/// ground-truth cloud. `threshold_cm` is the F-score threshold.
pub fn recon_metrics(pred: &[Point3], gt: &[Point3], threshold_cm: f64) -> Result<ReconReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidInput(
            "reconstruction metrics need nonempty prediction and ground truth".into(),
        ));
    }
    let threshold_m = threshold_cm / 100.0;
    let gt_index = CellIndex::build(gt, nn_cell_edge(gt, threshold_m));
    let pred_index = CellIndex::build(pred, nn_cell_edge(pred, threshold_m));
    let (accuracy_m, precision) = directed_stats(pred, &gt_index, threshold_m);
    let (completion_m, recall) = directed_stats(gt, &pred_index, threshold_m);
    let f_score = if precision + recall > 0.0 {
        100.0 * 2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ReconReport {
        completion_cm: completion_m * 100.0,
        accuracy_cm: accuracy_m * 100.0,
        chamfer_l1_cm: (completion_m + accuracy_m) / 2.0 * 100.0,
        f_score_pct: f_score,
        threshold_cm,
        pred_count: pred.len(),
        gt_count: gt.len(),
        sample_density: None,
    })
}

/// Point-wise segmentation accuracies against ground-truth labels.
pub fn seg_metrics(pred: &[PointClass], gt: &[PointClass]) -> Result<SegReport> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "label length mismatch: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let mut static_total = 0usize;
    let mut static_kept = 0usize;
    let mut dynamic_total = 0usize;
    let mut dynamic_removed = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        match g {
            PointClass::Static => {
                static_total += 1;
                if p == PointClass::Static {
                    static_kept += 1;
                }
            }
            PointClass::Dynamic => {
                dynamic_total += 1;
                if p == PointClass::Dynamic {
                    dynamic_removed += 1;
                }
            }
        }
    }
    let sa = (static_total > 0).then(|| 100.0 * static_kept as f64 / static_total as f64);
    let da = (dynamic_total > 0).then(|| 100.0 * dynamic_removed as f64 / dynamic_total as f64);
    let aa = match (sa, da) {
        (Some(s), Some(d)) => Some((s * d).sqrt()),
        _ => None,
    };
    Ok(SegReport {
        sa,
        da,
        aa,
        static_total,
        dynamic_total,
    })
}

/// Uniform area-weighted surface sampling of a mesh at `density` points
/// per square meter. Deterministic for a fixed seed.
pub fn sample_mesh_surface(mesh: &TriangleMesh, density: f64, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for tri in &mesh.triangles {
        let a = mesh.vertices[tri[0] as usize];
        let b = mesh.vertices[tri[1] as usize];
        let c = mesh.vertices[tri[2] as usize];
        let area = 0.5 * (b - a).cross(&(c - a)).norm();
        let expected = area * density;
        let mut count = expected.floor() as usize;
        if rng.gen_range(0.0..1.0) < expected.fract() {
            count += 1;
        }
        for _ in 0..count {
            let mut u: f64 = rng.gen_range(0.0..1.0);
            let mut v: f64 = rng.gen_range(0.0..1.0);
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + u * (b - a) + v * (c - a));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::brute_force_nearest;

    fn plane(z_shift: f64, spacing: f64, n: i32) -> Vec<Point3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push(Point3::new(i as f64 * spacing, j as f64 * spacing, z_shift));
            }
        }
        pts
    }

    #[test]
    fn identical_clouds_are_perfect() {
        let cloud = plane(0.0, 0.5, 10);
        let r = recon_metrics(&cloud, &cloud, 1.0).unwrap();
        assert_eq!(r.completion_cm, 0.0);
        assert_eq!(r.accuracy_cm, 0.0);
        assert_eq!(r.chamfer_l1_cm, 0.0);
        assert_eq!(r.f_score_pct, 100.0);
    }

    #[test]
    fn rigid_shift_hits_threshold_boundary() {
        // shift of exactly 0.25 m = 25 cm along z; in-plane spacing is
        // wide so each point's nearest neighbor is its shifted twin
        let gt = plane(0.0, 1.0, 8);
        let pred = plane(0.25, 1.0, 8);
        let at = recon_metrics(&pred, &gt, 25.0).unwrap();
        assert_eq!(at.f_score_pct, 100.0);
        assert!((at.completion_cm - 25.0).abs() < 1e-9);
        assert!((at.accuracy_cm - 25.0).abs() < 1e-9);
        assert!((at.chamfer_l1_cm - 25.0).abs() < 1e-9);
        let below = recon_metrics(&pred, &gt, 12.5).unwrap();
        assert_eq!(below.f_score_pct, 0.0);
    }

    #[test]
    fn f_score_harmonic_mean_by_hand() {
        // precision 8/10, recall 6/10 -> F = 2*.8*.6/1.4 = 68.5714...
        let mut pred = vec![Point3::origin(); 8];
        pred.extend(vec![Point3::new(100.0, 0.0, 0.0); 2]);
        let mut gt = vec![Point3::origin(); 6];
        gt.extend(vec![Point3::new(-100.0, 0.0, 0.0); 4]);
        let r = recon_metrics(&pred, &gt, 1.0).unwrap();
        assert!((r.f_score_pct - 2.0 * 0.8 * 0.6 / 1.4 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn symmetry_swaps_directed_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Point3> = (0..200)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<Point3> = (0..150)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let ab = recon_metrics(&a, &b, 10.0).unwrap();
        let ba = recon_metrics(&b, &a, 10.0).unwrap();
        assert!((ab.accuracy_cm - ba.completion_cm).abs() < 1e-9);
        assert!((ab.completion_cm - ba.accuracy_cm).abs() < 1e-9);
        assert!((ab.chamfer_l1_cm - ba.chamfer_l1_cm).abs() < 1e-9);
    }

    #[test]
    fn f_score_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let b: Vec<Point3> = (0..300)
            .map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let mut prev = -1.0;
        for threshold in [1.0, 5.0, 10.0, 25.0, 50.0, 200.0] {
            let r = recon_metrics(&a, &b, threshold).unwrap();
            assert!(r.f_score_pct >= prev);
            prev = r.f_score_pct;
        }
    }

    #[test]
    fn recon_matches_brute_force_nn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred: Vec<Point3> = (0..400)
            .map(|_| Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let gt: Vec<Point3> = (0..350)
            .map(|_| Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let r = recon_metrics(&pred, &gt, 20.0).unwrap();
        let acc: f64 =
            pred.iter().map(|&p| brute_force_nearest(&gt, p)).sum::<f64>() / pred.len() as f64;
        let comp: f64 =
            gt.iter().map(|&p| brute_force_nearest(&pred, p)).sum::<f64>() / gt.len() as f64;
        assert!((r.accuracy_cm - acc * 100.0).abs() < 1e-9);
        assert!((r.completion_cm - comp * 100.0).abs() < 1e-9);
        assert!((r.chamfer_l1_cm - (acc + comp) / 2.0 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(recon_metrics(&[], &[Point3::origin()], 1.0).is_err());
        assert!(recon_metrics(&[Point3::origin()], &[], 1.0).is_err());
    }

    #[test]
    fn seg_perfect_and_degenerate() {
        use PointClass::{Dynamic, Static};
        let gt = vec![Static, Static, Dynamic, Dynamic];
        let perfect = seg_metrics(&gt, &gt).unwrap();
        assert_eq!(perfect.sa, Some(100.0));
        assert_eq!(perfect.da, Some(100.0));
        assert_eq!(perfect.aa, Some(100.0));

        let all_static = vec![Static; 4];
        let r = seg_metrics(&all_static, &gt).unwrap();
        assert_eq!(r.sa, Some(100.0));
        assert_eq!(r.da, Some(0.0));
        assert_eq!(r.aa, Some(0.0));

        // absent dynamic class: DA and AA undefined
        let gt_static_only = vec![Static, Static];
        let r = seg_metrics(&[Static, Dynamic], &gt_static_only).unwrap();
        assert_eq!(r.sa, Some(50.0));
        assert_eq!(r.da, None);
        assert_eq!(r.aa, None);
    }

    #[test]
    fn seg_matches_confusion_matrix_on_random_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.gen_range(2..200);
            let flip = |r: &mut ChaCha8Rng| {
                if r.gen_bool(0.5) {
                    PointClass::Static
                } else {
                    PointClass::Dynamic
                }
            };
            let gt: Vec<PointClass> = (0..n).map(|_| flip(&mut rng)).collect();
            let pred: Vec<PointClass> = (0..n).map(|_| flip(&mut rng)).collect();
            let r = seg_metrics(&pred, &gt).unwrap();
            // brute-force confusion matrix
            let mut tp = 0;
            let mut tn = 0;
            let mut np = 0;
            let mut nn = 0;
            for (p, g) in pred.iter().zip(&gt) {
                match g {
                    PointClass::Dynamic => {
                        np += 1;
                        if *p == PointClass::Dynamic {
                            tp += 1;
                        }
                    }
                    PointClass::Static => {
                        nn += 1;
                        if *p == PointClass::Static {
                            tn += 1;
                        }
                    }
                }
            }
            if nn > 0 {
                assert!((r.sa.unwrap() - 100.0 * tn as f64 / nn as f64).abs() < 1e-12);
            }
            if np > 0 {
                assert!((r.da.unwrap() - 100.0 * tp as f64 / np as f64).abs() < 1e-12);
            }
            if let Some(aa) = r.aa {
                assert!((aa - (r.sa.unwrap() * r.da.unwrap()).sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn published_row_confirms_formula() {
        // SA and DA of a published comparison row: the geometric mean
        // lands on the printed AA within two-decimal precision
        let aa = (98.99f64 * 92.37).sqrt();
        assert!((aa - 95.63).abs() < 0.01, "aa = {aa}");
    }

    #[test]
    fn mesh_sampling_density_and_determinism() {
        // two triangles forming a 2 x 1 rectangle = 2 m^2
        let mesh = TriangleMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(2.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let a = sample_mesh_surface(&mesh, 500.0, 11);
        let b = sample_mesh_surface(&mesh, 500.0, 11);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x == y));
        let expected = 1000.0;
        assert!((a.len() as f64 - expected).abs() < 0.1 * expected);
        for p in &a {
            assert!(p.x >= 0.0 && p.x <= 2.0 && p.y >= 0.0 && p.y <= 1.0);
            assert_eq!(p.z, 0.0);
        }
    }
}
