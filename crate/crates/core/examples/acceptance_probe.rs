//! One-off probe: evaluates the synthetic-scene quality gates against a
//! trained checkpoint + dataset directory. Dev tool, superseded by the
//! acceptance test suite.

use rand::{Rng, SeedableRng};
use std::path::Path;
use tsdf4d_core::evaluation::{recon_metrics, sample_mesh_surface, seg_metrics};
use tsdf4d_core::mesher::{extract_mesh, MeshMode};
use tsdf4d_core::{checkpoint, io, synth, Point3, PointClass, QueryScratch, Vec3};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = Path::new(&args[1]);
    let data = Path::new(&args[2]);

    let model = checkpoint::load(ckpt).unwrap();
    let spec = synth::load_scene(&data.join("scene.toml")).unwrap();
    let seq = io::load_dataset(&data.join("scans"), &data.join("poses.txt")).unwrap();

    // ---- segmentation (criterion 4a style) ----
    let mut scratch = QueryScratch::for_model(&model);
    let mut predicted = Vec::new();
    let mut gt = Vec::new();
    for scan in &seq.scans {
        let labels =
            io::read_labels(&data.join("labels").join(format!("{:06}.label", scan.frame)))
                .unwrap();
        for (&p, &l) in scan.points_world.iter().zip(&labels) {
            let w1 = model.forward_static(p, &mut scratch);
            predicted.push(if w1 > 0.16 {
                PointClass::Dynamic
            } else {
                PointClass::Static
            });
            gt.push(l);
        }
    }
    let seg = seg_metrics(&predicted, &gt).unwrap();
    println!(
        "4a seg: SA {:.2} DA {:.2} AA {:.2}  (need >= 97 / 90 / 95)",
        seg.sa.unwrap_or(f64::NAN),
        seg.da.unwrap_or(f64::NAN),
        seg.aa.unwrap_or(f64::NAN)
    );

    // ---- static mesh vs wall cloud (4b) ----
    let voxel = model.cfg.finest_voxel_size;
    let mesh = extract_mesh(&model, MeshMode::Static, voxel / 2.0).unwrap();
    let (gt_cloud, _) = tsdf4d_core::ply::read_ply(&data.join("gt_static.ply")).unwrap();
    let pred_pts = sample_mesh_surface(&mesh, 10_000.0, 42);
    let recon = recon_metrics(&pred_pts, &gt_cloud, 100.0 * voxel).unwrap();
    println!(
        "4b recon: completion {:.2} accuracy {:.2} chamfer {:.2} cm (limit {:.2} cm), {} triangles",
        recon.completion_cm,
        recon.accuracy_cm,
        recon.chamfer_l1_cm,
        150.0 * voxel,
        mesh.triangles.len()
    );

    // ---- swept volume clearance (4c) ----
    if !spec.movers.is_empty() {
        let mut min_clearance = f64::INFINITY;
        for tri in &mesh.triangles {
            let (a, b, c) = (
                mesh.vertices[tri[0] as usize],
                mesh.vertices[tri[1] as usize],
                mesh.vertices[tri[2] as usize],
            );
            let centroid = Point3::from((a.coords + b.coords + c.coords) / 3.0);
            for p in [a, b, c, centroid] {
                min_clearance = min_clearance.min(spec.swept_volume_sdf(0, p));
            }
        }
        println!(
            "4c swept clearance: {:.3} m (need >= {:.3})",
            min_clearance,
            2.0 * voxel
        );
    }

    // ---- near-surface probes for flatness (5) and eikonal (6) ----
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let tau = model.cfg.truncation;
    let mut probes: Vec<(Point3, usize)> = Vec::new();
    while probes.len() < 1000 {
        let scan = &seq.scans[rng.gen_range(0..seq.scans.len())];
        let idx = rng.gen_range(0..scan.points_world.len());
        // only static surfaces: skip endpoints on the mover
        let labels =
            io::read_labels(&data.join("labels").join(format!("{:06}.label", scan.frame)))
                .unwrap();
        if labels[idx] == PointClass::Dynamic {
            continue;
        }
        let mut offset = Vec3::zeros();
        loop {
            offset = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * (tau / 2.0);
            if offset.norm() <= tau / 2.0 {
                break;
            }
        }
        probes.push((scan.points_world[idx] + offset, scan.frame));
    }

    let mut max_flat: f64 = 0.0;
    let mut eik_ok = 0;
    let mut norms = Vec::new();
    for &(p, t) in &probes {
        let w1 = model.forward_static(p, &mut scratch);
        for tt in 0..model.frames() {
            max_flat = max_flat.max((model.forward(p, tt, &mut scratch) - w1).abs());
        }
        let g = model.numerical_gradient(p, t, model.cfg.eps_end);
        norms.push(g.norm());
        if (g.norm() - 1.0).abs() <= 0.2 {
            eik_ok += 1;
        }
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "5 flatness: max_t |F - w1| = {:.4} (limit {:.4}; only meaningful on the static variant)",
        max_flat,
        0.05 * tau
    );
    println!(
        "6 eikonal: {}/1000 within 0.2 (need >= 900); norm p5 {:.2} p50 {:.2} p95 {:.2}",
        eik_ok, norms[50], norms[500], norms[950]
    );
}
