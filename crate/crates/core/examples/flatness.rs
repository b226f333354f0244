//! One-off probe: temporal flatness + eikonal quality of a checkpoint.
use rand::{Rng, SeedableRng};
use tsdf4d_core::{checkpoint, Point3, QueryScratch};

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let model = checkpoint::load(std::path::Path::new(&path)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut scratch = QueryScratch::for_model(&model);
    // probes near the walls of the 6x6x3 room at [-3,3]^2 x [0,3]
    let mut max_flat: f64 = 0.0;
    let mut eik_ok = 0;
    let mut norms: Vec<f64> = Vec::new();
    let n = 1000;
    for _ in 0..n {
        // pick a wall point and offset it slightly inward
        let wall = rng.gen_range(0..5);
        let (mut x, mut y, mut z) = (
            rng.gen_range(-2.9..2.9),
            rng.gen_range(-2.9..2.9),
            rng.gen_range(0.1..2.9),
        );
        match wall {
            0 => x = -3.0 + rng.gen_range(0.0..0.2),
            1 => x = 3.0 - rng.gen_range(0.0..0.2),
            2 => y = -3.0 + rng.gen_range(0.0..0.2),
            3 => y = 3.0 - rng.gen_range(0.0..0.2),
            _ => z = rng.gen_range(0.0..0.2),
        }
        let p = Point3::new(x, y, z);
        let w1 = model.forward_static(p, &mut scratch);
        for t in 0..model.frames() {
            let f = model.forward(p, t, &mut scratch);
            max_flat = max_flat.max((f - w1).abs());
        }
        let t = rng.gen_range(0..model.frames());
        let g = model.numerical_gradient(p, t, model.cfg.eps_end);
        norms.push(g.norm());
        if (g.norm() - 1.0).abs() <= 0.2 {
            eik_ok += 1;
        }
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "norm percentiles: p5 {:.3} p25 {:.3} p50 {:.3} p75 {:.3} p95 {:.3}",
        norms[50], norms[250], norms[500], norms[750], norms[950]
    );
    println!("max |F(p,t) - w1(p)| over probes: {max_flat:.5} (limit 0.05*tau = {:.5})", 0.05 * model.cfg.truncation);
    println!("eikonal ok: {eik_ok}/{n}");
}
