//! Timing probe for the default synthetic scene. Not part of the test
//! suite; run with `cargo run -p tsdf4d-core --example profile --release`.

use std::time::Instant;
use tsdf4d_core::field::FieldModel;
use tsdf4d_core::grid::FeatureGrid;
use tsdf4d_core::sampling::build_pool;
use tsdf4d_core::training::{EpsSchedule, Trainer};
use tsdf4d_core::MapConfig;

fn main() {
    micro();
    let spec = tsdf4d_core::synth::default_scene();
    let t0 = Instant::now();
    let (seq, _gt) = tsdf4d_core::synth::simulate(&spec).unwrap();
    println!(
        "simulate: {:.2?} ({} scans, {} points)",
        t0.elapsed(),
        seq.frame_count(),
        seq.total_points()
    );

    let cfg = MapConfig::default();
    let t0 = Instant::now();
    let pool = build_pool(&seq, &cfg);
    println!(
        "build_pool: {:.2?} (surface {} / free {} / certain {})",
        t0.elapsed(),
        pool.surface.len(),
        pool.free.len(),
        pool.certain.len()
    );

    let t0 = Instant::now();
    let grid = FeatureGrid::allocate(&seq, pool.positions(), &cfg).unwrap();
    println!(
        "allocate: {:.2?} ({} vertices over {} levels)",
        t0.elapsed(),
        grid.total_vertices(),
        grid.levels.len()
    );

    let mut model = FieldModel::init(cfg.clone(), seq.frame_count(), grid).unwrap();
    let mut trainer = Trainer::new(&model);
    let schedule = EpsSchedule::from_config(&cfg);
    let batch: Vec<_> = pool
        .surface
        .iter()
        .take(1024)
        .chain(pool.free.iter().take(1536))
        .chain(pool.certain.iter().take(1536))
        .copied()
        .collect();

    let t0 = Instant::now();
    let steps = 50;
    for step in 0..steps {
        trainer.train_step(&mut model, &batch, schedule.eps_at(step));
    }
    let per_step = t0.elapsed() / steps as u32;
    println!(
        "train_step: {per_step:.2?} per step -> {:.1} min for {} steps",
        (per_step * cfg.train_steps as u32).as_secs_f64() / 60.0,
        cfg.train_steps
    );
}

fn micro() {
    use rand::SeedableRng;
    use tsdf4d_core::mlp::{Mlp, MlpTape};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mlp = Mlp::new(8, 2, 64, 32, &mut rng);
    let mut tape = MlpTape::default();
    let x = [0.3f64, -0.1, 0.7, 0.2, -0.5, 0.9, 0.4, -0.8];
    let upstream: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut grad = vec![0.0; mlp.param_count()];
    let mut d_input = [0.0f64; 8];
    let n = 100_000u32;

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        mlp.forward(&x, &mut tape);
        acc += tape.output()[0];
    }
    let fwd = t0.elapsed() / n;

    let t0 = Instant::now();
    for _ in 0..n {
        mlp.forward(&x, &mut tape);
        mlp.backward(&mut tape, &upstream, &mut grad, &mut d_input);
        acc += d_input[0];
    }
    let fwd_bwd = t0.elapsed() / n;
    println!("mlp fwd: {fwd:.2?}   fwd+bwd: {fwd_bwd:.2?}   (checksum {acc:.3})");
}
