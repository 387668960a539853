//! Tuning driver for the overfit recipe. Knobs come from the environment:
//! N, NP, NB, LR, ITERS, BS, DROP, CLUTTER, SEED, AUG (0 none, 1 default,
//! 2 shuffle only) and SAVE (checkpoint path). Prints progress every 100
//! iterations and a query-count sweep at the end.

use std::time::Instant;

use detr3d::data::{generate_scenes, AugmentSpec, GeneratorSpec, Scene};
use detr3d::model::{Checkpoint, Detector, ForwardOptions, ModelConfig};
use detr3d::tensor::AdamWConfig;
use detr3d::train::{evaluate_pair, ground_truth, predict, TrainConfig, Trainer};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(d)
}

fn main() {
    let n = env("N", 1024usize);
    let np = env("NP", 128usize);
    let nb = env("NB", 16usize);
    let lr = env("LR", 5e-4f64);
    let iters = env("ITERS", 2000u64);
    let bs = env("BS", 8usize);
    let drop = env("DROP", 1.0f64);
    let clutter = env("CLUTTER", 0.2f64);
    let cfg = ModelConfig {
        n_points_sampled: np,
        sa_max_neighbors: nb,
        dropout_enc: 0.1 * drop,
        dropout_dec: 0.3 * drop,
        ..ModelConfig::desk()
    };
    let spec = GeneratorSpec {
        num_scenes: 8,
        points_per_scene: n,
        clutter_fraction: clutter,
        val_fraction: 0.0,
        seed: env("SEED", 0u64),
        ..GeneratorSpec::default()
    };
    let scenes: Vec<Scene> = generate_scenes(&spec).unwrap();
    let norm: Vec<_> = scenes.iter().map(|s| s.normalize().unwrap()).collect();
    let gt = ground_truth(&scenes);
    let tc = TrainConfig {
        epochs: 100000,
        batch_size: bs,
        max_iterations: Some(iters),
        optimizer: AdamWConfig {
            base_lr: lr,
            ..AdamWConfig::default()
        },
        augment: match env("AUG", 0u8) {
            1 => Some(Default::default()),
            2 => Some(AugmentSpec {
                flip_probability: 0.0,
                ..Default::default()
            }),
            _ => None,
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Detector::new(cfg, 0).unwrap(), tc, 8).unwrap();
    let t0 = Instant::now();
    let mut epoch = 0;
    while !t.finished() {
        for b in t.epoch_batches(epoch, 8) {
            if t.finished() {
                break;
            }
            let refs: Vec<&Scene> = b.iter().map(|&i| &scenes[i]).collect();
            let r = t.step(&refs).unwrap();
            if r.iteration.is_multiple_of(100) {
                let dets = predict(&t.detector, &norm, ForwardOptions::eval(), None).unwrap();
                let m = evaluate_pair(&dets, &gt, 5, false);
                println!("it {} loss {:.3} c {:.3} s {:.3} g {:.3} sem {:.3} lr {:.2e} gn {:.2} map25 {:.3} map50 {:.3} ndet {} t {:.0}s",
                    r.iteration, r.loss, r.breakdown.center, r.breakdown.size, r.breakdown.giou, r.breakdown.semantic, r.lr, r.grad_norm, m.map25(), m.map50(), dets.len(), t0.elapsed().as_secs_f64());
            }
        }
        epoch += 1;
    }
    if let Ok(path) = std::env::var("SAVE") {
        Checkpoint::from_detector(&t.detector)
            .save(path.as_ref())
            .unwrap();
    }
    for b in [8, 16, 32, 64] {
        let opts = ForwardOptions {
            num_queries: Some(b),
            ..ForwardOptions::eval()
        };
        let dets = predict(&t.detector, &norm, opts, Some(0.25)).unwrap();
        let m = evaluate_pair(&dets, &gt, 5, false);
        println!("B {b} map25 {:.3} map50 {:.3}", m.map25(), m.map50());
    }
}
