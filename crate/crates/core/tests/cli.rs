use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use detr3d::cli::{
    cmd_bench, cmd_eval, cmd_gen, cmd_predict, cmd_train, score_detections, RunConfig, BENCH_GRID,
    DETECTIONS_FILE, TRAIN_LOG,
};
use detr3d::data::{
    load_split, read_detections, read_manifest, write_scene, GeneratorSpec, Scene, Split,
    DETECTION_HEADER,
};
use detr3d::eval::ground_truth_as_detections;
use detr3d::model::{Checkpoint, Detector, ModelConfig};
use detr3d::train::{ground_truth, Trainer};
use detr3d::Error;

fn tiny(dir: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.dataset_dir = dir.join("data");
    c.out_dir = dir.join("out");
    c.generator = GeneratorSpec {
        num_scenes: 5,
        points_per_scene: 256,
        boxes_min: 2,
        boxes_max: 3,
        val_fraction: 0.2,
        seed: 3,
        ..GeneratorSpec::default()
    };
    c.model = ModelConfig {
        num_classes: 5,
        n_points_sampled: 64,
        num_queries: 8,
        sa_max_neighbors: 8,
        ..ModelConfig::toy()
    };
    c.train.epochs = 3;
    c.train.batch_size = 2;
    c.eval_every = 1;
    c
}

fn trained(dir: &Path) -> RunConfig {
    let mut c = tiny(dir);
    cmd_gen(&c).unwrap();
    let s = cmd_train(&c, &mut std::io::sink()).unwrap();
    c.checkpoint = Some(s.final_checkpoint);
    c
}

#[test]
fn gen_is_reproducible_and_splits_80_20() {
    let d = tempfile::tempdir().unwrap();
    let mut a = RunConfig::desk();
    a.dataset_dir = d.path().join("a");
    let ma = cmd_gen(&a).unwrap();
    assert_eq!((ma.train.len(), ma.val.len()), (32, 8));
    let mut b = a.clone();
    b.dataset_dir = d.path().join("b");
    assert_eq!(cmd_gen(&b).unwrap(), ma);
    assert_eq!(read_manifest(&b.dataset_dir).unwrap(), ma);

    a.generator.num_scenes = 0;
    a.dataset_dir = d.path().join("c");
    let err = cmd_gen(&a).unwrap_err();
    assert!(err.to_string().contains("empty dataset"));
}

#[test]
fn train_logs_terms_and_weights_and_writes_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny(d.path());
    cmd_gen(&c).unwrap();
    let s = cmd_train(&c, &mut std::io::sink()).unwrap();
    assert_eq!(s.epochs.len(), 3);
    assert_eq!(s.iterations, 6);
    assert!(s.final_checkpoint.exists());
    assert!(s.best_checkpoint.unwrap().exists());

    let log = fs::read_to_string(c.out_dir.join(TRAIN_LOG)).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    let echoed: detr3d::matchloss::MatchWeights =
        serde_json::from_value(lines[0]["match_weights"].clone()).unwrap();
    assert_eq!(echoed, c.train.match_weights);
    for l in &lines[1..] {
        for k in ["loss", "center", "size", "giou", "semantic", "lr"] {
            assert!(l[k].as_f64().unwrap().is_finite(), "{k}");
        }
    }

    // Same config and seed, same first-epoch loss to the bit.
    let mut again = c.clone();
    again.out_dir = d.path().join("out2");
    let s2 = cmd_train(&again, &mut std::io::sink()).unwrap();
    assert_eq!(s2.epochs[0].loss.to_bits(), s.epochs[0].loss.to_bits());
}

#[test]
fn resume_continues_from_the_saved_state() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny(d.path());
    cmd_gen(&c).unwrap();
    let scenes = load_split(&c.dataset_dir, Split::Train).unwrap();
    let refs: Vec<&Scene> = scenes.iter().take(2).collect();
    let mut t = Trainer::new(
        Detector::new(c.model.clone(), 1).unwrap(),
        c.train.clone(),
        scenes.len(),
    )
    .unwrap();
    for _ in 0..3 {
        t.step(&refs).unwrap();
    }
    let before = t.batch_loss(&refs).unwrap().loss;

    let mut ckpt = Checkpoint::from_detector(&t.detector);
    ckpt.optimizer = Some(t.optimizer.clone());
    let path = d.path().join("mid.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let resumed = Trainer::resume(
        back.to_detector().unwrap(),
        back.optimizer.unwrap(),
        c.train.clone(),
        scenes.len(),
    )
    .unwrap();
    assert_eq!(resumed.iteration, 3);
    let after = resumed.batch_loss(&refs).unwrap().loss;
    assert!(
        (after - before).abs() <= 0.01 * before.abs(),
        "{before} vs {after}"
    );

    // Through the command: resuming a finished run is a no-op that still
    // reports metrics.
    let mut rc = c.clone();
    let first = cmd_train(&rc, &mut std::io::sink()).unwrap();
    rc.checkpoint = Some(first.final_checkpoint);
    rc.out_dir = d.path().join("resumed");
    let second = cmd_train(&rc, &mut std::io::sink()).unwrap();
    assert!(second.epochs.is_empty());
    assert_eq!(second.iterations, first.iterations);
}

#[test]
fn eval_reports_sweeps_and_both_nms_settings() {
    let d = tempfile::tempdir().unwrap();
    let mut c = trained(d.path());
    c.eval_split = Split::Train;
    c.query_sweep = vec![4, 8, 16, 32];
    let s = cmd_eval(&c).unwrap();
    assert_eq!(s.depth_sweep.len(), c.model.dec_layers);
    assert_eq!(
        s.query_sweep
            .iter()
            .map(|r| r.num_queries)
            .collect::<Vec<_>>(),
        vec![4, 8, 16, 32]
    );
    assert_eq!(s.config, c);
    // Deterministic report.
    assert_eq!(cmd_eval(&c).unwrap(), s);

    let scenes = load_split(&c.dataset_dir, Split::Train).unwrap();
    let m = score_detections(
        &ground_truth_as_detections(&ground_truth(&scenes)),
        &scenes,
        5,
    );
    assert_eq!((m.map25(), m.map50()), (1.0, 1.0));
}

#[test]
fn depth_sweep_on_an_eight_layer_decoder_has_eight_rows() {
    let d = tempfile::tempdir().unwrap();
    let mut c = tiny(d.path());
    c.model.dec_layers = 8;
    cmd_gen(&c).unwrap();
    let path = d.path().join("init.json");
    Checkpoint::from_detector(&Detector::new(c.model.clone(), 0).unwrap())
        .save(&path)
        .unwrap();
    c.checkpoint = Some(path);
    let s = cmd_eval(&c).unwrap();
    assert_eq!(
        s.depth_sweep.iter().map(|r| r.depth).collect::<Vec<_>>(),
        (1..=8).collect::<Vec<_>>()
    );
    c.depth = Some(3);
    assert_eq!(cmd_eval(&c).unwrap().depth_sweep.len(), 3);
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let c = trained(d.path());
    let path = c.checkpoint.clone().unwrap();
    let mut ckpt = Checkpoint::load(&path).unwrap();
    ckpt.version = "9.0".into();
    ckpt.save(&path).unwrap();
    assert!(matches!(cmd_eval(&c), Err(Error::CheckpointVersion { .. })));
}

#[test]
fn predict_then_eval_matches_eval() {
    let d = tempfile::tempdir().unwrap();
    let mut c = trained(d.path());
    c.eval_split = Split::Train;
    let scenes = load_split(&c.dataset_dir, Split::Train).unwrap();
    for nms in [true, false] {
        c.nms = nms;
        let p = cmd_predict(&c, None).unwrap();
        let dets = read_detections(&p.detections_file).unwrap();
        let m = score_detections(&dets, &scenes, 5);
        let e = cmd_eval(&c).unwrap();
        assert!((m.map25() - e.primary().map25()).abs() <= 1e-9);
        assert!((m.map50() - e.primary().map50()).abs() <= 1e-9);
    }

    c.nms = true;
    let with = cmd_predict(&c, None).unwrap().num_detections;
    c.nms = false;
    let without = cmd_predict(&c, None).unwrap().num_detections;
    assert!(without >= with);
}

#[test]
fn predict_handles_empty_and_broken_inputs() {
    let d = tempfile::tempdir().unwrap();
    let mut c = trained(d.path());
    let p = cmd_predict(&c, Some(&[])).unwrap();
    assert_eq!(p.num_detections, 0);
    assert_eq!(
        fs::read_to_string(c.out_dir.join(DETECTIONS_FILE))
            .unwrap()
            .trim(),
        DETECTION_HEADER
    );

    let scenes = load_split(&c.dataset_dir, Split::Val).unwrap();
    let good = d.path().join("good.p3d");
    write_scene(&good, &scenes[0]).unwrap();
    let bad = d.path().join("bad.p3d");
    fs::write(&bad, "P3D 1 oops").unwrap();
    let missing = d.path().join("missing.p3d");
    c.export_obj = true;
    let files: Vec<PathBuf> = vec![bad.clone(), good, missing];
    let p = cmd_predict(&c, Some(&files)).unwrap();
    assert_eq!(p.scenes, vec!["good".to_string()]);
    assert_eq!(p.failures.len(), 2);
    assert_eq!(p.failures[0].0, bad);
    let obj = fs::read_to_string(&p.meshes[0]).unwrap();
    assert_eq!(
        obj.lines().filter(|l| l.starts_with("l ")).count(),
        12 * p.num_detections
    );
}

#[test]
fn bench_reproduces_the_grid() {
    let d = tempfile::tempdir().unwrap();
    let mut c = tiny(d.path());
    c.bench.repeats = 1;
    c.bench.num_queries = 8;
    let r = cmd_bench(&c).unwrap();
    let grid: Vec<(usize, usize)> = r
        .rows
        .iter()
        .map(|r| (r.enc_layers, r.dec_layers))
        .collect();
    assert_eq!(grid, BENCH_GRID.to_vec());
    assert!(r
        .rows
        .iter()
        .all(|r| r.median_ms > 0.0 && r.min_ms <= r.median_ms && r.median_ms <= r.max_ms));
    assert_eq!(r.rows[0].relative, 1.0);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detr3d"))
}

#[test]
fn binary_reports_errors_as_json() {
    let out = bin().args(["--preset", "nope", "gen"]).output().unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "contract");

    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let v: serde_json::Value =
        serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn binary_config_round_trip_and_overrides() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--preset",
            "overfit",
            "--seed",
            "9",
            "--no-nms",
            "--num-queries",
            "16",
            "--print-config",
            "gen",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (cfg.seed, cfg.train.seed, cfg.nms, cfg.num_queries),
        (9, 9, false, Some(16))
    );

    let path = d.path().join("run.json");
    cfg.save(&path).unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "--print-config", "gen"])
        .output()
        .unwrap();
    assert_eq!(
        serde_json::from_slice::<RunConfig>(&out.stdout).unwrap(),
        cfg
    );

    let mut wrong = serde_json::to_value(&cfg).unwrap();
    wrong["schema_version"] = 7.into();
    fs::write(&path, wrong.to_string()).unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "gen"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn binary_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let c = tiny(d.path());
    let cfg = d.path().join("run.json");
    c.save(&cfg).unwrap();
    let run = |args: &[&str]| {
        let out = bin().arg("--config").arg(&cfg).args(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen"]);
    let log = run(&["train"]);
    assert!(log.starts_with("lambda giou=2 center=1 class=0 objectness=0"));
    let ckpt = c.out_dir.join("final.ckpt.json");
    let ckpt = ckpt.to_str().unwrap();
    let report = run(&["eval", "--checkpoint", ckpt, "--query-sweep", "4,8"]);
    assert!(report.contains("mAP@0.25"));
    run(&["predict", "--checkpoint", ckpt, "--obj"]);
    assert!(c.out_dir.join(DETECTIONS_FILE).exists());
}
