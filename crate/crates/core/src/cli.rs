//! Run configuration and the subcommands behind the `detr3d` binary:
//! dataset generation, training, evaluation with depth and query sweeps,
//! prediction export and forward-pass timing.
//!
//! Every command takes a fully resolved [`RunConfig`] and returns a
//! serializable report, so the binary is a thin argument parser.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_scene, load_split, read_scene, scene_rng, write_dataset, write_detections,
    write_scene, Detection, GeneratorSpec, Manifest, NormalizedScene, Scene, Split,
};
use crate::error::{Error, Result};
use crate::eval::{detections_from_predictions, EvalReport};
use crate::geometry::{box_corners, WorldBox, BOX_EDGES};
use crate::matchloss::{LossWeights, MatchWeights};
use crate::model::{Checkpoint, Detector, ForwardOptions, ModelConfig};
use crate::tensor::AdamWConfig;
use crate::train::{evaluate_pair, ground_truth, predict_layers, MapPair, TrainConfig, Trainer};

pub const RUN_CONFIG_SCHEMA: u32 = 1;
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval.json";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const BENCH_REPORT: &str = "bench.json";

/// Encoder/decoder depths timed by `bench` by default.
pub const BENCH_GRID: [(usize, usize); 7] =
    [(3, 3), (3, 6), (3, 8), (3, 10), (6, 6), (6, 8), (8, 8)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Timed repetitions per row; the median is reported.
    pub repeats: usize,
    pub grid: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 5,
            grid: BENCH_GRID.to_vec(),
            num_queries: 32,
        }
    }
}

/// Everything a command needs. A run is reproducible from this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Name of the preset this config started from; informational.
    pub preset: String,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Input checkpoint for eval, predict and bench, or to resume training.
    pub checkpoint: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of the network initialisation.
    pub seed: u64,
    /// Evaluate and keep the best checkpoint every this many epochs.
    pub eval_every: usize,
    pub eval_split: Split,
    pub nms: bool,
    pub nms_threshold: f64,
    pub num_queries: Option<usize>,
    pub depth: Option<usize>,
    /// Also report every decoder depth from 1 up to the evaluated one.
    pub depth_sweep: bool,
    /// Query counts evaluated with the same weights.
    pub query_sweep: Vec<usize>,
    /// Write a wireframe mesh per predicted scene.
    pub export_obj: bool,
    pub bench: BenchConfig,
}

impl RunConfig {
    /// `desk`, `full` or `overfit`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "overfit" => Ok(Self::overfit()),
            other => Err(Error::contract(format!(
                "unknown preset {other:?} (expected desk, full or overfit)"
            ))),
        }
    }

    /// CPU-sized defaults: training finishes in minutes.
    pub fn desk() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA,
            preset: "desk".into(),
            dataset_dir: "data".into(),
            out_dir: "runs".into(),
            checkpoint: None,
            generator: GeneratorSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            seed: 0,
            eval_every: 10,
            eval_split: Split::Val,
            nms: true,
            nms_threshold: 0.25,
            num_queries: None,
            depth: None,
            depth_sweep: true,
            query_sweep: Vec::new(),
            export_obj: false,
            bench: BenchConfig::default(),
        }
    }

    /// Full-size network and schedule. Far too slow for a CPU, shipped for
    /// completeness.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.preset = "full".into();
        c.generator.points_per_scene = 40_000;
        c.model = ModelConfig::full(c.generator.num_classes);
        c.train.epochs = 1080;
        c.bench.num_queries = 256;
        c
    }

    /// Eight scenes memorised by the desk network on a reduced point
    /// budget, without dropout or augmentation.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.preset = "overfit".into();
        c.generator = GeneratorSpec {
            num_scenes: 8,
            points_per_scene: 512,
            val_fraction: 0.0,
            ..GeneratorSpec::default()
        };
        c.model = ModelConfig {
            n_points_sampled: 64,
            sa_max_neighbors: 16,
            dropout_enc: 0.0,
            dropout_dec: 0.0,
            ..ModelConfig::desk()
        };
        c.train = TrainConfig {
            epochs: 2000,
            batch_size: 8,
            optimizer: AdamWConfig {
                base_lr: 2e-3,
                ..AdamWConfig::default()
            },
            augment: None,
            ..TrainConfig::default()
        };
        c.eval_every = 100;
        c.eval_split = Split::Train;
        c.query_sweep = vec![8, 16, 32, 64];
        c
    }

    /// Switches dataset, matching and loss to oriented boxes (or back).
    pub fn set_oriented(&mut self, oriented: bool) {
        self.generator.oriented = oriented;
        self.train.match_weights = if oriented {
            MatchWeights::oriented()
        } else {
            MatchWeights::axis_aligned()
        };
        self.train.loss_weights = LossWeights {
            giou_loss_enabled: !oriented,
            ..self.train.loss_weights
        };
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA {
            return Err(Error::contract(format!(
                "run config schema {} is not supported (expected {RUN_CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.generator.num_classes != self.model.num_classes {
            return Err(Error::contract(format!(
                "generator has {} classes, model {}",
                self.generator.num_classes, self.model.num_classes
            )));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::contract(format!(
                "nms_threshold {} outside (0, 1]",
                self.nms_threshold
            )));
        }
        if self.eval_every == 0 || self.bench.repeats == 0 {
            return Err(Error::contract(
                "eval_every and bench.repeats must be positive",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    fn nms(&self) -> Option<f64> {
        self.nms.then_some(self.nms_threshold)
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            num_queries: self.num_queries,
            depth: self.depth,
            ..ForwardOptions::eval()
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_model(cfg: &RunConfig) -> Result<(Detector, Checkpoint)> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::contract("this command needs --checkpoint"))?;
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.to_detector()?, ckpt))
}

fn check_scenes(scenes: &[Scene], model: &ModelConfig, num_queries: usize) -> Result<()> {
    for s in scenes {
        if s.num_classes != model.num_classes {
            return Err(Error::contract(format!(
                "scene {} has {} classes, model {}",
                s.id, s.num_classes, model.num_classes
            )));
        }
        if s.boxes.len() > num_queries {
            return Err(Error::contract(format!(
                "scene {} has {} boxes but only {num_queries} queries",
                s.id,
                s.boxes.len()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

pub fn cmd_gen(cfg: &RunConfig) -> Result<Manifest> {
    cfg.generator.validate()?;
    write_dataset(&cfg.dataset_dir, &cfg.generator)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    /// Means over the epoch's steps.
    pub loss: f64,
    pub center: f64,
    pub size: f64,
    pub giou: f64,
    pub angle_residual: f64,
    pub angle_class: f64,
    pub semantic: f64,
    pub map25: Option<f64>,
    pub map50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub best_map25: Option<f64>,
    /// Scores on the evaluation split at the end of training.
    pub final_metrics: MapPair,
}

/// Trains on the dataset's train split, writing a JSON-lines log, a
/// checkpoint at the end and one at the best evaluation mAP@0.25.
/// Progress lines go to `progress`. When the loss stops being finite the
/// offending batch is written to `out_dir/diverged_batch` before the error
/// is returned.
pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let train = load_split(&cfg.dataset_dir, Split::Train)?;
    check_scenes(&train, &cfg.model, cfg.model.num_queries)?;
    let eval_scenes = match cfg.eval_split {
        Split::Train => train.clone(),
        Split::Val => load_split(&cfg.dataset_dir, Split::Val)?,
    };
    let eval_norm: Vec<NormalizedScene> = eval_scenes
        .iter()
        .map(Scene::normalize)
        .collect::<Result<_>>()?;
    let eval_gt = ground_truth(&eval_scenes);
    let oriented = train.first().is_some_and(|s| s.oriented);

    create_dir(&cfg.out_dir)?;
    let mut trainer = match &cfg.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let opt = ckpt.optimizer.clone().ok_or_else(|| {
                Error::Checkpoint(format!(
                    "{} has no optimizer state to resume from",
                    path.display()
                ))
            })?;
            Trainer::resume(ckpt.to_detector()?, opt, cfg.train.clone(), train.len())?
        }
        None => Trainer::new(
            Detector::new(cfg.model.clone(), cfg.seed)?,
            cfg.train.clone(),
            train.len(),
        )?,
    };

    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = String::new();
    let header = serde_json::json!({ "config": cfg, "match_weights": cfg.train.match_weights, "loss_weights": cfg.train.loss_weights });
    let _ = writeln!(log, "{header}");
    let _ = writeln!(
        progress,
        "lambda giou={} center={} class={} objectness={}",
        cfg.train.match_weights.giou,
        cfg.train.match_weights.center,
        cfg.train.match_weights.class,
        cfg.train.match_weights.objectness
    );

    let per_epoch = cfg.train.iterations_per_epoch(train.len());
    let mut epoch = (trainer.iteration / per_epoch) as usize;
    let mut epochs = Vec::new();
    let mut best: Option<f64> = None;
    let evaluate_now = |det: &Detector| -> Result<MapPair> {
        let dets = predict_layers(det, &eval_norm, ForwardOptions::eval(), cfg.nms())?
            .pop()
            .unwrap_or_default();
        Ok(evaluate_pair(
            &dets,
            &eval_gt,
            cfg.model.num_classes,
            oriented,
        ))
    };
    let save = |trainer: &Trainer, path: &Path, metadata: serde_json::Value| -> Result<()> {
        let mut ckpt = Checkpoint::from_detector(&trainer.detector);
        ckpt.optimizer = Some(trainer.optimizer.clone());
        ckpt.metadata = metadata;
        ckpt.save(path)
    };

    while !trainer.finished() {
        let mut sums = EpochLog {
            epoch,
            iteration: 0,
            lr: 0.0,
            loss: 0.0,
            center: 0.0,
            size: 0.0,
            giou: 0.0,
            angle_residual: 0.0,
            angle_class: 0.0,
            semantic: 0.0,
            map25: None,
            map50: None,
        };
        let mut steps = 0usize;
        for batch in trainer.epoch_batches(epoch, train.len()) {
            if trainer.finished() {
                break;
            }
            let refs: Vec<&Scene> = batch.iter().map(|&i| &train[i]).collect();
            let r = match trainer.step(&refs) {
                Ok(r) => r,
                Err(e) => {
                    if matches!(e, Error::Diverged { .. }) {
                        let dump = cfg.out_dir.join("diverged_batch");
                        create_dir(&dump)?;
                        for s in &refs {
                            write_scene(&dump.join(format!("{}.p3d", s.id)), s)?;
                        }
                        fs::write(&log_path, &log).map_err(|err| Error::io(&log_path, err))?;
                    }
                    return Err(e);
                }
            };
            steps += 1;
            sums.iteration = r.iteration;
            sums.lr = r.lr;
            sums.loss += r.loss;
            sums.center += r.breakdown.center;
            sums.size += r.breakdown.size;
            sums.giou += r.breakdown.giou;
            sums.angle_residual += r.breakdown.angle_residual;
            sums.angle_class += r.breakdown.angle_class;
            sums.semantic += r.breakdown.semantic;
        }
        let n = steps.max(1) as f64;
        for v in [
            &mut sums.loss,
            &mut sums.center,
            &mut sums.size,
            &mut sums.giou,
            &mut sums.angle_residual,
            &mut sums.angle_class,
            &mut sums.semantic,
        ] {
            *v /= n;
        }
        if (epoch + 1).is_multiple_of(cfg.eval_every) || trainer.finished() {
            let m = evaluate_now(&trainer.detector)?;
            sums.map25 = Some(m.map25());
            sums.map50 = Some(m.map50());
            if best.is_none_or(|b| m.map25() > b) {
                best = Some(m.map25());
                save(
                    &trainer,
                    &cfg.out_dir.join(BEST_CHECKPOINT),
                    serde_json::json!({ "epoch": epoch, "iteration": trainer.iteration, "map25": m.map25(), "map50": m.map50(), "run": cfg }),
                )?;
            }
        }
        let line = serde_json::to_string(&sums)?;
        let _ = writeln!(log, "{line}");
        let _ = writeln!(progress, "{line}");
        epochs.push(sums);
        epoch += 1;
    }
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;

    let final_metrics = evaluate_now(&trainer.detector)?;
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    save(
        &trainer,
        &final_checkpoint,
        serde_json::json!({ "epoch": epoch, "iteration": trainer.iteration, "map25": final_metrics.map25(), "map50": final_metrics.map50(), "run": cfg }),
    )?;
    Ok(TrainSummary {
        epochs,
        iterations: trainer.iteration,
        final_checkpoint,
        best_checkpoint: best.map(|_| cfg.out_dir.join(BEST_CHECKPOINT)),
        best_map25: best,
        final_metrics,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub num_queries: usize,
    pub map25: f64,
    pub map50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config: RunConfig,
    pub num_scenes: usize,
    pub depth: usize,
    pub num_queries: usize,
    pub with_nms: MapPair,
    pub without_nms: MapPair,
    /// Rows for depths `1..=depth` at the evaluated query count, using the
    /// configured NMS setting. Empty unless requested.
    pub depth_sweep: Vec<SweepRow>,
    /// Rows for each requested query count at the evaluated depth.
    pub query_sweep: Vec<SweepRow>,
}

impl EvalSummary {
    /// The report matching the configured NMS setting.
    pub fn primary(&self) -> &MapPair {
        if self.config.nms {
            &self.with_nms
        } else {
            &self.without_nms
        }
    }
}

/// Scores of a set of detections at both thresholds, as the `eval` command
/// computes them.
pub fn score_detections(dets: &[Detection], scenes: &[Scene], num_classes: usize) -> MapPair {
    let oriented = scenes.first().is_some_and(|s| s.oriented);
    evaluate_pair(dets, &ground_truth(scenes), num_classes, oriented)
}

/// Evaluates a checkpoint on `cfg.eval_split`. One forward pass per scene
/// yields every decoder layer, so the depth sweep costs no extra compute.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let (det, _) = load_model(cfg)?;
    let scenes = load_split(&cfg.dataset_dir, cfg.eval_split)?;
    let summary = evaluate_model(cfg, &det, &scenes)?;
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(EVAL_REPORT), &summary)?;
    Ok(summary)
}

/// The body of `eval` on scenes already in memory.
pub fn evaluate_model(cfg: &RunConfig, det: &Detector, scenes: &[Scene]) -> Result<EvalSummary> {
    let k = det.config.num_classes;
    let depth = cfg.depth.unwrap_or(det.config.dec_layers);
    let num_queries = cfg.num_queries.unwrap_or(det.config.num_queries);
    check_scenes(scenes, &det.config, num_queries)?;
    let norm: Vec<NormalizedScene> = scenes.iter().map(Scene::normalize).collect::<Result<_>>()?;
    let opts = cfg.forward_options();

    let with = predict_layers(det, &norm, opts, Some(cfg.nms_threshold))?;
    let without = predict_layers(det, &norm, opts, None)?;
    let layers = if cfg.nms { &with } else { &without };
    let depth_sweep = if cfg.depth_sweep {
        layers
            .iter()
            .enumerate()
            .map(|(l, dets)| {
                let m = score_detections(dets, scenes, k);
                SweepRow {
                    depth: l + 1,
                    num_queries,
                    map25: m.map25(),
                    map50: m.map50(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut query_sweep = Vec::with_capacity(cfg.query_sweep.len());
    for &b in &cfg.query_sweep {
        let o = ForwardOptions {
            num_queries: Some(b),
            ..opts
        };
        let dets = predict_layers(det, &norm, o, cfg.nms())?
            .pop()
            .unwrap_or_default();
        let m = score_detections(&dets, scenes, k);
        query_sweep.push(SweepRow {
            depth,
            num_queries: b,
            map25: m.map25(),
            map50: m.map50(),
        });
    }
    Ok(EvalSummary {
        config: cfg.clone(),
        num_scenes: scenes.len(),
        depth,
        num_queries,
        with_nms: score_detections(with.last().map_or(&[][..], Vec::as_slice), scenes, k),
        without_nms: score_detections(without.last().map_or(&[][..], Vec::as_slice), scenes, k),
        depth_sweep,
        query_sweep,
    })
}

/// Human-readable table of an evaluation.
pub fn format_eval(s: &EvalSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenes {}  depth {}  queries {}",
        s.num_scenes, s.depth, s.num_queries
    );
    let row = |out: &mut String, name: &str, m: &MapPair| {
        let _ = writeln!(
            out,
            "{name:<12} mAP@0.25 {:.4}  mAP@0.5 {:.4}",
            m.map25(),
            m.map50()
        );
    };
    row(&mut out, "nms", &s.with_nms);
    row(&mut out, "no-nms", &s.without_nms);
    let per_class = |out: &mut String, r: &EvalReport| {
        for c in &r.per_class {
            let ap = c.ap.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                out,
                "  class {} gt {} det {} AP@{} {ap}",
                c.class_id, c.num_gt, c.num_detections, r.iou_threshold
            );
        }
    };
    per_class(&mut out, &s.primary().at_25);
    per_class(&mut out, &s.primary().at_50);
    if !s.depth_sweep.is_empty() {
        let _ = writeln!(out, "depth  mAP@0.25  mAP@0.5");
        for r in &s.depth_sweep {
            let _ = writeln!(out, "{:>5}  {:.4}    {:.4}", r.depth, r.map25, r.map50);
        }
    }
    if !s.query_sweep.is_empty() {
        let _ = writeln!(out, "queries  mAP@0.25  mAP@0.5");
        for r in &s.query_sweep {
            let _ = writeln!(
                out,
                "{:>7}  {:.4}    {:.4}",
                r.num_queries, r.map25, r.map50
            );
        }
    }
    out
}

// ---------------------------------------------------------------------------
// predict

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub detections_file: PathBuf,
    pub num_detections: usize,
    pub scenes: Vec<String>,
    /// Files that could not be read or run, with the reason. The others
    /// are still predicted.
    pub failures: Vec<(PathBuf, String)>,
    pub meshes: Vec<PathBuf>,
}

/// Predicts on `inputs` (scene files), or on `cfg.eval_split` of the
/// dataset when `inputs` is `None`, and writes world-frame detections.
pub fn cmd_predict(cfg: &RunConfig, inputs: Option<&[PathBuf]>) -> Result<PredictSummary> {
    cfg.validate()?;
    let (det, _) = load_model(cfg)?;
    let mut failures = Vec::new();
    let scenes: Vec<Scene> = match inputs {
        Some(files) => files
            .iter()
            .filter_map(|f| match read_scene(f) {
                Ok(s) => Some(s),
                Err(e) => {
                    failures.push((f.clone(), e.to_string()));
                    None
                }
            })
            .collect(),
        None => load_split(&cfg.dataset_dir, cfg.eval_split)?,
    };
    create_dir(&cfg.out_dir)?;
    let mut all = Vec::new();
    let mut names = Vec::new();
    let mut meshes = Vec::new();
    for s in &scenes {
        match predict_scene(cfg, &det, s) {
            Ok(dets) => {
                if cfg.export_obj {
                    let path = cfg.out_dir.join(format!("{}.obj", s.id));
                    let boxes: Vec<WorldBox> = dets.iter().map(|d| d.bbox).collect();
                    fs::write(&path, wireframe_obj(&s.points, &boxes))
                        .map_err(|e| Error::io(&path, e))?;
                    meshes.push(path);
                }
                names.push(s.id.clone());
                all.extend(dets);
            }
            Err(e) => failures.push((PathBuf::from(&s.id), e.to_string())),
        }
    }
    let path = cfg.out_dir.join(DETECTIONS_FILE);
    write_detections(&path, &all)?;
    Ok(PredictSummary {
        detections_file: path,
        num_detections: all.len(),
        scenes: names,
        failures,
        meshes,
    })
}

fn predict_scene(cfg: &RunConfig, det: &Detector, scene: &Scene) -> Result<Vec<Detection>> {
    check_scenes(
        std::slice::from_ref(scene),
        &det.config,
        cfg.num_queries.unwrap_or(det.config.num_queries),
    )?;
    let ns = scene.normalize()?;
    let layers = det.predict(&ns.points, cfg.forward_options())?;
    let last = layers.last().map_or(&[][..], Vec::as_slice);
    Ok(detections_from_predictions(
        &ns.id,
        last,
        &ns.normalization,
        ns.oriented,
        cfg.nms(),
    ))
}

/// Wavefront OBJ text: the points as vertices, then each box as eight
/// vertices joined by its twelve edges.
pub fn wireframe_obj(points: &[[f64; 3]], boxes: &[WorldBox]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} points, {} boxes", points.len(), boxes.len());
    for p in points {
        let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
    }
    let mut base = points.len() + 1;
    for b in boxes {
        let _ = writeln!(s, "g box_class{}", b.class_id);
        for c in box_corners(b) {
            let _ = writeln!(s, "v {} {} {}", c[0], c[1], c[2]);
        }
        for (i, j) in BOX_EDGES {
            let _ = writeln!(s, "l {} {}", base + i, base + j);
        }
        base += 8;
    }
    s
}

// ---------------------------------------------------------------------------
// bench

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Median relative to the first row.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub num_points: usize,
    pub repeats: usize,
    /// Relative spread between medians of repeated runs that should be
    /// read as noise rather than a difference.
    pub tolerance: f64,
    pub rows: Vec<BenchRow>,
}

/// Times one inference forward pass for each (encoder, decoder) depth of
/// the grid on a generated scene. Weights come from the checkpoint when
/// its shape matches the row, otherwise from a fresh initialisation;
/// timing does not depend on the values.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let base = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?.0.config,
        None => cfg.model.clone(),
    };
    let scene = generate_scene(
        &cfg.generator,
        "bench",
        &mut scene_rng(cfg.generator.seed, 0),
    )?
    .normalize()?;
    let mut rows: Vec<BenchRow> = Vec::with_capacity(cfg.bench.grid.len());
    for &(enc, dec) in &cfg.bench.grid {
        let mut model = ModelConfig {
            enc_layers: enc,
            dec_layers: dec,
            num_queries: cfg.bench.num_queries,
            ..base.clone()
        };
        if model.masked_encoder {
            // Truncate the radius schedule, or extend it by its last step.
            let r = &base.mask_radii;
            let last = r.last().copied().unwrap_or(0.4);
            let step = if r.len() > 1 {
                last - r[r.len() - 2]
            } else {
                last
            };
            model.mask_radii = (0..enc)
                .map(|i| {
                    r.get(i)
                        .copied()
                        .unwrap_or(last + step * (i + 1 - r.len()) as f64)
                })
                .collect();
        }
        let det = Detector::new(model, cfg.seed)?;
        let opts = ForwardOptions {
            num_queries: Some(cfg.bench.num_queries),
            ..ForwardOptions::eval()
        };
        let mut times = Vec::with_capacity(cfg.bench.repeats);
        for _ in 0..cfg.bench.repeats {
            let t = Instant::now();
            det.predict(&scene.points, opts)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let median_ms = times[times.len() / 2];
        let relative = rows.first().map_or(1.0, |r0| median_ms / r0.median_ms);
        rows.push(BenchRow {
            enc_layers: enc,
            dec_layers: dec,
            num_queries: cfg.bench.num_queries,
            median_ms,
            min_ms: times[0],
            max_ms: times[times.len() - 1],
            relative,
        });
    }
    let report = BenchReport {
        config: cfg.clone(),
        num_points: scene.points.len(),
        repeats: cfg.bench.repeats,
        tolerance: 0.25,
        rows,
    };
    create_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(BENCH_REPORT), &report)?;
    Ok(report)
}
