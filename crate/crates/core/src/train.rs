//! Mini-batch training with deep supervision, and batch inference helpers
//! shared by evaluation and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentSpec, Detection, NormalizedScene, Scene};
use crate::error::{Error, Result};
use crate::eval::{detections_from_predictions, evaluate, EvalReport, GroundTruth};
use crate::matchloss::{deep_supervision_loss, LossBreakdown, LossWeights, MatchWeights};
use crate::model::{Detector, ForwardOptions};
use crate::tensor::{AdamW, AdamWConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the schedule length; the cosine decay spans this many steps.
    pub max_iterations: Option<u64>,
    pub optimizer: AdamWConfig,
    pub match_weights: MatchWeights,
    pub loss_weights: LossWeights,
    pub augment: Option<AugmentSpec>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            max_iterations: None,
            optimizer: AdamWConfig::default(),
            match_weights: MatchWeights::axis_aligned(),
            loss_weights: LossWeights::default(),
            augment: Some(AugmentSpec::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        self.match_weights.validate()?;
        self.loss_weights.validate()
    }

    pub fn iterations_per_epoch(&self, num_scenes: usize) -> u64 {
        num_scenes.div_ceil(self.batch_size) as u64
    }

    pub fn total_iterations(&self, num_scenes: usize) -> u64 {
        let full = self.epochs as u64 * self.iterations_per_epoch(num_scenes);
        self.max_iterations.map_or(full, |m| m.min(full))
    }
}

/// Loss and gradient of one batch, averaged over its scenes.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    /// Summed over decoder layers, averaged over scenes.
    pub breakdown: LossBreakdown,
    pub grads: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub detector: Detector,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    /// Steps taken so far.
    pub iteration: u64,
    pub total_iterations: u64,
}

fn scene_stream(seed: u64, iteration: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(slot as u64);
    rng
}

impl Trainer {
    pub fn new(detector: Detector, config: TrainConfig, num_scenes: usize) -> Result<Self> {
        config.validate()?;
        if num_scenes == 0 {
            return Err(Error::contract("training set is empty"));
        }
        let optimizer = AdamW::new(config.optimizer.clone(), detector.params.num_scalars());
        Ok(Trainer {
            total_iterations: config.total_iterations(num_scenes),
            detector,
            optimizer,
            config,
            iteration: 0,
        })
    }

    /// Continues from a saved optimizer state; the step count determines
    /// the position in the schedule.
    pub fn resume(
        detector: Detector,
        optimizer: AdamW,
        config: TrainConfig,
        num_scenes: usize,
    ) -> Result<Self> {
        let mut t = Self::new(detector, config, num_scenes)?;
        if optimizer.first_moment.len() != t.detector.params.num_scalars() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the model".into(),
            ));
        }
        t.iteration = optimizer.step_count;
        t.optimizer = optimizer;
        Ok(t)
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.total_iterations
    }

    /// Scene order of `epoch`: a seeded shuffle cut into batches.
    pub fn epoch_batches(&self, epoch: usize, num_scenes: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..num_scenes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Loss and averaged gradients for `batch` at the current iteration,
    /// without updating anything. Scenes run in parallel; results are
    /// combined in batch order so the outcome does not depend on threads.
    pub fn batch_loss(&self, batch: &[&Scene]) -> Result<BatchLoss> {
        let det = &self.detector;
        let cfg = &self.config;
        let oriented = batch.first().is_some_and(|s| s.oriented);
        let per_scene: Vec<Result<(f64, LossBreakdown, Vec<f64>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, scene)| {
                let mut rng = scene_stream(cfg.seed, self.iteration, slot);
                let scene = match &cfg.augment {
                    Some(a) => augment(scene, a, &mut rng)?,
                    None => (*scene).clone(),
                };
                let ns = scene.normalize()?;
                let mut tape = Tape::new();
                let p = det.params.bind(&mut tape);
                let out =
                    det.forward(&mut tape, &p, &ns.points, ForwardOptions::train(), &mut rng)?;
                let preds = out.decode_all(&tape);
                let (loss, layers) = deep_supervision_loss(
                    &mut tape,
                    &out.layers,
                    &preds,
                    &ns.boxes,
                    &cfg.match_weights,
                    &cfg.loss_weights,
                    oriented,
                )?;
                let grads = tape.backward(loss)?;
                let mut bd = LossBreakdown::default();
                for l in layers {
                    bd += l.breakdown;
                }
                Ok((tape.data(loss)[0], bd, p.flat_grads(&grads)))
            })
            .collect();

        let n = batch.len() as f64;
        let mut total = BatchLoss {
            loss: 0.0,
            breakdown: LossBreakdown::default(),
            grads: vec![0.0; det.params.num_scalars()],
        };
        for r in per_scene {
            let (loss, bd, grads) = r?;
            total.loss += loss / n;
            total.breakdown += scaled(bd, 1.0 / n);
            total
                .grads
                .iter_mut()
                .zip(&grads)
                .for_each(|(t, g)| *t += g / n);
        }
        if !total.loss.is_finite() || total.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "batch loss" });
        }
        Ok(total)
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Scene]) -> Result<StepReport> {
        let diverged = |e: Error, it: u64| Error::Diverged {
            iteration: it,
            scenes: batch.iter().map(|s| s.id.clone()).collect(),
            source: Box::new(e),
        };
        let bl = self.batch_loss(batch).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e, self.iteration),
            other => other,
        })?;
        let fraction = self.iteration as f64 / self.total_iterations.max(1) as f64;
        let mut flat = self.detector.params.flatten();
        let stats = self
            .optimizer
            .step(&mut flat, &bl.grads, fraction.min(1.0))?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(diverged(Error::NonFinite { op: "adamw" }, self.iteration));
        }
        self.detector.params.assign_flat(&flat)?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: self.iteration,
            loss: bl.loss,
            breakdown: bl.breakdown,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        })
    }
}

fn scaled(b: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        center: b.center * s,
        size: b.size * s,
        giou: b.giou * s,
        angle_residual: b.angle_residual * s,
        angle_class: b.angle_class * s,
        semantic: b.semantic * s,
        total: b.total * s,
    }
}

/// World-frame ground truth of `scenes`.
pub fn ground_truth(scenes: &[Scene]) -> GroundTruth {
    scenes
        .iter()
        .map(|s| (s.id.clone(), s.boxes.clone()))
        .collect()
}

/// Detections of every computed decoder layer: `result[l]` holds layer
/// `l`'s detections over all scenes, in scene order.
pub fn predict_layers(
    det: &Detector,
    scenes: &[NormalizedScene],
    opts: ForwardOptions,
    nms_threshold: Option<f64>,
) -> Result<Vec<Vec<Detection>>> {
    let per_scene: Vec<Result<Vec<Vec<Detection>>>> = scenes
        .par_iter()
        .map(|s| {
            let layers = det.predict(&s.points, opts)?;
            Ok(layers
                .iter()
                .map(|preds| {
                    detections_from_predictions(
                        &s.id,
                        preds,
                        &s.normalization,
                        s.oriented,
                        nms_threshold,
                    )
                })
                .collect())
        })
        .collect();
    let mut out: Vec<Vec<Detection>> = Vec::new();
    for r in per_scene {
        for (l, dets) in r?.into_iter().enumerate() {
            if out.len() <= l {
                out.push(Vec::new());
            }
            out[l].extend(dets);
        }
    }
    Ok(out)
}

/// Final-layer detections over all scenes.
pub fn predict(
    det: &Detector,
    scenes: &[NormalizedScene],
    opts: ForwardOptions,
    nms_threshold: Option<f64>,
) -> Result<Vec<Detection>> {
    Ok(predict_layers(det, scenes, opts, nms_threshold)?
        .pop()
        .unwrap_or_default())
}

/// Reports at IoU 0.25 and 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPair {
    pub at_25: EvalReport,
    pub at_50: EvalReport,
}

impl MapPair {
    pub fn map25(&self) -> f64 {
        self.at_25.map.unwrap_or(0.0)
    }

    pub fn map50(&self) -> f64 {
        self.at_50.map.unwrap_or(0.0)
    }
}

pub fn evaluate_pair(
    dets: &[Detection],
    gt: &GroundTruth,
    num_classes: usize,
    rotated: bool,
) -> MapPair {
    MapPair {
        at_25: evaluate(dets, gt, num_classes, 0.25, rotated),
        at_50: evaluate(dets, gt, num_classes, 0.5, rotated),
    }
}
