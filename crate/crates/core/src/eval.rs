//! Average precision at a fixed IoU threshold, per class and averaged.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Detection, Normalization};
use crate::geometry::{iou, nms, ScoredBox, WorldBox};
use crate::model::BoxPrediction;

/// Precision/recall after each ranked detection and the interpolated area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

/// Curve for detections already ranked by score; `tp[i]` marks a true
/// positive. Precision is replaced by its running maximum from the right
/// before integrating over recall.
pub fn pr_curve(tp: &[bool], num_gt: usize) -> PrCurve {
    assert!(num_gt > 0, "AP is undefined without ground truth");
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    PrCurve {
        recall,
        precision,
        ap,
    }
}

pub fn ap_from_pr(tp: &[bool], num_gt: usize) -> f64 {
    pr_curve(tp, num_gt).ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
}

/// Ground-truth boxes keyed by scene id.
pub type GroundTruth = BTreeMap<String, Vec<WorldBox>>;

/// Scores `detections` against `gt` for classes `0..num_classes`.
///
/// Per class, detections are ranked by score (ties by scene id, then input
/// order). Each takes the highest-IoU ground truth of its class in its scene
/// that no earlier detection took (ties to the lower index) and counts as a
/// true positive when that IoU reaches `iou_threshold`.
pub fn evaluate(
    detections: &[Detection],
    gt: &GroundTruth,
    num_classes: usize,
    iou_threshold: f64,
    rotated: bool,
) -> EvalReport {
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let gt_k: HashMap<&str, Vec<&WorldBox>> = gt
            .iter()
            .map(|(s, boxes)| {
                (
                    s.as_str(),
                    boxes.iter().filter(|b| b.class_id == k).collect(),
                )
            })
            .collect();
        let num_gt: usize = gt_k.values().map(Vec::len).sum();
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class_id == k)
            .collect();
        ranked.sort_by(|(i, a), (j, b)| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.scene_id.cmp(&b.scene_id))
                .then(i.cmp(j))
        });
        let mut used: HashMap<&str, Vec<bool>> = gt_k
            .iter()
            .map(|(s, b)| (*s, vec![false; b.len()]))
            .collect();
        let mut tp = Vec::with_capacity(ranked.len());
        for (_, d) in &ranked {
            let Some(boxes) = gt_k.get(d.scene_id.as_str()) else {
                tp.push(false);
                continue;
            };
            let taken = used.get_mut(d.scene_id.as_str()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in boxes.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let o = iou(&d.bbox, b, rotated);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= iou_threshold => {
                    taken[g] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        per_class.push(ClassAp {
            class_id: k,
            num_gt,
            num_detections: ranked.len(),
            ap: (num_gt > 0).then(|| ap_from_pr(&tp, num_gt)),
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    EvalReport {
        iou_threshold,
        per_class,
        map,
    }
}

/// Converts one scene's predictions into world-frame detections.
///
/// Predictions whose most likely class is background are dropped; the
/// score is the probability of the predicted class. With `nms_threshold`
/// set, per-class NMS runs on the world-frame boxes.
pub fn detections_from_predictions(
    scene_id: &str,
    preds: &[BoxPrediction],
    normalization: &Normalization,
    oriented: bool,
    nms_threshold: Option<f64>,
) -> Vec<Detection> {
    let dets: Vec<Detection> = preds
        .iter()
        .filter_map(|p| {
            let (class_id, score) = p.best_class()?;
            Some(Detection {
                scene_id: scene_id.to_string(),
                class_id,
                score,
                bbox: normalization.denormalize_box(&p.to_box(class_id, oriented)),
            })
        })
        .collect();
    match nms_threshold {
        None => dets,
        Some(t) => {
            let scored: Vec<ScoredBox> = dets
                .iter()
                .map(|d| ScoredBox {
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect();
            nms(&scored, t, oriented)
                .into_iter()
                .map(|i| dets[i].clone())
                .collect()
        }
    }
}

/// Ground-truth boxes as perfect detections with score 1.
pub fn ground_truth_as_detections(gt: &GroundTruth) -> Vec<Detection> {
    gt.iter()
        .flat_map(|(s, boxes)| {
            boxes.iter().map(move |b| Detection {
                scene_id: s.clone(),
                class_id: b.class_id,
                score: 1.0,
                bbox: *b,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64, class_id: usize) -> WorldBox {
        WorldBox::axis_aligned([x, 0.0, 0.0], [1.0; 3], class_id)
    }

    fn det(scene: &str, score: f64, b: WorldBox) -> Detection {
        Detection {
            scene_id: scene.into(),
            class_id: b.class_id,
            score,
            bbox: b,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_from_pr(&[true, true], 2), 1.0);
        assert_eq!(ap_from_pr(&[false, false], 2), 0.0);
        assert_eq!(ap_from_pr(&[true, false, true], 2), 0.5 + (2.0 / 3.0) * 0.5);
        assert_eq!(ap_from_pr(&[], 3), 0.0);
    }

    #[test]
    fn perfect_detections_score_one() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![cube(0.0, 0), cube(5.0, 1)]);
        gt.insert("b".into(), vec![cube(2.0, 1)]);
        let r = evaluate(&ground_truth_as_detections(&gt), &gt, 3, 0.5, false);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.per_class[2].ap, None);
    }

    #[test]
    fn one_hit_one_false_positive() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![cube(0.0, 0), cube(5.0, 0)]);
        // IoU 0.9 / 1.1 with the first cube
        let hit = WorldBox::axis_aligned([0.0, 0.0, 0.0], [1.0, 1.0, 0.9], 0);
        let r = evaluate(
            &[det("a", 0.9, hit), det("a", 0.8, cube(20.0, 0))],
            &gt,
            1,
            0.25,
            false,
        );
        assert_eq!(r.map, Some(0.5));
    }

    #[test]
    fn duplicates_are_false_positives() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![cube(0.0, 0)]);
        let dets = [det("a", 0.9, cube(0.0, 0)), det("a", 0.8, cube(0.0, 0))];
        let r = evaluate(&dets, &gt, 1, 0.5, false);
        assert_eq!(r.map, Some(1.0));
        // Higher-ranked duplicate pushes the true hit down.
        let mut gt2 = gt.clone();
        gt2.insert("b".into(), vec![cube(0.0, 0)]);
        let dets = [
            det("a", 0.9, cube(0.0, 0)),
            det("a", 0.8, cube(0.0, 0)),
            det("b", 0.7, cube(0.0, 0)),
        ];
        let r = evaluate(&dets, &gt2, 1, 0.5, false);
        assert_eq!(r.map, Some(0.5 + 0.5 * 2.0 / 3.0));
    }

    #[test]
    fn wrong_scene_does_not_match() {
        let mut gt = GroundTruth::new();
        gt.insert("a".into(), vec![cube(0.0, 0)]);
        let r = evaluate(&[det("b", 0.9, cube(0.0, 0))], &gt, 1, 0.5, false);
        assert_eq!(r.map, Some(0.0));
    }
}
