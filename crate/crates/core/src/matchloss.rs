//! Bipartite matching of predictions to ground truth and the set loss.
//!
//! Matching works on plain values, so the assignment is a constant as far as
//! the gradient tape is concerned.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_axis_aligned, giou_rotated, WorldBox};
use crate::model::{quantize_angle, BoxPrediction, HeadOutput};
use crate::tensor::{Tape, Tensor, Var};

/// Coefficients of the matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub giou: f64,
    pub center: f64,
    pub class: f64,
    pub objectness: f64,
}

impl MatchWeights {
    /// Setting used for axis-aligned indoor scans.
    pub fn axis_aligned() -> Self {
        MatchWeights {
            giou: 2.0,
            center: 1.0,
            class: 0.0,
            objectness: 0.0,
        }
    }

    /// Setting used for oriented single-view scans.
    pub fn oriented() -> Self {
        MatchWeights {
            giou: 3.0,
            center: 5.0,
            class: 1.0,
            objectness: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(
            "match",
            &[self.giou, self.center, self.class, self.objectness],
        )
    }
}

/// Coefficients of the set loss. Object classes are weighted by
/// `1 - background_class_weight` in the semantic cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub center: f64,
    pub size: f64,
    pub angle_residual: f64,
    pub angle_class: f64,
    pub semantic: f64,
    pub background_class_weight: f64,
    pub giou_loss_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            center: 5.0,
            size: 1.0,
            angle_residual: 1.0,
            angle_class: 0.1,
            semantic: 5.0,
            background_class_weight: 0.2,
            giou_loss_enabled: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_weights(
            "loss",
            &[
                self.center,
                self.size,
                self.angle_residual,
                self.angle_class,
                self.semantic,
                self.background_class_weight,
            ],
        )?;
        if self.background_class_weight > 1.0 {
            return Err(Error::contract("background_class_weight must be at most 1"));
        }
        Ok(())
    }
}

fn check_weights(what: &str, w: &[f64]) -> Result<()> {
    if w.iter().all(|v| v.is_finite() && *v >= 0.0) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{what} weights must be finite and nonnegative: {w:?}"
        )))
    }
}

/// Row-major `rows x cols` matrix; rows are predictions, columns ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.data[pred * self.cols + gt]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Ground-truth index per prediction; `None` is background.
    pub assignment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl MatchResult {
    /// `(prediction, ground truth)` pairs ordered by prediction index.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
            .collect()
    }
}

pub fn match_cost_matrix(
    preds: &[BoxPrediction],
    gts: &[WorldBox],
    w: &MatchWeights,
    oriented: bool,
) -> CostMatrix {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let pbox = p.to_box(0, oriented);
        let not_bg = 1.0 - p.background_prob();
        for g in gts {
            let giou = if w.giou == 0.0 {
                0.0
            } else if oriented {
                giou_rotated(&pbox, g)
            } else {
                giou_axis_aligned(&pbox, g)
            };
            let l1: f64 = (0..3).map(|a| (p.center[a] - g.center[a]).abs()).sum();
            let cls = p.class_probs.get(g.class_id).copied().unwrap_or(0.0);
            data.push(-w.giou * giou + w.center * l1 - w.class * cls + w.objectness * not_bg);
        }
    }
    CostMatrix {
        rows: preds.len(),
        cols: gts.len(),
        data,
    }
}

/// Minimum-cost assignment of `rows` items to distinct `cols` (rows <= cols)
/// by shortest augmenting paths with potentials. Returns the column of
/// every row.
fn solve_assignment(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Optimal matching of every ground truth to a distinct prediction.
///
/// Among optimal assignments (up to a relative tolerance of 1e-9) the one
/// that gives ground truth 0 the lowest prediction index, then ground truth
/// 1, and so on, is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (b, g) = (cost.rows, cost.cols);
    if b < g {
        return Err(Error::contract(format!(
            "{b} predictions cannot cover {g} ground-truth boxes"
        )));
    }
    if cost.data.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("cost matrix has non-finite entries"));
    }
    if g == 0 {
        return Ok(MatchResult {
            assignment: vec![None; b],
            total_cost: 0.0,
        });
    }
    // Ground truth as rows so that rows <= cols.
    let solve_rest = |fixed: &[usize]| -> (Vec<usize>, f64) {
        let free_rows: Vec<usize> = (fixed.len()..g).collect();
        let free_cols: Vec<usize> = (0..b).filter(|j| !fixed.contains(j)).collect();
        let mut full: Vec<usize> = fixed.to_vec();
        if !free_rows.is_empty() {
            let sub = solve_assignment(free_rows.len(), free_cols.len(), |r, c| {
                cost.get(free_cols[c], free_rows[r])
            });
            full.extend(sub.into_iter().map(|c| free_cols[c]));
        }
        let total = full
            .iter()
            .enumerate()
            .map(|(gt, &p)| cost.get(p, gt))
            .sum();
        (full, total)
    };

    let (mut best, optimum) = solve_rest(&[]);
    let scale = cost.data.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * g as f64;
    for gt in 0..g {
        let prefix = best[..gt].to_vec();
        for cand in 0..best[gt] {
            if prefix.contains(&cand) {
                continue;
            }
            let mut fixed = prefix.clone();
            fixed.push(cand);
            let (trial, total) = solve_rest(&fixed);
            if total <= optimum + tol {
                best = trial;
                break;
            }
        }
    }

    let mut assignment = vec![None; b];
    for (gt, &p) in best.iter().enumerate() {
        assignment[p] = Some(gt);
    }
    let total_cost = best
        .iter()
        .enumerate()
        .map(|(gt, &p)| cost.get(p, gt))
        .sum();
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}

/// Weighted loss terms after normalisation by the ground-truth count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub center: f64,
    pub size: f64,
    pub giou: f64,
    pub angle_residual: f64,
    pub angle_class: f64,
    pub semantic: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.center += o.center;
        self.size += o.size;
        self.giou += o.giou;
        self.angle_residual += o.angle_residual;
        self.angle_class += o.angle_class;
        self.semantic += o.semantic;
        self.total += o.total;
    }
}

/// Product of the three columns of an `[M, 3]` tensor, as `[M]`.
fn volume(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    let a = tape.slice(x, 1, 0, 1)?;
    let b = tape.slice(x, 1, 1, 2)?;
    let c = tape.slice(x, 1, 2, 3)?;
    let ab = tape.mul(a, b)?;
    let abc = tape.mul(ab, c)?;
    tape.reshape(abc, &[m])
}

/// Differentiable axis-aligned GIoU of predicted `[M, 3]` centers/sizes
/// against constant targets.
fn giou_pairs(
    tape: &mut Tape,
    center: Var,
    size: Var,
    gt_center: Var,
    gt_size: Var,
) -> Result<Var> {
    let half = tape.scale(size, 0.5)?;
    let lo = tape.sub(center, half)?;
    let hi = tape.add(center, half)?;
    let gt_half = tape.scale(gt_size, 0.5)?;
    let gt_lo = tape.sub(gt_center, gt_half)?;
    let gt_hi = tape.add(gt_center, gt_half)?;

    let ihi = tape.minimum(hi, gt_hi)?;
    let ilo = tape.maximum(lo, gt_lo)?;
    let iext = tape.sub(ihi, ilo)?;
    let iext = tape.relu(iext)?;
    let inter = volume(tape, iext)?;

    let vp = volume(tape, size)?;
    let vg = volume(tape, gt_size)?;
    let sum = tape.add(vp, vg)?;
    let union = tape.sub(sum, inter)?;

    let chi = tape.maximum(hi, gt_hi)?;
    let clo = tape.minimum(lo, gt_lo)?;
    let cext = tape.sub(chi, clo)?;
    let hull = volume(tape, cext)?;

    let iou = tape.div(inter, union)?;
    let gap = tape.sub(hull, union)?;
    let gap = tape.div(gap, hull)?;
    tape.sub(iou, gap)
}

/// Set loss of one decoder layer under a fixed matching.
///
/// `gts` are in the normalised frame. Returns the differentiable scalar and
/// its per-term values.
pub fn set_loss(
    tape: &mut Tape,
    out: &HeadOutput,
    gts: &[WorldBox],
    m: &MatchResult,
    w: &LossWeights,
    oriented: bool,
) -> Result<(Var, LossBreakdown)> {
    let b = tape.shape(out.class_logits)[0];
    let classes = tape.shape(out.class_logits)[1];
    let bins = tape.shape(out.angle_logits)[1];
    if m.assignment.len() != b {
        return Err(Error::contract(format!(
            "match covers {} predictions, layer has {b}",
            m.assignment.len()
        )));
    }
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut terms: Vec<Var> = Vec::new();
    let mut bd = LossBreakdown::default();
    let record = |tape: &mut Tape, v: Var, weight: f64, slot: &mut f64| -> Result<Var> {
        let v = tape.scale(v, weight * norm)?;
        *slot = tape.data(v)[0];
        Ok(v)
    };

    let pairs = m.pairs();
    if !pairs.is_empty() {
        let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<&WorldBox> = pairs.iter().map(|p| &gts[p.1]).collect();
        let n = idx.len();
        let gt_center = tape.constant(Tensor::from_points(
            &targets.iter().map(|t| t.center).collect::<Vec<_>>(),
        ));
        let gt_size = tape.constant(Tensor::from_points(
            &targets.iter().map(|t| t.size).collect::<Vec<_>>(),
        ));

        let center = tape.index_select(out.center, &idx)?;
        let d = tape.sub(center, gt_center)?;
        let d = tape.abs(d)?;
        let l = tape.sum(d)?;
        terms.push(record(tape, l, w.center, &mut bd.center)?);

        let size = tape.index_select(out.size, &idx)?;
        let d = tape.sub(size, gt_size)?;
        let d = tape.abs(d)?;
        let l = tape.sum(d)?;
        terms.push(record(tape, l, w.size, &mut bd.size)?);

        if w.giou_loss_enabled && !oriented {
            let g = giou_pairs(tape, center, size, gt_center, gt_size)?;
            let one_minus = tape.neg(g)?;
            let one_minus = tape.add_scalar(one_minus, 1.0)?;
            let l = tape.sum(one_minus)?;
            terms.push(record(tape, l, 1.0, &mut bd.giou)?);
        }

        let mut onehot = vec![0.0; n * bins];
        let mut gt_res = Vec::with_capacity(n);
        for (i, t) in targets.iter().enumerate() {
            let (bin, res) = quantize_angle(if oriented { t.yaw } else { 0.0 }, bins);
            onehot[i * bins + bin] = 1.0;
            gt_res.push(res);
        }
        let onehot = tape.constant(Tensor::new(vec![n, bins], onehot)?);

        let res = tape.index_select(out.angle_residual, &idx)?;
        let picked = tape.mul(res, onehot)?;
        let picked = tape.sum_axis(picked, 1)?;
        let gt_res = tape.constant(Tensor::vector(gt_res));
        let diff = tape.sub(picked, gt_res)?;
        let diff = tape.scale(diff, bins as f64 / PI)?;
        let h = tape.huber(diff, 1.0)?;
        let l = tape.sum(h)?;
        terms.push(record(tape, l, w.angle_residual, &mut bd.angle_residual)?);

        let logits = tape.index_select(out.angle_logits, &idx)?;
        let logp = tape.log_softmax(logits)?;
        let ce = tape.mul(logp, onehot)?;
        let ce = tape.sum(ce)?;
        let ce = tape.neg(ce)?;
        terms.push(record(tape, ce, w.angle_class, &mut bd.angle_class)?);
    }

    let bg = classes - 1;
    let mut target = vec![0.0; b * classes];
    for (i, a) in m.assignment.iter().enumerate() {
        match a {
            Some(g) => {
                let k = gts[*g].class_id;
                if k >= bg {
                    return Err(Error::contract(format!(
                        "ground-truth class {k} outside 0..{bg}"
                    )));
                }
                target[i * classes + k] = 1.0 - w.background_class_weight;
            }
            None => target[i * classes + bg] = w.background_class_weight,
        }
    }
    let target = tape.constant(Tensor::new(vec![b, classes], target)?);
    let logp = tape.log_softmax(out.class_logits)?;
    let ce = tape.mul(logp, target)?;
    let ce = tape.sum(ce)?;
    let ce = tape.neg(ce)?;
    terms.push(record(tape, ce, w.semantic, &mut bd.semantic)?);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    bd.total = tape.data(total)[0];
    Ok((total, bd))
}

/// Result of matching and scoring one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerLoss {
    pub matching: MatchResult,
    pub breakdown: LossBreakdown,
}

/// Independently matched set losses of every decoder layer, summed.
#[allow(clippy::too_many_arguments)]
pub fn deep_supervision_loss(
    tape: &mut Tape,
    layers: &[HeadOutput],
    preds: &[Vec<BoxPrediction>],
    gts: &[WorldBox],
    mw: &MatchWeights,
    lw: &LossWeights,
    oriented: bool,
) -> Result<(Var, Vec<LayerLoss>)> {
    if layers.is_empty() || layers.len() != preds.len() {
        return Err(Error::contract(format!(
            "{} head outputs for {} decoded layers",
            layers.len(),
            preds.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut details = Vec::with_capacity(layers.len());
    for (out, p) in layers.iter().zip(preds) {
        let matching = hungarian(&match_cost_matrix(p, gts, mw, oriented))?;
        let (loss, breakdown) = set_loss(tape, out, gts, &matching, lw, oriented)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
        details.push(LayerLoss {
            matching,
            breakdown,
        });
    }
    Ok((total.unwrap(), details))
}
