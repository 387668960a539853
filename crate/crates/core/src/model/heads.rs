use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::error::Result;
use crate::geometry::{wrap_angle, WorldBox};
use crate::pointops::Point;
use crate::tensor::nn::Mlp;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Center of angle bin `bin` out of `num_bins` covering `[0, 2 pi)`.
pub fn bin_center(bin: usize, num_bins: usize) -> f64 {
    bin as f64 * TAU / num_bins as f64
}

/// Nearest bin center and the signed residual in `[-w/2, w/2)`, `w` the
/// bin width.
pub fn quantize_angle(angle: f64, num_bins: usize) -> (usize, f64) {
    let width = TAU / num_bins as f64;
    let a = wrap_angle(angle);
    let bin = ((a / width).round() as usize) % num_bins;
    let mut residual = a - bin_center(bin, num_bins);
    // Map to [-w/2, w/2); `a` near 2 pi rounds to bin 0 with residual ~2 pi.
    residual = (residual + PI).rem_euclid(TAU) - PI;
    if residual >= width / 2.0 {
        residual -= width;
    }
    (bin, residual)
}

/// Inverse of [`quantize_angle`], wrapped to `[0, 2 pi)`.
pub fn reconstruct_angle(bin: usize, residual: f64, num_bins: usize) -> f64 {
    wrap_angle(bin_center(bin, num_bins) + residual)
}

/// The five per-box prediction MLPs, shared by every decoder layer.
#[derive(Clone, Debug)]
pub struct BoxHeads {
    pub center: Mlp,
    pub size: Mlp,
    pub angle_cls: Mlp,
    pub angle_res: Mlp,
    pub class: Mlp,
    pub num_angle_bins: usize,
}

/// Head outputs for one decoder layer, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[B, 3]`, clamped to `[0, 1]`
    pub center: Var,
    /// `[B, 3]` in `(0, 1)`
    pub size: Var,
    /// `[B, bins]`
    pub angle_logits: Var,
    /// `[B, bins]` radians
    pub angle_residual: Var,
    /// `[B, K + 1]`, background last
    pub class_logits: Var,
}

impl BoxHeads {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        num_angle_bins: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut head = |suffix: &str, out: usize| {
            Mlp::new(
                store,
                &format!("{name}.{suffix}"),
                &[d, hidden, out],
                false,
                rng,
            )
        };
        BoxHeads {
            center: head("center", 3),
            size: head("size", 3),
            angle_cls: head("angle_cls", num_angle_bins),
            angle_res: head("angle_res", num_angle_bins),
            class: head("class", num_classes + 1),
            num_angle_bins,
        }
    }

    /// `features [B, d]` from one decoder layer; `queries` are the query
    /// points the center offsets are relative to.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        features: Var,
        queries: &[Point],
    ) -> Result<HeadOutput> {
        let offset = self.center.forward(tape, p, features)?;
        let offset = tape.sigmoid(offset)?;
        let offset = tape.add_scalar(offset, -0.5)?;
        let q = tape.constant(Tensor::from_points(queries));
        let center = tape.add(q, offset)?;
        let center = tape.clamp(center, 0.0, 1.0)?;

        let size = self.size.forward(tape, p, features)?;
        let size = tape.sigmoid(size)?;

        let angle_logits = self.angle_cls.forward(tape, p, features)?;
        let angle_residual = self.angle_res.forward(tape, p, features)?;
        let angle_residual = tape.scale(angle_residual, PI / self.num_angle_bins as f64)?;

        let class_logits = self.class.forward(tape, p, features)?;
        Ok(HeadOutput {
            center,
            size,
            angle_logits,
            angle_residual,
            class_logits,
        })
    }
}

/// One decoded box in the normalised scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    pub query: Point,
    /// `center - query` before clamping.
    pub center_offset: [f64; 3],
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub angle_logits: Vec<f64>,
    pub angle_residuals: Vec<f64>,
    /// Softmax over `K + 1` classes, background last.
    pub class_probs: Vec<f64>,
}

impl BoxPrediction {
    pub fn num_classes(&self) -> usize {
        self.class_probs.len() - 1
    }

    pub fn background_prob(&self) -> f64 {
        *self.class_probs.last().unwrap()
    }

    pub fn angle_bin(&self) -> usize {
        argmax(&self.angle_logits)
    }

    /// Bin center of the most likely bin plus that bin's residual.
    pub fn angle(&self) -> f64 {
        let bin = self.angle_bin();
        reconstruct_angle(bin, self.angle_residuals[bin], self.angle_logits.len())
    }

    /// Most likely class and its probability, or `None` when background wins.
    pub fn best_class(&self) -> Option<(usize, f64)> {
        let k = argmax(&self.class_probs);
        (k < self.num_classes()).then(|| (k, self.class_probs[k]))
    }

    /// Box in the normalised frame. Yaw is zero unless `oriented`.
    pub fn to_box(&self, class_id: usize, oriented: bool) -> WorldBox {
        let yaw = if oriented { self.angle() } else { 0.0 };
        WorldBox::new(self.center, self.size, yaw, class_id).floored()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Reads one layer's head outputs off the tape.
pub fn decode(tape: &Tape, out: &HeadOutput, queries: &[Point]) -> Vec<BoxPrediction> {
    let bins = tape.shape(out.angle_logits)[1];
    let classes = tape.shape(out.class_logits)[1];
    let center = tape.data(out.center);
    let size = tape.data(out.size);
    let logits = tape.data(out.angle_logits);
    let residual = tape.data(out.angle_residual);
    let probs = softmax_rows(tape.data(out.class_logits), classes);
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let c = [center[3 * i], center[3 * i + 1], center[3 * i + 2]];
            BoxPrediction {
                query: *q,
                center_offset: [c[0] - q[0], c[1] - q[1], c[2] - q[2]],
                center: c,
                size: [size[3 * i], size[3 * i + 1], size[3 * i + 2]],
                angle_logits: logits[i * bins..(i + 1) * bins].to_vec(),
                angle_residuals: residual[i * bins..(i + 1) * bins].to_vec(),
                class_probs: probs[i * classes..(i + 1) * classes].to_vec(),
            }
        })
        .collect()
}
