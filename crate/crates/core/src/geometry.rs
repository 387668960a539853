//! Box geometry: corners, axis-aligned IoU/GIoU, yaw-rotated IoU by convex
//! polygon clipping, and per-class non-maximum suppression.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

/// Smallest extent used for predicted boxes before any overlap computation.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Area below which a footprint is treated as degenerate.
const DEGENERATE_AREA: f64 = 1e-12;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Cuboid rotated by `yaw` about the vertical (z) axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldBox {
    pub center: [f64; 3],
    /// Full extents along the box's local axes.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl WorldBox {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Self {
        WorldBox {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
        }
    }

    pub fn axis_aligned(center: [f64; 3], size: [f64; 3], class_id: usize) -> Self {
        Self::new(center, size, 0.0, class_id)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && (0.0..TAU).contains(&self.yaw)
    }

    /// Copy with every extent floored at [`MIN_BOX_SIZE`].
    pub fn floored(&self) -> Self {
        let mut b = *self;
        b.size.iter_mut().for_each(|s| *s = s.max(MIN_BOX_SIZE));
        b
    }

    /// Axis-aligned bounds `(min, max)` ignoring yaw.
    pub fn aligned_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.center[a] - 0.5 * self.size[a];
            hi[a] = self.center[a] + 0.5 * self.size[a];
        }
        (lo, hi)
    }

    /// Footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.size[0];
        let hy = 0.5 * self.size[1];
        [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)].map(|(x, y)| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }
}

/// Box edges as corner index pairs, matching [`box_corners`] ordering.
pub const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// The eight corners: bottom face counter-clockwise, then the top face.
pub fn box_corners(b: &WorldBox) -> [[f64; 3]; 8] {
    let fp = b.footprint();
    let z0 = b.center[2] - 0.5 * b.size[2];
    let z1 = b.center[2] + 0.5 * b.size[2];
    let mut out = [[0.0; 3]; 8];
    for i in 0..4 {
        out[i] = [fp[i][0], fp[i][1], z0];
        out[i + 4] = [fp[i][0], fp[i][1], z1];
    }
    out
}

/// Intersection, union and hull volumes. All three come from the same
/// rounded bounds, so a box against itself gives exactly equal values.
fn aligned_overlap(a: &WorldBox, b: &WorldBox) -> (f64, f64, f64) {
    let (alo, ahi) = a.aligned_bounds();
    let (blo, bhi) = b.aligned_bounds();
    let mut inter = 1.0;
    let mut hull = 1.0;
    let mut va = 1.0;
    let mut vb = 1.0;
    for k in 0..3 {
        inter *= (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0);
        hull *= ahi[k].max(bhi[k]) - alo[k].min(blo[k]);
        va *= ahi[k] - alo[k];
        vb *= bhi[k] - blo[k];
    }
    (inter, va + vb - inter, hull)
}

/// IoU of the two boxes with yaw ignored.
pub fn iou_axis_aligned(a: &WorldBox, b: &WorldBox) -> f64 {
    let (inter, union, _) = aligned_overlap(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU with yaw ignored: `IoU - (|C| - |A ∪ B|) / |C|` where `C`
/// is the smallest axis-aligned box enclosing both.
pub fn giou_axis_aligned(a: &WorldBox, b: &WorldBox) -> f64 {
    let (inter, union, hull) = aligned_overlap(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// Shoelace area of a simple polygon (positive when counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

fn cross(o: [f64; 2], a: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

fn line_intersection(s: [f64; 2], e: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cs = cross(a, b, s);
    let ce = cross(a, b, e);
    let t = cs / (cs - ce);
    [s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])]
}

/// Sutherland–Hodgman clipping of `subject` by a convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

/// Intersection and union volumes of two yaw-rotated boxes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedOverlap {
    pub intersection: f64,
    pub union: f64,
    /// Set when either footprint has (near) zero area; overlap is then 0.
    pub degenerate: bool,
}

impl RotatedOverlap {
    pub fn iou(&self) -> f64 {
        if self.degenerate || self.union <= 0.0 {
            0.0
        } else {
            self.intersection / self.union
        }
    }
}

pub fn rotated_overlap(a: &WorldBox, b: &WorldBox) -> RotatedOverlap {
    let fa = a.footprint();
    let fb = b.footprint();
    let union_no_inter = a.volume() + b.volume();
    if polygon_area(&fa) < DEGENERATE_AREA || polygon_area(&fb) < DEGENERATE_AREA {
        return RotatedOverlap {
            intersection: 0.0,
            union: union_no_inter,
            degenerate: true,
        };
    }
    let area = polygon_area(&clip_convex(&fa, &fb)).max(0.0);
    let z_lo = (a.center[2] - 0.5 * a.size[2]).max(b.center[2] - 0.5 * b.size[2]);
    let z_hi = (a.center[2] + 0.5 * a.size[2]).min(b.center[2] + 0.5 * b.size[2]);
    let intersection = area * (z_hi - z_lo).max(0.0);
    RotatedOverlap {
        intersection,
        union: union_no_inter - intersection,
        degenerate: false,
    }
}

/// IoU of two yaw-rotated boxes. Degenerate footprints give 0.
pub fn iou_rotated(a: &WorldBox, b: &WorldBox) -> f64 {
    rotated_overlap(a, b).iou()
}

/// Convex hull of a point set by monotone chain, counter-clockwise.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        for &q in &p {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
            {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
        if pass == 0 {
            p.reverse();
        }
    }
    hull
}

/// Rotated GIoU. The enclosing volume is the vertical prism over the convex
/// hull of both footprints, so a box against itself scores 1. Used only for
/// matching costs, never differentiated.
pub fn giou_rotated(a: &WorldBox, b: &WorldBox) -> f64 {
    let ov = rotated_overlap(a, b);
    let corners: Vec<[f64; 2]> = a.footprint().into_iter().chain(b.footprint()).collect();
    let z_lo = (a.center[2] - 0.5 * a.size[2]).min(b.center[2] - 0.5 * b.size[2]);
    let z_hi = (a.center[2] + 0.5 * a.size[2]).max(b.center[2] + 0.5 * b.size[2]);
    let hull = polygon_area(&convex_hull(&corners)).abs() * (z_hi - z_lo);
    if hull <= 0.0 || ov.union <= 0.0 {
        return 0.0;
    }
    ov.iou() - (hull - ov.union).max(0.0) / hull
}

pub fn iou(a: &WorldBox, b: &WorldBox, rotated: bool) -> f64 {
    if rotated {
        iou_rotated(a, b)
    } else {
        iou_axis_aligned(a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: WorldBox,
    pub score: f64,
}

/// Greedy per-class non-maximum suppression.
///
/// Boxes are visited by descending score (ties by input order); a box is
/// dropped when its IoU with an already kept box of the same class exceeds
/// `iou_threshold`. Returns surviving indices in input order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, rotated: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &boxes[i].bbox;
        let suppressed = kept.iter().any(|&k| {
            boxes[k].bbox.class_id == b.class_id && iou(&boxes[k].bbox, b, rotated) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}
