//! Point-set operators: farthest point sampling, ball query, single-step set
//! aggregation, and radius masks for the locally masked encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::Mlp;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

pub type Point = [f64; 3];

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Points chosen from a source cloud, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSet {
    pub indices: Vec<usize>,
    pub coords: Vec<Point>,
}

impl SampledSet {
    fn from_indices(points: &[Point], indices: Vec<usize>) -> Self {
        let coords = indices.iter().map(|&i| points[i]).collect();
        SampledSet { indices, coords }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each step picks the point whose distance to the selected set is largest;
/// ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], k: usize, seed_index: usize) -> Result<SampledSet> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "farthest point sampling of {k} from {n} points"
        )));
    }
    if seed_index >= n {
        return Err(Error::contract(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    while selected.len() < k {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, (p, d)) in points.iter().zip(min_dist.iter_mut()).enumerate() {
            let nd = squared_distance(p, &c);
            if nd < *d {
                *d = nd;
            }
            if *d > best_dist {
                best_dist = *d;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(SampledSet::from_indices(points, selected))
}

/// Indices of `points` within `radius` of each center.
///
/// Neighbours are kept in ascending index order and truncated to
/// `max_neighbors`. A center with no neighbour in range gets its nearest
/// point instead, so no list is ever empty.
pub fn ball_query(
    centers: &[Point],
    points: &[Point],
    radius: f64,
    max_neighbors: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) || max_neighbors == 0 {
        return Err(Error::contract(format!(
            "ball query needs radius > 0 and max_neighbors >= 1 (got {radius}, {max_neighbors})"
        )));
    }
    if points.is_empty() {
        return Err(Error::contract("ball query over an empty cloud"));
    }
    let r2 = radius * radius;
    Ok(centers
        .iter()
        .map(|c| {
            let mut hits = Vec::with_capacity(max_neighbors.min(points.len()));
            let mut nearest = 0;
            let mut nearest_d = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let d = squared_distance(p, c);
                if d < nearest_d {
                    nearest_d = d;
                    nearest = i;
                }
                if d <= r2 && hits.len() < max_neighbors {
                    hits.push(i);
                }
            }
            if hits.is_empty() {
                hits.push(nearest);
            }
            hits
        })
        .collect())
}

/// One downsample-and-aggregate step: FPS centers, ball-query neighbourhoods,
/// a shared pointwise MLP over center-relative coordinates (optionally
/// concatenated with per-point features), then max-pooling.
#[derive(Clone, Debug)]
pub struct SetAggregation {
    pub radius: f64,
    pub max_neighbors: usize,
    pub feature_dim: usize,
    pub mlp: Mlp,
}

impl SetAggregation {
    /// `hidden` are the MLP hidden widths; `feature_dim` is the width of
    /// optional per-point input features (0 for coordinates only).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        radius: f64,
        max_neighbors: usize,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![3 + feature_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        SetAggregation {
            radius,
            max_neighbors,
            feature_dim,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &widths, true, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.last().fan_out
    }

    /// Returns the sampled centers and a `[k, out_dim]` feature matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        cloud: &[Point],
        features: Option<Var>,
        k: usize,
        seed_index: usize,
    ) -> Result<(SampledSet, Var)> {
        match (features, self.feature_dim) {
            (None, 0) => {}
            (Some(f), d) if d > 0 && tape.shape(f) == [cloud.len(), d] => {}
            (f, d) => {
                return Err(Error::Shape {
                    op: "set_aggregate",
                    lhs: vec![cloud.len(), d],
                    rhs: f.map(|f| tape.shape(f).to_vec()).unwrap_or_default(),
                })
            }
        }
        let centers = farthest_point_sample(cloud, k, seed_index)?;
        let groups = ball_query(&centers.coords, cloud, self.radius, self.max_neighbors)?;

        let mut offsets = Vec::with_capacity(groups.len() + 1);
        offsets.push(0);
        let mut members = Vec::new();
        let mut rel = Vec::new();
        for (c, group) in centers.coords.iter().zip(&groups) {
            for &i in group {
                let p = cloud[i];
                rel.extend((0..3).map(|a| (p[a] - c[a]) / self.radius));
                members.push(i);
            }
            offsets.push(members.len());
        }
        let rel = tape.constant(Tensor::new(vec![members.len(), 3], rel)?);
        let input = match features {
            Some(f) => {
                let gathered = tape.index_select(f, &members)?;
                tape.concat(&[rel, gathered], 1)?
            }
            None => rel,
        };
        let h = self.mlp.forward(tape, params, input)?;
        let pooled = tape.segment_max(h, &offsets)?;
        Ok((centers, pooled))
    }
}

/// Symmetric `M x M` neighbourhood mask; `bits[i * M + j]` is true when
/// points `i` and `j` lie within `radius` of each other.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusMask {
    pub size: usize,
    pub bits: Vec<bool>,
    pub radius: f64,
}

impl RadiusMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }
}

pub fn build_radius_mask(coords: &[Point], radius: f64) -> Result<RadiusMask> {
    if !(radius > 0.0) {
        return Err(Error::contract(format!(
            "radius mask needs radius > 0, got {radius}"
        )));
    }
    let m = coords.len();
    let r2 = radius * radius;
    let mut bits = vec![false; m * m];
    for i in 0..m {
        bits[i * m + i] = true;
        for j in i + 1..m {
            let inside = squared_distance(&coords[i], &coords[j]) <= r2;
            bits[i * m + j] = inside;
            bits[j * m + i] = inside;
        }
    }
    Ok(RadiusMask {
        size: m,
        bits,
        radius,
    })
}
