//! Synthetic scenes, normalisation to the unit cube, augmentation, and the
//! text file formats (scenes, detections, dataset manifest).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{box_corners, wrap_angle, WorldBox};
use crate::pointops::Point;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// World coordinates in metres.
    pub points: Vec<Point>,
    pub boxes: Vec<WorldBox>,
    pub num_classes: usize,
    pub oriented: bool,
}

/// Affine map of world coordinates onto `[0, 1]^3`: `(x - min) / extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min_corner: [f64; 3],
    pub extent: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            min_corner: [0.0; 3],
            extent: [1.0; 3],
        }
    }

    /// Bounds of the points and every box corner. With `isotropic` all axes
    /// share the largest extent so that yaw survives the map.
    pub fn fit(points: &[Point], boxes: &[WorldBox], isotropic: bool) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let corners = boxes.iter().flat_map(box_corners);
        for p in points.iter().copied().chain(corners) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        if extent.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::contract(format!(
                "scene has zero or undefined extent {extent:?}"
            )));
        }
        if isotropic {
            let m = extent.iter().cloned().fold(0.0, f64::max);
            extent = [m; 3];
        }
        Ok(Normalization {
            min_corner: lo,
            extent,
        })
    }

    pub fn is_isotropic(&self) -> bool {
        self.extent[0] == self.extent[1] && self.extent[1] == self.extent[2]
    }

    pub fn point(&self, p: &Point) -> Point {
        std::array::from_fn(|a| (p[a] - self.min_corner[a]) / self.extent[a])
    }

    pub fn inverse_point(&self, p: &Point) -> Point {
        std::array::from_fn(|a| p[a] * self.extent[a] + self.min_corner[a])
    }

    pub fn normalize_box(&self, b: &WorldBox) -> WorldBox {
        WorldBox {
            center: self.point(&b.center),
            size: std::array::from_fn(|a| b.size[a] / self.extent[a]),
            ..*b
        }
    }

    pub fn denormalize_box(&self, b: &WorldBox) -> WorldBox {
        WorldBox {
            center: self.inverse_point(&b.center),
            size: std::array::from_fn(|a| b.size[a] * self.extent[a]),
            ..*b
        }
    }
}

/// A scene mapped into the unit cube, ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub id: String,
    pub points: Vec<Point>,
    pub boxes: Vec<WorldBox>,
    pub normalization: Normalization,
    pub oriented: bool,
}

impl Scene {
    /// Bounds of the points only, so that scenes without labels map the
    /// same way. Per-axis for axis-aligned scenes, isotropic for oriented ones.
    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::fit(&self.points, &[], self.oriented)
    }

    pub fn normalize(&self) -> Result<NormalizedScene> {
        let n = self.normalization()?;
        Ok(NormalizedScene {
            id: self.id.clone(),
            points: self.points.iter().map(|p| n.point(p)).collect(),
            boxes: self.boxes.iter().map(|b| n.normalize_box(b)).collect(),
            normalization: n,
            oriented: self.oriented,
        })
    }
}

impl NormalizedScene {
    pub fn denormalize(&self) -> Scene {
        let n = &self.normalization;
        Scene {
            id: self.id.clone(),
            points: self.points.iter().map(|p| n.inverse_point(p)).collect(),
            boxes: self.boxes.iter().map(|b| n.denormalize_box(b)).collect(),
            num_classes: self.boxes.iter().map(|b| b.class_id + 1).max().unwrap_or(0),
            oriented: self.oriented,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_scenes: usize,
    pub num_classes: usize,
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub points_per_scene: usize,
    pub noise_std: f64,
    /// Share of points drawn from floor and walls instead of objects.
    pub clutter_fraction: f64,
    pub oriented: bool,
    /// Room extents in metres.
    pub room: [f64; 3],
    /// Share of scenes put in the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_scenes: 40,
            num_classes: 5,
            boxes_min: 2,
            boxes_max: 6,
            points_per_scene: 4096,
            noise_std: 0.01,
            clutter_fraction: 0.2,
            oriented: false,
            room: [8.0, 6.0, 3.0],
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Nominal object size of class `k` (width, depth, height in metres).
pub fn class_size(k: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 5] = [
        [1.2, 0.8, 0.75], // table
        [0.5, 0.5, 0.9],  // chair
        [2.0, 1.5, 0.5],  // bed
        [0.9, 0.3, 1.8],  // bookshelf
        [0.6, 0.6, 1.1],  // cabinet
    ];
    let b = BASE[k % BASE.len()];
    // Further classes rescale the base shapes so sizes stay distinguishable.
    let s = 1.0 + 0.35 * (k / BASE.len()) as f64;
    [b[0] * s, b[1] * s, b[2] / s.sqrt()]
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::contract(format!("generator spec: {m}")));
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        if self.boxes_min > self.boxes_max {
            return fail("boxes_min exceeds boxes_max");
        }
        if self.points_per_scene == 0 {
            return fail("points_per_scene must be positive");
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
        {
            return fail("fractions must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0) || self.room.iter().any(|r| !(*r > 0.0)) {
            return fail("noise must be nonnegative and the room positive");
        }
        // Worst-case objects must cover at most half the floor, otherwise
        // rejection sampling rarely succeeds.
        let largest = (0..self.num_classes)
            .map(|k| {
                let s = class_size(k);
                1.15 * 1.15 * s[0] * s[1]
            })
            .fold(0.0, f64::max);
        if largest * self.boxes_max as f64 > 0.5 * self.room[0] * self.room[1] {
            return fail("boxes_max too large for the room");
        }
        Ok(())
    }
}

fn footprints_overlap(a: &WorldBox, b: &WorldBox, gap: f64) -> bool {
    let (alo, ahi) = footprint_bounds(a);
    let (blo, bhi) = footprint_bounds(b);
    (0..2).all(|i| alo[i] - gap < bhi[i] && blo[i] - gap < ahi[i])
}

fn footprint_bounds(b: &WorldBox) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in b.footprint() {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (lo, hi)
}

/// Uniform sample on the five visible faces (all but the bottom) of `b`.
fn sample_box_surface<R: Rng + ?Sized>(b: &WorldBox, rng: &mut R) -> Point {
    let [sx, sy, sz] = b.size;
    let areas = [sx * sy, sx * sz, sx * sz, sy * sz, sy * sz];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.random::<f64>() - 0.5;
    let v = rng.random::<f64>() - 0.5;
    let local = match face {
        0 => [u * sx, v * sy, 0.5 * sz],
        1 => [u * sx, -0.5 * sy, v * sz],
        2 => [u * sx, 0.5 * sy, v * sz],
        3 => [-0.5 * sx, u * sy, v * sz],
        _ => [0.5 * sx, u * sy, v * sz],
    };
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * local[0] - s * local[1],
        b.center[1] + s * local[0] + c * local[1],
        b.center[2] + local[2],
    ]
}

/// One scene drawn from `spec`; fully determined by the rng state.
pub fn generate_scene<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    id: &str,
    rng: &mut R,
) -> Result<Scene> {
    spec.validate()?;
    let [w, d, h] = spec.room;
    let count = rng.random_range(spec.boxes_min..=spec.boxes_max);
    let mut boxes: Vec<WorldBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..200 {
            let class_id = rng.random_range(0..spec.num_classes);
            let base = class_size(class_id);
            let size: [f64; 3] = std::array::from_fn(|a| base[a] * rng.random_range(0.85..1.15));
            let yaw = if spec.oriented {
                rng.random_range(0.0..2.0 * PI)
            } else {
                0.0
            };
            let reach = if spec.oriented {
                0.5 * size[0].hypot(size[1])
            } else {
                0.5 * size[0].max(size[1])
            };
            if 2.0 * reach >= w.min(d) || size[2] >= h {
                continue;
            }
            let cx = rng.random_range(reach..w - reach);
            let cy = rng.random_range(reach..d - reach);
            let candidate = WorldBox::new([cx, cy, 0.5 * size[2]], size, yaw, class_id);
            if boxes
                .iter()
                .all(|b| !footprints_overlap(b, &candidate, 0.1))
            {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "{id}: could not place box {} of {count}",
                boxes.len() + 1
            )));
        }
    }

    let n = spec.points_per_scene;
    let n_clutter = if boxes.is_empty() {
        n
    } else {
        (spec.clutter_fraction * n as f64).round() as usize
    };
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Generation(format!("noise distribution: {e}")))?;
    let jitter = |p: Point, rng: &mut R| -> Point {
        if spec.noise_std == 0.0 {
            p
        } else {
            std::array::from_fn(|a| p[a] + noise.sample(rng))
        }
    };
    let areas: Vec<f64> = boxes
        .iter()
        .map(|b| b.size[0] * b.size[1] + 2.0 * b.size[2] * (b.size[0] + b.size[1]))
        .collect();
    let total_area: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(n);
    for _ in 0..n - n_clutter {
        let mut pick = rng.random::<f64>() * total_area;
        let mut k = boxes.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                k = i;
                break;
            }
            pick -= a;
        }
        let p = sample_box_surface(&boxes[k], rng);
        points.push(jitter(p, rng));
    }
    for _ in 0..n_clutter {
        // Floor gets half the clutter, the two back walls share the rest.
        let p = match rng.random_range(0..4) {
            0 | 1 => [rng.random_range(0.0..w), rng.random_range(0.0..d), 0.0],
            2 => [0.0, rng.random_range(0.0..d), rng.random_range(0.0..h)],
            _ => [rng.random_range(0.0..w), 0.0, rng.random_range(0.0..h)],
        };
        points.push(jitter(p, rng));
    }
    // Interleave object and clutter points so no ordering leaks labels.
    points.shuffle(rng);
    Ok(Scene {
        id: id.to_string(),
        points,
        boxes,
        num_classes: spec.num_classes,
        oriented: spec.oriented,
    })
}

/// Rng for scene `index` of a dataset; independent of generation order.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Mirror `x -> -x` (`axis == 0`) or `y -> -y` (`axis == 1`).
pub fn flip(scene: &Scene, axis: usize) -> Scene {
    assert!(axis < 2, "flips are about x or y");
    let mut out = scene.clone();
    for p in &mut out.points {
        p[axis] = -p[axis];
    }
    for b in &mut out.boxes {
        b.center[axis] = -b.center[axis];
        b.yaw = wrap_angle(if axis == 0 { PI - b.yaw } else { -b.yaw });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_probability: f64,
    /// Uniform subsample to this many points when the scene has more.
    pub subsample_to: Option<usize>,
    pub jitter_std: f64,
    /// Random point order. Sampling starts at the first point, so this is
    /// what varies the query locations between iterations.
    #[serde(default)]
    pub shuffle_points: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_probability: 0.5,
            subsample_to: None,
            jitter_std: 0.0,
            shuffle_points: true,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(scene: &Scene, spec: &AugmentSpec, rng: &mut R) -> Result<Scene> {
    let mut out = scene.clone();
    for axis in 0..2 {
        if rng.random::<f64>() < spec.flip_probability {
            out = flip(&out, axis);
        }
    }
    if let Some(n) = spec.subsample_to {
        if n < out.points.len() {
            let keep = rand::seq::index::sample(rng, out.points.len(), n);
            out.points = keep.into_iter().map(|i| out.points[i]).collect();
        }
    }
    if spec.shuffle_points {
        out.points.shuffle(rng);
    }
    if spec.jitter_std > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_std)
            .map_err(|e| Error::contract(format!("jitter: {e}")))?;
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// P3D v1 scene files

pub fn scene_to_string(scene: &Scene) -> String {
    let mut s = String::with_capacity(scene.points.len() * 40);
    let _ = writeln!(s, "# scene {}", scene.id);
    let _ = writeln!(
        s,
        "P3D 1 {} {} {} {}",
        scene.points.len(),
        scene.boxes.len(),
        scene.num_classes,
        u8::from(scene.oriented)
    );
    for p in &scene.points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    for b in &scene.boxes {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            b.class_id
        );
    }
    s
}

fn parse_floats<const N: usize>(
    text: &str,
    path: &str,
    line: usize,
    what: &str,
) -> Result<[f64; N]> {
    let err = |message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != N {
        return Err(err(format!(
            "{what}: expected {N} fields, found {}",
            fields.len()
        )));
    }
    let mut out = [0.0f64; N];
    for (o, f) in out.iter_mut().zip(&fields) {
        *o = f
            .parse()
            .map_err(|_| err(format!("{what}: bad number {f:?}")))?;
        if !(*o).is_finite() {
            return Err(err(format!("{what}: non-finite value {f:?}")));
        }
    }
    Ok(out)
}

/// Parses P3D text. `path` only labels errors; the scene id is taken from
/// the file stem.
pub fn scene_from_str(text: &str, path: &str) -> Result<Scene> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = loop {
        match lines.next() {
            Some((_, l)) if l.trim_start().starts_with('#') || l.trim().is_empty() => continue,
            Some(h) => break h,
            None => return Err(err(1, "missing P3D header".into())),
        }
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 6 || fields[0] != "P3D" {
        return Err(err(
            hline,
            format!("expected `P3D 1 <N> <G> <K> <oriented>`, found {header:?}"),
        ));
    }
    if fields[1] != "1" {
        return Err(err(hline, format!("unsupported P3D version {}", fields[1])));
    }
    let count = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| err(hline, format!("bad {name} {:?}", fields[i])))
    };
    let (n, g, k) = (
        count(2, "point count")?,
        count(3, "box count")?,
        count(4, "class count")?,
    );
    let oriented = match fields[5] {
        "0" => false,
        "1" => true,
        o => {
            return Err(err(
                hline,
                format!("oriented flag must be 0 or 1, found {o:?}"),
            ))
        }
    };
    let mut last = hline;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| {
            err(
                last + 1,
                format!("points section truncated: {i} of {n} points"),
            )
        })?;
        points.push(parse_floats::<3>(l, path, ln, "point")?);
        last = ln;
    }
    let mut boxes = Vec::with_capacity(g);
    for i in 0..g {
        let (ln, l) = lines.next().ok_or_else(|| {
            err(
                last + 1,
                format!("boxes section truncated: {i} of {g} boxes"),
            )
        })?;
        let (nums, cls) = l
            .trim_end()
            .rsplit_once(char::is_whitespace)
            .unwrap_or((l, ""));
        let v = parse_floats::<7>(nums, path, ln, "box")?;
        let class_id: usize = cls
            .parse()
            .map_err(|_| err(ln, format!("box: bad class id {cls:?}")))?;
        if class_id >= k {
            return Err(err(
                ln,
                format!("box: class id {class_id} not below class count {k}"),
            ));
        }
        if v[3..6].iter().any(|s| *s <= 0.0) {
            return Err(err(ln, "box: sizes must be positive".into()));
        }
        boxes.push(WorldBox::new(
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            v[6],
            class_id,
        ));
        last = ln;
    }
    if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(ln, format!("unexpected trailing content {l:?}")));
    }
    let id = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Scene {
        id,
        points,
        boxes,
        num_classes: k,
        oriented,
    })
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_str(&text, &path.to_string_lossy())
}

// ---------------------------------------------------------------------------
// Detection interchange files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: WorldBox,
}

pub const DETECTION_HEADER: &str = "# scene_id class_id score cx cy cz sx sy sz yaw";

pub fn detections_to_string(dets: &[Detection]) -> String {
    let mut s = String::from(DETECTION_HEADER);
    s.push('\n');
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {}",
            d.scene_id,
            d.class_id,
            d.score,
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw
        );
    }
    s
}

pub fn detections_from_str(text: &str, path: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: ln,
            message,
        };
        let mut fields = t.splitn(3, char::is_whitespace);
        let scene_id = fields.next().unwrap_or_default().to_string();
        let class_id: usize = fields
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err("detection: missing or bad class id".into()))?;
        let v = parse_floats::<8>(fields.next().unwrap_or(""), path, ln, "detection")?;
        if v[4..7].iter().any(|s| *s <= 0.0) {
            return Err(err("detection: sizes must be positive".into()));
        }
        out.push(Detection {
            scene_id,
            class_id,
            score: v[0],
            bbox: WorldBox::new([v[1], v[2], v[3]], [v[4], v[5], v[6]], v[7], class_id),
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_to_string(dets)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_str(&text, &path.to_string_lossy())
}

// ---------------------------------------------------------------------------
// Datasets

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generator: GeneratorSpec,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates every scene of `spec` in memory, in index order.
pub fn generate_scenes(spec: &GeneratorSpec) -> Result<Vec<Scene>> {
    if spec.num_scenes == 0 {
        return Err(Error::Generation("empty dataset".into()));
    }
    (0..spec.num_scenes)
        .map(|i| generate_scene(spec, &scene_id(i), &mut scene_rng(spec.seed, i)))
        .collect()
}

/// Writes the scenes of `spec` into `dir` with a manifest. The split is a
/// seeded shuffle; `round(val_fraction * n)` scenes go to validation.
pub fn write_dataset(dir: &Path, spec: &GeneratorSpec) -> Result<Manifest> {
    let scenes = generate_scenes(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut scene_rng(spec.seed, usize::MAX));
    let n_val = (spec.val_fraction * scenes.len() as f64).round() as usize;
    let mut val_set: Vec<usize> = order[..n_val].to_vec();
    val_set.sort_unstable();

    let mut manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        generator: spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, scene) in scenes.iter().enumerate() {
        let file = format!("{}.p3d", scene.id);
        let text = scene_to_string(scene);
        let path = dir.join(&file);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            file,
            sha256: sha256_hex(text.as_bytes()),
        };
        if val_set.binary_search(&i).is_ok() {
            manifest.val.push(entry);
        } else {
            manifest.train.push(entry);
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema_version != MANIFEST_SCHEMA {
        return Err(Error::contract(format!(
            "manifest schema {} is not supported (expected {MANIFEST_SCHEMA})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Loads one split, verifying each file against its recorded checksum.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Scene>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries(split)
        .iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let text = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            let digest = sha256_hex(text.as_bytes());
            if digest != e.sha256 {
                return Err(Error::contract(format!(
                    "{}: checksum mismatch",
                    path.display()
                )));
            }
            scene_from_str(&text, &path.to_string_lossy())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            num_scenes: 3,
            points_per_scene: 512,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = small_spec();
        let a = generate_scene(&spec, "a", &mut scene_rng(5, 0)).unwrap();
        let b = generate_scene(&spec, "a", &mut scene_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, "a", &mut scene_rng(5, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_box_without_clutter_stays_on_its_surface() {
        let spec = GeneratorSpec {
            boxes_min: 1,
            boxes_max: 1,
            clutter_fraction: 0.0,
            noise_std: 0.0,
            ..small_spec()
        };
        let s = generate_scene(&spec, "s", &mut scene_rng(1, 0)).unwrap();
        let b = s.boxes[0];
        let (lo, hi) = b.aligned_bounds();
        for p in &s.points {
            for a in 0..3 {
                assert!(p[a] >= lo[a] - 1e-9 && p[a] <= hi[a] + 1e-9);
            }
            let on_face =
                (0..3).any(|a| (p[a] - lo[a]).abs() < 1e-9 || (p[a] - hi[a]).abs() < 1e-9);
            assert!(on_face);
        }
    }

    #[test]
    fn normalization_examples() {
        let n = Normalization {
            min_corner: [0.0; 3],
            extent: [4.0; 3],
        };
        let b = n.normalize_box(&WorldBox::axis_aligned([2.0; 3], [2.0; 3], 0));
        assert_eq!(b.size, [0.5; 3]);
        let unit = Scene {
            id: "u".into(),
            points: vec![[0.0; 3], [1.0; 3]],
            boxes: vec![],
            num_classes: 1,
            oriented: false,
        };
        assert_eq!(unit.normalization().unwrap(), Normalization::identity());
        let flat = Scene {
            points: vec![[0.0, 0.0, 1.0], [1.0, 1.0, 1.0]],
            ..unit
        };
        assert!(flat.normalize().is_err());
    }

    #[test]
    fn normalized_points_lie_in_unit_cube() {
        for oriented in [false, true] {
            let spec = GeneratorSpec {
                oriented,
                ..small_spec()
            };
            let s = generate_scene(&spec, "s", &mut scene_rng(2, 0)).unwrap();
            let ns = s.normalize().unwrap();
            assert_eq!(ns.normalization.is_isotropic(), oriented);
            for p in ns.points.iter().chain(ns.boxes.iter().map(|b| &b.center)) {
                assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn double_flip_restores_scene() {
        let spec = GeneratorSpec {
            oriented: true,
            ..small_spec()
        };
        let s = generate_scene(&spec, "s", &mut scene_rng(3, 0)).unwrap();
        for axis in 0..2 {
            let back = flip(&flip(&s, axis), axis);
            assert_eq!(back.points, s.points);
            for (a, b) in back.boxes.iter().zip(&s.boxes) {
                assert_eq!(a.center, b.center);
                let d = (a.yaw - b.yaw).abs();
                assert!(d.min(2.0 * PI - d) < 1e-12);
            }
        }
    }

    #[test]
    fn identity_augmentation() {
        let s = generate_scene(&small_spec(), "s", &mut scene_rng(4, 0)).unwrap();
        let spec = AugmentSpec {
            flip_probability: 0.0,
            subsample_to: None,
            jitter_std: 0.0,
            shuffle_points: false,
        };
        assert_eq!(augment(&s, &spec, &mut scene_rng(0, 0)).unwrap(), s);
    }

    #[test]
    fn shuffle_keeps_the_point_set() {
        let s = generate_scene(&small_spec(), "s", &mut scene_rng(4, 0)).unwrap();
        let spec = AugmentSpec {
            flip_probability: 0.0,
            subsample_to: None,
            jitter_std: 0.0,
            shuffle_points: true,
        };
        let out = augment(&s, &spec, &mut scene_rng(0, 0)).unwrap();
        assert_ne!(out.points, s.points);
        let key = |v: &[Point]| {
            let mut k: Vec<[u64; 3]> = v.iter().map(|p| p.map(f64::to_bits)).collect();
            k.sort_unstable();
            k
        };
        assert_eq!(key(&out.points), key(&s.points));
        assert_eq!(out.boxes, s.boxes);
    }

    #[test]
    fn scene_text_round_trip() {
        let spec = GeneratorSpec {
            oriented: true,
            ..small_spec()
        };
        let s = generate_scene(&spec, "scene_0007", &mut scene_rng(6, 0)).unwrap();
        let back = scene_from_str(&scene_to_string(&s), "dir/scene_0007.p3d").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn parse_errors_name_line_and_section() {
        let text = "P3D 1 3 1 2 0\n0 0 0\n1 1 1\n";
        match scene_from_str(text, "t.p3d") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("points section"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = "P3D 1 1 1 2 0\n0 0 0\n";
        match scene_from_str(text, "t.p3d") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("boxes section")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            scene_from_str("P3D 2 0 0 1 0\n", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
        let ok = scene_from_str("# hello\nP3D 1 1 0 2 0\n0.5 0.5 0.5\n", "x/empty.p3d").unwrap();
        assert!(ok.boxes.is_empty());
        assert_eq!(ok.id, "empty");
    }

    #[test]
    fn detection_round_trip() {
        let d = vec![Detection {
            scene_id: "scene_0001".into(),
            class_id: 2,
            score: 0.8125,
            bbox: WorldBox::new([1.0, 2.5, 0.3], [0.4, 0.5, 0.6], 1.25, 2),
        }];
        assert_eq!(
            detections_from_str(&detections_to_string(&d), "d").unwrap(),
            d
        );
        assert!(detections_from_str(&detections_to_string(&[]), "d")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dataset_manifest_is_reproducible() {
        let spec = GeneratorSpec {
            num_scenes: 5,
            points_per_scene: 128,
            ..GeneratorSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(a.path(), &spec).unwrap();
        let mb = write_dataset(b.path(), &spec).unwrap();
        assert_eq!(ma, mb);
        assert_eq!((ma.train.len(), ma.val.len()), (4, 1));
        assert_eq!(load_split(a.path(), Split::Train).unwrap().len(), 4);
        let empty = GeneratorSpec {
            num_scenes: 0,
            ..spec
        };
        let err = write_dataset(a.path(), &empty).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
    }
}
