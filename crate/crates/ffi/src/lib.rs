//! C interface to the detector.
//!
//! Conventions: every function returns a [`Detr3dStatus`] and writes
//! results through out-pointers. Models, scenes and detection lists are
//! opaque handles created by `*_new`/`*_load`/`*_read` functions and
//! released with the matching `*_free`. On failure, a description is kept
//! per thread and can be fetched with [`detr3d_last_error_message`]. Panics
//! never cross the boundary; they surface as `DETR3D_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use detr3d::cli::RunConfig;
use detr3d::data::{read_scene, Detection, Scene};
use detr3d::eval::detections_from_predictions;
use detr3d::geometry::{giou_axis_aligned, giou_rotated, iou_axis_aligned, iou_rotated, WorldBox};
use detr3d::matchloss::{hungarian, CostMatrix};
use detr3d::model::{Checkpoint, Detector, ForwardOptions};
use detr3d::pointops::farthest_point_sample;
use detr3d::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detr3dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    CheckpointVersion = 6,
    Numeric = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for Detr3dStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } | Error::Contract(_) | Error::Generation(_) => {
                Detr3dStatus::InvalidArgument
            }
            Error::Io { .. } => Detr3dStatus::Io,
            Error::Parse { .. } | Error::Json(_) => Detr3dStatus::Parse,
            Error::Checkpoint(_) => Detr3dStatus::Checkpoint,
            Error::CheckpointVersion { .. } => Detr3dStatus::CheckpointVersion,
            Error::NonFinite { .. } | Error::Diverged { .. } => Detr3dStatus::Numeric,
            #[allow(unreachable_patterns)]
            _ => Detr3dStatus::Internal,
        }
    }
}

/// A box in world coordinates. `yaw` is the heading about +z in radians.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detr3dBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
}

impl From<&Detr3dBox> for WorldBox {
    fn from(b: &Detr3dBox) -> Self {
        WorldBox::new(b.center, b.size, b.yaw, b.class_id as usize)
    }
}

impl From<&WorldBox> for Detr3dBox {
    fn from(b: &WorldBox) -> Self {
        Detr3dBox {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class_id: b.class_id as u32,
        }
    }
}

/// Opaque trained network.
pub struct Detr3dModel(Detector);

/// Opaque point cloud, optionally with labelled boxes.
pub struct Detr3dScene(Scene);

/// Opaque list of world-frame detections.
pub struct Detr3dDetections(Vec<Detection>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting its error or panic into a status and recording the
/// message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Detr3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Detr3dStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            Detr3dStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            Detr3dStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            Detr3dStatus::from(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            Detr3dStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::Invalid("path is not valid UTF-8".into()))
}

unsafe fn points<'a>(xyz: *const f64, n: usize) -> Result<&'a [[f64; 3]], Failure> {
    let flat = slice(xyz, n * 3, "points")?;
    Ok(std::slice::from_raw_parts(
        flat.as_ptr().cast::<[f64; 3]>(),
        n,
    ))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn detr3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn detr3d_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---------------------------------------------------------------------------
// Geometry and primitives

/// IoU of two boxes. With `rotated` false the yaw is ignored.
///
/// # Safety
/// `a` and `b` must point to valid boxes and `out` to writable memory.
#[no_mangle]
pub unsafe extern "C" fn detr3d_iou(
    a: *const Detr3dBox,
    b: *const Detr3dBox,
    rotated: bool,
    out: *mut f64,
) -> Detr3dStatus {
    guard(|| {
        let (a, b) = (
            WorldBox::from(deref(a, "a")?),
            WorldBox::from(deref(b, "b")?),
        );
        *self::out(out, "out")? = if rotated {
            iou_rotated(&a, &b)
        } else {
            iou_axis_aligned(&a, &b)
        };
        Ok(())
    })
}

/// Generalised IoU of two boxes.
///
/// # Safety
/// As for [`detr3d_iou`].
#[no_mangle]
pub unsafe extern "C" fn detr3d_giou(
    a: *const Detr3dBox,
    b: *const Detr3dBox,
    rotated: bool,
    out: *mut f64,
) -> Detr3dStatus {
    guard(|| {
        let (a, b) = (
            WorldBox::from(deref(a, "a")?),
            WorldBox::from(deref(b, "b")?),
        );
        *self::out(out, "out")? = if rotated {
            giou_rotated(&a, &b)
        } else {
            giou_axis_aligned(&a, &b)
        };
        Ok(())
    })
}

/// Minimum-cost assignment of `cols` targets to `rows >= cols` predictions.
/// `cost` is row-major `rows x cols`. `assignment[r]` receives the target
/// of row `r` or -1.
///
/// # Safety
/// `cost` must hold `rows * cols` values, `assignment` room for `rows`
/// values and `total_cost` must be writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut i64,
    total_cost: *mut f64,
) -> Detr3dStatus {
    guard(|| {
        let data = slice(cost, rows * cols, "cost")?.to_vec();
        let assignment = slice_mut(assignment, rows, "assignment")?;
        let total = out(total_cost, "total_cost")?;
        let m = hungarian(&CostMatrix::new(rows, cols, data)?)?;
        for (slot, a) in assignment.iter_mut().zip(&m.assignment) {
            *slot = a.map_or(-1, |g| g as i64);
        }
        *total = m.total_cost;
        Ok(())
    })
}

/// Farthest point sampling of `k` of the `n` points (`xyz` holds `3n`
/// values), starting from index `seed`. Indices go to `indices[0..k]`.
///
/// # Safety
/// `xyz` must hold `3n` values and `indices` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn detr3d_fps(
    xyz: *const f64,
    n: usize,
    k: usize,
    seed: usize,
    indices: *mut usize,
) -> Detr3dStatus {
    guard(|| {
        let pts = points(xyz, n)?;
        let dst = slice_mut(indices, k, "indices")?;
        let s = farthest_point_sample(pts, k, seed)?;
        dst.copy_from_slice(&s.indices);
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Models

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `model` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_model_load(
    path: *const c_char,
    model: *mut *mut Detr3dModel,
) -> Detr3dStatus {
    guard(|| {
        let dst = out(model, "model")?;
        let det = Checkpoint::load(self::path(path)?)?.to_detector()?;
        *dst = Box::into_raw(Box::new(Detr3dModel(det)));
        Ok(())
    })
}

/// Freshly initialised network of a named preset (`desk`, `full`,
/// `overfit`).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `model` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_model_new(
    preset: *const c_char,
    seed: u64,
    model: *mut *mut Detr3dModel,
) -> Detr3dStatus {
    guard(|| {
        let dst = out(model, "model")?;
        if preset.is_null() {
            return Err(Failure::Null("preset"));
        }
        let name = CStr::from_ptr(preset)
            .to_str()
            .map_err(|_| Failure::Invalid("preset is not valid UTF-8".into()))?;
        let det = Detector::new(RunConfig::preset(name)?.model, seed)?;
        *dst = Box::into_raw(Box::new(Detr3dModel(det)));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn detr3d_model_save(
    model: *const Detr3dModel,
    path: *const c_char,
) -> Detr3dStatus {
    guard(|| {
        let m = deref(model, "model")?;
        Checkpoint::from_detector(&m.0).save(self::path(path)?)?;
        Ok(())
    })
}

/// Number of object classes the model predicts.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_model_num_classes(
    model: *const Detr3dModel,
    out: *mut usize,
) -> Detr3dStatus {
    guard(|| {
        *self::out(out, "out")? = deref(model, "model")?.0.config.num_classes;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn detr3d_model_free(model: *mut Detr3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Scenes

/// Reads a scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `scene` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_scene_read(
    path: *const c_char,
    scene: *mut *mut Detr3dScene,
) -> Detr3dStatus {
    guard(|| {
        let dst = out(scene, "scene")?;
        let s = read_scene(self::path(path)?)?;
        *dst = Box::into_raw(Box::new(Detr3dScene(s)));
        Ok(())
    })
}

/// Unlabelled scene from `n` world-frame points (`xyz` holds `3n`
/// values). `oriented` selects the isotropic normalisation used for
/// oriented boxes.
///
/// # Safety
/// `xyz` must hold `3n` values and `scene` be writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_scene_from_points(
    xyz: *const f64,
    n: usize,
    oriented: bool,
    scene: *mut *mut Detr3dScene,
) -> Detr3dStatus {
    guard(|| {
        let dst = out(scene, "scene")?;
        let pts = points(xyz, n)?;
        if pts.is_empty() {
            return Err(Failure::Invalid("scene needs at least one point".into()));
        }
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Failure::Invalid("points must be finite".into()));
        }
        let s = Scene {
            id: "scene".into(),
            points: pts.to_vec(),
            boxes: Vec::new(),
            num_classes: 0,
            oriented,
        };
        *dst = Box::into_raw(Box::new(Detr3dScene(s)));
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_scene_num_points(
    scene: *const Detr3dScene,
    out: *mut usize,
) -> Detr3dStatus {
    guard(|| {
        *self::out(out, "out")? = deref(scene, "scene")?.0.points.len();
        Ok(())
    })
}

/// Labelled boxes of a scene read from file.
///
/// # Safety
/// `scene` must be a live handle, `boxes` room for `capacity` boxes and
/// `count` writable. `count` receives the total even when it exceeds
/// `capacity`; only the first `capacity` boxes are copied.
#[no_mangle]
pub unsafe extern "C" fn detr3d_scene_boxes(
    scene: *const Detr3dScene,
    boxes: *mut Detr3dBox,
    capacity: usize,
    count: *mut usize,
) -> Detr3dStatus {
    guard(|| {
        let s = &deref(scene, "scene")?.0;
        let dst = slice_mut(boxes, capacity, "boxes")?;
        *out(count, "count")? = s.boxes.len();
        for (d, b) in dst.iter_mut().zip(&s.boxes) {
            *d = b.into();
        }
        Ok(())
    })
}

/// Releases a scene. NULL is ignored.
///
/// # Safety
/// `scene` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn detr3d_scene_free(scene: *mut Detr3dScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

// ---------------------------------------------------------------------------
// Prediction

/// Runs the detector on a scene. `num_queries` and `depth` of 0 keep the
/// model's configured values. NMS is applied when `nms_threshold > 0`.
///
/// # Safety
/// `model` and `scene` must be live handles and `detections` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_predict(
    model: *const Detr3dModel,
    scene: *const Detr3dScene,
    num_queries: usize,
    depth: usize,
    nms_threshold: f64,
    detections: *mut *mut Detr3dDetections,
) -> Detr3dStatus {
    guard(|| {
        let det = &deref(model, "model")?.0;
        let scene = &deref(scene, "scene")?.0;
        let dst = out(detections, "detections")?;
        if !nms_threshold.is_finite() || nms_threshold > 1.0 {
            return Err(Failure::Invalid(format!(
                "nms_threshold {nms_threshold} outside [0, 1]"
            )));
        }
        let ns = scene.normalize()?;
        let opts = ForwardOptions {
            num_queries: (num_queries > 0).then_some(num_queries),
            depth: (depth > 0).then_some(depth),
            ..ForwardOptions::eval()
        };
        let layers = det.predict(&ns.points, opts)?;
        let last = layers.last().map_or(&[][..], Vec::as_slice);
        let nms = (nms_threshold > 0.0).then_some(nms_threshold);
        let dets = detections_from_predictions(&ns.id, last, &ns.normalization, ns.oriented, nms);
        *dst = Box::into_raw(Box::new(Detr3dDetections(dets)));
        Ok(())
    })
}

/// # Safety
/// `detections` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_detections_len(
    detections: *const Detr3dDetections,
    out: *mut usize,
) -> Detr3dStatus {
    guard(|| {
        *self::out(out, "out")? = deref(detections, "detections")?.0.len();
        Ok(())
    })
}

/// Box and score of detection `index`.
///
/// # Safety
/// `detections` must be a live handle; `bbox` and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn detr3d_detections_get(
    detections: *const Detr3dDetections,
    index: usize,
    bbox: *mut Detr3dBox,
    score: *mut f64,
) -> Detr3dStatus {
    guard(|| {
        let list = &deref(detections, "detections")?.0;
        let (b, s) = (out(bbox, "bbox")?, out(score, "score")?);
        let d = list.get(index).ok_or_else(|| {
            Failure::Invalid(format!(
                "index {index} out of range for {} detections",
                list.len()
            ))
        })?;
        *b = (&d.bbox).into();
        *s = d.score;
        Ok(())
    })
}

/// Releases a detection list. NULL is ignored.
///
/// # Safety
/// `detections` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn detr3d_detections_free(detections: *mut Detr3dDetections) {
    if !detections.is_null() {
        drop(Box::from_raw(detections));
    }
}
