//! C interface to sis3d.
//!
//! Every fallible call returns a [`Sis3dStatus`]; on failure a message is
//! kept per thread and read back with [`sis3d_last_error`]. Objects are
//! opaque handles created by the `_synthesize`, `_init`, `_load` and
//! detection calls and released with the matching `*_free`, which accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sis3d::eval::{mean_average_precision, Detection, IouKind};
use sis3d::io::{load_scene, read_file, write_file};
use sis3d::model::init_model;
use sis3d::nn::{read_checkpoint, write_checkpoint, ParamStore};
use sis3d::pipeline::{infer_scene, select_views_unlabeled, synthesize, PipelineConfig, SceneData};
use sis3d::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sis3dStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NoViews = 6,
    Divergence = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// Overlap used by [`sis3d_map`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sis3dIou {
    Box = 0,
    Mask = 1,
}

/// One detection in voxel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Sis3dDetection {
    pub class_id: u32,
    pub score: f64,
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Voxels in the instance mask; 0 when there is none.
    pub mask_len: usize,
}

/// A fused scene: TSDF grid, camera views and ground truth.
pub struct Sis3dScene {
    data: SceneData,
}

/// Trained parameters together with the config they were built for.
pub struct Sis3dModel {
    params: ParamStore<f32>,
    cfg: PipelineConfig,
}

/// A list of detections owned by the library.
pub struct Sis3dDetections {
    dets: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(Sis3dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::IoFailure { .. } | Error::Io(_) => Sis3dStatus::Io,
            Error::BadMagic { .. } | Error::VersionUnsupported(_) | Error::TruncatedFile(_) | Error::Format(_) | Error::Json(_) => {
                Sis3dStatus::Format
            }
            Error::ShapeMismatch(_) | Error::MetaMismatch(_) | Error::SceneTooSmall { .. } | Error::EmptyCrop => Sis3dStatus::Shape,
            Error::NoViews => Sis3dStatus::NoViews,
            Error::DivergenceDetected { .. } => Sis3dStatus::Divergence,
            Error::Invalid(_) | Error::InsufficientData(_) | Error::PlacementFailure { .. } => Sis3dStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Sis3dStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Sis3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Sis3dStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Sis3dStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(Sis3dStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Null selects the default config.
unsafe fn config_arg(json: *const c_char) -> Result<PipelineConfig, Fail> {
    let cfg = if json.is_null() {
        PipelineConfig::default()
    } else {
        serde_json::from_str(str_arg(json, "config")?).map_err(|e| Fail(Sis3dStatus::InvalidArgument, format!("config: {e}")))?
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sis3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of this thread's last failed call, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sis3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Synthesizes, scans and fuses one scene.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_scene_synthesize(config_json: *const c_char, seed: u64, out: *mut *mut Sis3dScene) -> Sis3dStatus {
    guard(|| {
        let cfg = config_arg(config_json)?;
        let data = synthesize(&cfg.scene, &cfg.trajectory, cfg.truncation, seed)?;
        out_arg(out, Sis3dScene { data })
    })
}

/// Loads a scene folder written by `sis3d synth` and `sis3d fuse`.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_scene_load(dir: *const c_char, out: *mut *mut Sis3dScene) -> Sis3dStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        out_arg(out, Sis3dScene { data: load_scene(&dir)? })
    })
}

/// Grid size in voxels.
///
/// # Safety
/// `scene` is a live handle; `dims` points to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn sis3d_scene_dims(scene: *const Sis3dScene, dims: *mut usize) -> Sis3dStatus {
    guard(|| {
        let s = handle(scene, "scene")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&s.data.tsdf.meta.dims);
        Ok(())
    })
}

/// Copies the signed distances (in voxels, grid layout) into `buf`.
///
/// # Safety
/// `buf` holds `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn sis3d_scene_tsdf(scene: *const Sis3dScene, buf: *mut f32, len: usize) -> Sis3dStatus {
    guard(|| {
        let s = handle(scene, "scene")?;
        let v = &s.data.tsdf.values;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < v.len() {
            return Err(Fail(Sis3dStatus::OutOfRange, format!("buffer holds {len} of {} values", v.len())));
        }
        std::slice::from_raw_parts_mut(buf, v.len()).copy_from_slice(v);
        Ok(())
    })
}

/// # Safety
/// `scene` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sis3d_scene_free(scene: *mut Sis3dScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Freshly initialized model.
///
/// # Safety
/// `config_json` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_model_init(config_json: *const c_char, seed: u64, out: *mut *mut Sis3dModel) -> Sis3dStatus {
    guard(|| {
        let cfg = config_arg(config_json)?;
        let params = init_model(&cfg.model, seed)?;
        out_arg(out, Sis3dModel { params, cfg })
    })
}

/// Reads a checkpoint written by `sis3d train` or [`sis3d_model_save`].
///
/// # Safety
/// `path` is NUL-terminated, `config_json` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_model_load(path: *const c_char, config_json: *const c_char, out: *mut *mut Sis3dModel) -> Sis3dStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let cfg = config_arg(config_json)?;
        let params = read_checkpoint(&mut read_file(&path)?.as_slice())?;
        let fresh = init_model(&cfg.model, 0)?;
        let same = fresh.len() == params.len() && fresh.iter().zip(params.iter()).all(|(a, b)| a.0 == b.0 && a.1.shape == b.1.shape);
        if !same {
            return Err(Fail(Sis3dStatus::Shape, "checkpoint does not match the config's architecture".into()));
        }
        out_arg(out, Sis3dModel { params, cfg })
    })
}

/// # Safety
/// `model` is a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sis3d_model_save(model: *const Sis3dModel, path: *const c_char) -> Sis3dStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.params)?;
        write_file(&path, &buf)?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sis3d_model_free(model: *mut Sis3dModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whole-scene detection, using the views that best cover the scene's surface.
///
/// # Safety
/// `model` and `scene` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_detect(model: *const Sis3dModel, scene: *const Sis3dScene, out: *mut *mut Sis3dDetections) -> Sis3dStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = &handle(scene, "scene")?.data;
        let pick = select_views_unlabeled(&s.tsdf, &s.views, m.cfg.views_per_chunk)?;
        let views: Vec<_> = pick.into_iter().map(|i| s.views[i].clone()).collect();
        let dets = infer_scene(&m.params, &m.cfg, &s.tsdf, &views)?;
        out_arg(out, Sis3dDetections { dets })
    })
}

/// The scene's ground-truth instances, each with score 1.
///
/// # Safety
/// `scene` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_ground_truth(scene: *const Sis3dScene, out: *mut *mut Sis3dDetections) -> Sis3dStatus {
    guard(|| {
        let s = handle(scene, "scene")?;
        out_arg(
            out,
            Sis3dDetections {
                dets: s.data.annotations.iter().map(Detection::from).collect(),
            },
        )
    })
}

/// Number of detections; 0 for null.
///
/// # Safety
/// `dets` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sis3d_detections_len(dets: *const Sis3dDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.dets.len())
}

/// # Safety
/// `dets` is a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_detection_get(dets: *const Sis3dDetections, index: usize, out: *mut Sis3dDetection) -> Sis3dStatus {
    guard(|| {
        let d = nth(dets, index)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Sis3dDetection {
            class_id: d.class_id as u32,
            score: d.score,
            min: d.bbox.min(),
            max: d.bbox.max(),
            mask_len: d.mask.as_ref().map_or(0, Vec::len),
        };
        Ok(())
    })
}

unsafe fn nth<'a>(dets: *const Sis3dDetections, index: usize) -> Result<&'a Detection, Fail> {
    let all = &handle(dets, "detections")?.dets;
    all.get(index)
        .ok_or_else(|| Fail(Sis3dStatus::OutOfRange, format!("detection {index} of {}", all.len())))
}

/// Copies the mask as `x, y, z` triples into `voxels`, which holds
/// `3 * capacity` entries.
///
/// # Safety
/// `dets` is a live handle; `voxels` holds `3 * capacity` writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn sis3d_detection_mask(dets: *const Sis3dDetections, index: usize, voxels: *mut u32, capacity: usize) -> Sis3dStatus {
    guard(|| {
        let mask = nth(dets, index)?.mask.as_deref().unwrap_or(&[]);
        if mask.is_empty() {
            return Ok(());
        }
        if voxels.is_null() {
            return Err(null("voxels"));
        }
        if capacity < mask.len() {
            return Err(Fail(Sis3dStatus::OutOfRange, format!("room for {capacity} of {} voxels", mask.len())));
        }
        let out = std::slice::from_raw_parts_mut(voxels, 3 * mask.len());
        for (dst, v) in out.chunks_exact_mut(3).zip(mask) {
            for a in 0..3 {
                dst[a] = v[a] as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `dets` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sis3d_detections_free(dets: *mut Sis3dDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Single-scene mAP at one IoU threshold over `num_classes` classes,
/// leaving out classes without ground truth.
///
/// # Safety
/// `preds` and `gts` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn sis3d_map(
    preds: *const Sis3dDetections,
    gts: *const Sis3dDetections,
    iou: f64,
    kind: Sis3dIou,
    num_classes: usize,
    out: *mut f64,
) -> Sis3dStatus {
    guard(|| {
        let p = handle(preds, "preds")?.dets.clone();
        let g = handle(gts, "gts")?.dets.clone();
        if !(0.0..=1.0).contains(&iou) {
            return Err(Fail(Sis3dStatus::InvalidArgument, format!("iou {iou} outside [0, 1]")));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let kind = match kind {
            Sis3dIou::Box => IouKind::Box,
            Sis3dIou::Mask => IouKind::Mask,
        };
        *out = mean_average_precision(&[p], &[g], &[iou], num_classes, kind, true).map[0];
        Ok(())
    })
}
