//! C ABI over the renderer: load a checkpoint, render a pose, and pull an
//! image cotangent back to joint space.
//!
//! Every fallible function returns an [`RsStatus`]. On failure a message is
//! kept per thread and can be read with [`rs_last_error`]. Models are
//! opaque handles owned by the caller and released with
//! [`rs_model_free`]; a handle may be shared by threads for reading.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use robosplat::camera::Camera;
use robosplat::checkpoint::load_model;
use robosplat::deform::{pose_splat, pose_splat_backward, GradRequest, SplatModel};
use robosplat::image::Image;
use robosplat::kinematics::Pose;
use robosplat::raster::{rasterize, rasterize_backward, render};
use robosplat::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Failed = 5,
    Panic = 6,
}

/// Pinhole camera with an axis-angle world-to-camera rotation.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RsCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl From<&RsCamera> for Camera {
    fn from(c: &RsCamera) -> Self {
        Camera {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width as usize,
            height: c.height as usize,
            rotation: c.rotation,
            translation: c.translation,
        }
    }
}

/// A loaded model.
pub struct RsModel {
    model: SplatModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(RsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::IoFailure { .. } => RsStatus::Io,
            Error::Format { .. } => RsStatus::Format,
            Error::PoseLengthMismatch { .. } | Error::Config(_) | Error::ShapeMismatch(_) => RsStatus::InvalidArgument,
            _ => RsStatus::Failed,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(RsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

struct Inputs<'a> {
    model: &'a SplatModel,
    pose: Pose,
    camera: Camera,
    background: [f64; 3],
}

/// # Safety
/// Pointers as documented on the public functions.
unsafe fn inputs<'a>(
    model: *const RsModel,
    pose: *const f64,
    pose_len: usize,
    camera: *const RsCamera,
    background: *const f64,
) -> Result<Inputs<'a>, Fail> {
    non_null(model, "model")?;
    non_null(camera, "camera")?;
    let model = &(*model).model;
    let pose = Pose(slice(pose, pose_len, "pose")?.to_vec());
    if pose.len() != model.robot.dof {
        return Err(invalid(format!(
            "pose has {} values, model has {} degrees of freedom",
            pose.len(),
            model.robot.dof
        )));
    }
    let camera = Camera::from(&*camera);
    camera.validate()?;
    let background = if background.is_null() {
        [0.0; 3]
    } else {
        let b = slice(background, 3, "background")?;
        [b[0], b[1], b[2]]
    };
    Ok(Inputs {
        model,
        pose,
        camera,
        background,
    })
}

fn pixels(camera: &Camera) -> usize {
    camera.width * camera.height * 3
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_model_load(path: *const c_char, out: *mut *mut RsModel) -> RsStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(RsModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`rs_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rs_model_free(model: *mut RsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Degrees of freedom (pose length), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rs_model_dof(model: *const RsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.robot.dof)
}

/// Number of Gaussians, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rs_model_gaussian_count(model: *const RsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.gaussians.len())
}

/// Renders `model` at `pose` into `out`, an RGB buffer of
/// `height * width * 3` floats in row-major order. `background` is three
/// values or null for black.
///
/// # Safety
/// `model` must be a live handle, `pose` must hold `pose_len` values,
/// `camera` must be readable, and `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn rs_render(
    model: *const RsModel,
    pose: *const f64,
    pose_len: usize,
    camera: *const RsCamera,
    background: *const f64,
    out: *mut f32,
    out_len: usize,
) -> RsStatus {
    guard(|| {
        let inp = inputs(model, pose, pose_len, camera, background)?;
        non_null(out, "out")?;
        if out_len != pixels(&inp.camera) {
            return Err(invalid(format!(
                "output holds {out_len} floats, image needs {}",
                pixels(&inp.camera)
            )));
        }
        let posed = pose_splat(inp.model, &inp.pose, GradRequest::NONE, None)?;
        let img = render(&inp.camera, &posed, inp.background);
        let out = std::slice::from_raw_parts_mut(out, out_len);
        for (o, v) in out.iter_mut().zip(&img.data) {
            *o = *v as f32;
        }
        Ok(())
    })
}

/// Pulls an image cotangent `dL/dI` (same layout as [`rs_render`]'s
/// output) back to `dL/dp`, written to `grad` (`pose_len` values).
///
/// # Safety
/// As [`rs_render`]; `cotangent` must hold `cotangent_len` floats and
/// `grad` must have room for `pose_len` values.
#[no_mangle]
pub unsafe extern "C" fn rs_pose_gradient(
    model: *const RsModel,
    pose: *const f64,
    pose_len: usize,
    camera: *const RsCamera,
    background: *const f64,
    cotangent: *const f32,
    cotangent_len: usize,
    grad: *mut f64,
) -> RsStatus {
    guard(|| {
        let inp = inputs(model, pose, pose_len, camera, background)?;
        non_null(grad, "grad")?;
        if cotangent_len != pixels(&inp.camera) {
            return Err(invalid(format!(
                "cotangent holds {cotangent_len} floats, image needs {}",
                pixels(&inp.camera)
            )));
        }
        let cot = slice(cotangent, cotangent_len, "cotangent")?;
        let cot = Image {
            width: inp.camera.width,
            height: inp.camera.height,
            data: cot.iter().map(|&v| f64::from(v)).collect(),
        };
        let posed = pose_splat(inp.model, &inp.pose, GradRequest::POSE, None)?;
        let (_, aux) = rasterize(&inp.camera, &posed, inp.background);
        let rg = rasterize_backward(&aux, &posed, &cot)?;
        let mg = pose_splat_backward(inp.model, &posed, &rg.splats)?;
        std::slice::from_raw_parts_mut(grad, pose_len).copy_from_slice(&mg.pose);
        Ok(())
    })
}
