//! C ABI over the csvddnet feature pipeline.
//!
//! Every fallible call returns a [`CsvddStatus`]; on failure a message is
//! kept per thread and can be fetched with [`csvdd_last_error_message`].
//! Models are opaque handles created by [`csvdd_model_load`] and released
//! with [`csvdd_model_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use libc::{c_char, c_int, size_t};

use csvddnet::balls::{csvdd_fit, svdd_fit, SvddParams};
use csvddnet::cli::bundle::ModelBundle;
use csvddnet::ingest::{GrayImage, PatchBatch};
use csvddnet::learner::{argmax, EnsembleModel};
use csvddnet::pipeline::{make_view_descriptor, View};
use csvddnet::preprocess::normalize_in_place;
use csvddnet::{Error, Matrix};

/// Result codes shared by every function of the C interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvddStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Solver = 6,
    MissingMember = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Ball flavor for [`csvdd_ball_fit`].
pub const CSVDD_BALL_CSVDD: c_int = 0;
pub const CSVDD_BALL_SVDD: c_int = 1;

/// A loaded model bundle.
pub struct CsvddModel {
    bundle: ModelBundle,
    ensemble: Option<EnsembleModel>,
}

/// Geometry of one descriptor view.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvddView {
    pub receptive_field: size_t,
    pub pooling: size_t,
    pub blocks: size_t,
    /// Encoding outputs per patch.
    pub code_dim: size_t,
    /// Descriptor length for this view.
    pub descriptor_dim: size_t,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> CsvddStatus {
    match err {
        Error::Io(_) => CsvddStatus::Io,
        Error::BadMagic(_)
        | Error::TruncatedPayload { .. }
        | Error::UnsupportedFormat(_)
        | Error::Format(_)
        | Error::VersionMismatch { .. }
        | Error::Config(_) => CsvddStatus::Format,
        Error::DimensionMismatch(_)
        | Error::ImageTooSmall { .. }
        | Error::BallMismatch(_)
        | Error::MapTooSmall { .. }
        | Error::MissingView(_) => CsvddStatus::DimensionMismatch,
        Error::DegenerateCovariance(_)
        | Error::NotConverged { .. }
        | Error::RankDeficient { .. }
        | Error::Cluster { .. } => CsvddStatus::Solver,
        Error::MissingMember(_) | Error::MissingTruth(_) => CsvddStatus::MissingMember,
        _ => CsvddStatus::InvalidArgument,
    }
}

struct Failure(CsvddStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: CsvddStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, records any error or panic and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsvddStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsvddStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            CsvddStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(CsvddStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(CsvddStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(model: *const CsvddModel) -> Result<&'a CsvddModel, Failure> {
    model
        .as_ref()
        .ok_or_else(|| fail(CsvddStatus::NullPointer, "model is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(CsvddStatus::NullPointer, format!("{what} is null")))
}

fn view_at(model: &CsvddModel, idx: usize) -> Result<View, Failure> {
    model.bundle.params.views.get(idx).copied().ok_or_else(|| {
        fail(
            CsvddStatus::InvalidArgument,
            format!("view {idx} out of range ({} views)", model.bundle.params.views.len()),
        )
    })
}

fn view_info(model: &CsvddModel, view: View) -> Result<CsvddView, Failure> {
    let scale = model.bundle.scale(view.r)?;
    let code_dim = view.encoding.output_dim(scale.dictionary.k(), scale.dictionary.dim());
    Ok(CsvddView {
        receptive_field: view.r,
        pooling: view.p,
        blocks: view.m,
        code_dim,
        descriptor_dim: view.descriptor_dim(code_dim),
    })
}

unsafe fn image_from(pixels: *const f64, width: usize, height: usize) -> Result<GrayImage, Failure> {
    let n = width
        .checked_mul(height)
        .ok_or_else(|| fail(CsvddStatus::InvalidArgument, "image size overflows"))?;
    let values = slice(pixels, n, "pixels")?;
    Ok(GrayImage::new(width, height, values.to_vec())?)
}

fn check_room(len: usize, need: usize, what: &str) -> Result<(), Failure> {
    if len < need {
        return Err(fail(
            CsvddStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csvdd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn csvdd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Fits one ball to `n` points of dimension `dim` stored row-major.
/// `center_out` receives `dim` values.
///
/// # Safety
/// `points` must hold `n * dim` doubles and `center_out` `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn csvdd_ball_fit(
    points: *const f64,
    n: size_t,
    dim: size_t,
    lambda: f64,
    kind: c_int,
    center_out: *mut f64,
    radius_out: *mut f64,
) -> CsvddStatus {
    guard(|| {
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| fail(CsvddStatus::InvalidArgument, "point buffer size overflows"))?;
        let data = slice(points, len, "points")?;
        let center = slice_mut(center_out, dim, "center_out")?;
        let radius = out_ref(radius_out, "radius_out")?;
        let batch = PatchBatch::from_points(Matrix::from_vec(n, dim, data.to_vec())?);
        let fit = match kind {
            CSVDD_BALL_CSVDD => csvdd_fit(&batch, lambda)?,
            CSVDD_BALL_SVDD => svdd_fit(&batch, lambda, SvddParams::default())?,
            other => return Err(fail(CsvddStatus::InvalidArgument, format!("unknown ball kind {other}"))),
        };
        center.copy_from_slice(&fit.center);
        *radius = fit.radius;
        Ok(())
    })
}

/// Loads a model bundle written by the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_load(path: *const c_char, out: *mut *mut CsvddModel) -> CsvddStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(fail(CsvddStatus::NullPointer, "path is null"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(CsvddStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let bundle = ModelBundle::load(Path::new(path))?;
        let ensemble = bundle.ensemble().ok();
        *out = Box::into_raw(Box::new(CsvddModel { bundle, ensemble }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`csvdd_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_free(model: *mut CsvddModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of descriptor views, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_view_count(model: *const CsvddModel) -> size_t {
    model.as_ref().map_or(0, |m| m.bundle.params.views.len())
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_view(model: *const CsvddModel, view: size_t, out: *mut CsvddView) -> CsvddStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_ref(out, "out")?;
        *out = view_info(m, view_at(m, view)?)?;
        Ok(())
    })
}

/// Number of classes of the trained classifier.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_class_count(model: *const CsvddModel, out: *mut size_t) -> CsvddStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_ref(out, "out")?;
        let ens = m
            .ensemble
            .as_ref()
            .ok_or_else(|| fail(CsvddStatus::MissingMember, "model bundle has no classifiers"))?;
        *out = ens.stacking.classes();
        Ok(())
    })
}

/// Encodes one raw `r x r` patch (row-major intensities) for a view:
/// contrast normalization, whitening, then the view's encoding.
///
/// # Safety
/// `patch` must hold `patch_len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_encode_patch(
    model: *const CsvddModel,
    view: size_t,
    patch: *const f64,
    patch_len: size_t,
    out: *mut f64,
    out_len: size_t,
) -> CsvddStatus {
    guard(|| {
        let m = model_ref(model)?;
        let v = view_at(m, view)?;
        let scale = m.bundle.scale(v.r)?;
        let enc = scale.encoder(v.encoding)?;
        if patch_len != v.r * v.r {
            return Err(fail(
                CsvddStatus::DimensionMismatch,
                format!("{patch_len} values for a {r}x{r} patch", r = v.r),
            ));
        }
        let mut p = slice(patch, patch_len, "patch")?.to_vec();
        check_room(out_len, enc.output_dim(), "out")?;
        let out = slice_mut(out, out_len, "out")?;
        normalize_in_place(&mut p, m.bundle.params.descriptor.eps_norm);
        let white = scale.whitening.apply(&p)?;
        enc.encode_into(&white, &mut out[..enc.output_dim()]);
        Ok(())
    })
}

/// Computes the descriptor of a `width x height` image (row-major
/// intensities in [0, 1]) for one view.
///
/// # Safety
/// `pixels` must hold `width * height` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_describe(
    model: *const CsvddModel,
    view: size_t,
    pixels: *const f64,
    width: size_t,
    height: size_t,
    out: *mut f64,
    out_len: size_t,
) -> CsvddStatus {
    guard(|| {
        let m = model_ref(model)?;
        let v = view_at(m, view)?;
        let info = view_info(m, v)?;
        check_room(out_len, info.descriptor_dim, "out")?;
        let out = slice_mut(out, out_len, "out")?;
        let image = image_from(pixels, width, height)?;
        let desc = make_view_descriptor(&image, m.bundle.scale(v.r)?, v, &m.bundle.params.descriptor)?;
        out[..desc.values.len()].copy_from_slice(&desc.values);
        Ok(())
    })
}

/// Classifies an image with the stacked ensemble. When `scores_out` is not
/// NULL it receives one stacked score per class.
///
/// # Safety
/// `pixels` must hold `width * height` doubles, `class_out` must be valid and
/// `scores_out`, if not NULL, must hold `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn csvdd_model_predict(
    model: *const CsvddModel,
    pixels: *const f64,
    width: size_t,
    height: size_t,
    class_out: *mut size_t,
    scores_out: *mut f64,
    scores_len: size_t,
) -> CsvddStatus {
    guard(|| {
        let m = model_ref(model)?;
        let class_out = out_ref(class_out, "class_out")?;
        let ens = m
            .ensemble
            .as_ref()
            .ok_or_else(|| fail(CsvddStatus::MissingMember, "model bundle has no classifiers"))?;
        if !scores_out.is_null() {
            check_room(scores_len, ens.stacking.classes(), "scores_out")?;
        }
        let image = image_from(pixels, width, height)?;
        let descs = m
            .bundle
            .params
            .views
            .iter()
            .map(|&v| {
                make_view_descriptor(&image, m.bundle.scale(v.r)?, v, &m.bundle.params.descriptor).map(|d| d.values)
            })
            .collect::<csvddnet::Result<Vec<_>>>()?;
        let rows: Vec<&[f64]> = descs.iter().map(Vec::as_slice).collect();
        let scores = ens.scores(&rows)?;
        *class_out = argmax(&scores);
        if !scores_out.is_null() {
            slice_mut(scores_out, scores_len, "scores_out")?[..scores.len()].copy_from_slice(&scores);
        }
        Ok(())
    })
}
