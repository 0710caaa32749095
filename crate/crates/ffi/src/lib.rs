//! C ABI over the `cardioseg` library.
//!
//! Objects cross the boundary as opaque handles created by `cs_*_new`,
//! `cs_*_read` or `cs_*_load` and released with the matching `cs_*_free`.
//! Every fallible function returns a [`CsStatus`]; on failure the message is
//! available from [`cs_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cardioseg::localizer::{BoundingBox3D, FusionParams, Localizer};
use cardioseg::metrics;
use cardioseg::neuralnet::{Model, NetworkSpec, NetworkWeights};
use cardioseg::phantom::{self, PhantomConfig};
use cardioseg::segmenter::{ClassifyOptions, Pipeline, PostprocessParams};
use cardioseg::volgrid::{self, ElementType, Grid, LabelVolume, NormalizationWindow, Volume3D};
use cardioseg::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string was not valid UTF-8 or an enum value was out of range.
    InvalidArgument = 2,
    Format = 3,
    SizeMismatch = 4,
    Bounds = 5,
    Shape = 6,
    Numeric = 7,
    Config = 8,
    Incompatible = 9,
    LocalizationFailure = 10,
    Grid = 11,
    UndefinedDistance = 12,
    CountMismatch = 13,
    Io = 14,
    /// The library panicked; the handle arguments should be considered poisoned.
    Panic = 15,
}

/// On-disk element type for [`cs_volume_write`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsElementType {
    Short = 0,
    Float = 1,
    UChar = 2,
}

/// Intensity volume.
pub struct CsVolume(Volume3D);

/// Binary mask.
pub struct CsLabel(LabelVolume);

/// Three localizer networks plus the voxel classifier, with default
/// fusion and post-processing parameters.
pub struct CsPipeline(Pipeline);

/// Inclusive voxel box.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl From<BoundingBox3D> for CsBox {
    fn from(b: BoundingBox3D) -> Self {
        CsBox { lo: b.lo, hi: b.hi }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Format(_) => CsStatus::Format,
            Error::SizeMismatch { .. } => CsStatus::SizeMismatch,
            Error::Bounds(_) => CsStatus::Bounds,
            Error::Shape(_) => CsStatus::Shape,
            Error::Numeric { .. } => CsStatus::Numeric,
            Error::Config(_) => CsStatus::Config,
            Error::Incompatible(_) => CsStatus::Incompatible,
            Error::LocalizationFailure { .. } => CsStatus::LocalizationFailure,
            Error::Grid(_) => CsStatus::Grid,
            Error::UndefinedDistance(_) => CsStatus::UndefinedDistance,
            Error::CountMismatch(_) => CsStatus::CountMismatch,
            Error::FileIo { .. } | Error::Io(_) => CsStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn null(name: &str) -> Failure {
    Failure(CsStatus::NullArgument, format!("{name} is null"))
}

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&format!("panic: {msg}"));
            CsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CsStatus::InvalidArgument, format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> FfiResult<()> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

unsafe fn triple<T: Copy>(p: *const T, name: &str) -> FfiResult<[T; 3]> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok([*p, *p.add(1), *p.add(2)])
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next `cs_*` call on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ------------------------------------------------------------------ volumes

/// Copies `len` voxels (x fastest) into a new volume with zero origin.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` values, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut CsVolume,
) -> CsStatus {
    guard(|| {
        let grid = Grid::new(triple(dims, "dims")?, triple(spacing, "spacing")?, [0.0; 3])?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let voxels = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        let vol = Volume3D::new(grid, voxels)?;
        write_out(out, boxed(CsVolume(vol)), "out")
    })
}

/// Reads a MetaImage volume.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_read(path: *const c_char, out: *mut *mut CsVolume) -> CsStatus {
    guard(|| {
        let vol = volgrid::read_volume(path_arg(path, "path")?)?;
        write_out(out, boxed(CsVolume(vol)), "out")
    })
}

/// Writes a MetaImage volume. `etype` is a [`CsElementType`] value.
///
/// # Safety
/// `vol` is a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_write(vol: *const CsVolume, path: *const c_char, etype: u32) -> CsStatus {
    guard(|| {
        let etype = match etype {
            x if x == CsElementType::Short as u32 => ElementType::Short,
            x if x == CsElementType::Float as u32 => ElementType::Float,
            x if x == CsElementType::UChar as u32 => ElementType::UChar,
            other => return Err(Failure(CsStatus::InvalidArgument, format!("unknown element type {other}"))),
        };
        volgrid::write_volume(&handle(vol, "vol")?.0, path_arg(path, "path")?, etype)?;
        Ok(())
    })
}

/// # Safety
/// `vol` is a live handle; `dims` and `spacing` hold 3 writable values each (either may be null).
#[no_mangle]
pub unsafe extern "C" fn cs_volume_geometry(vol: *const CsVolume, dims: *mut usize, spacing: *mut f64) -> CsStatus {
    guard(|| {
        let v = &handle(vol, "vol")?.0;
        if !dims.is_null() {
            ptr::copy_nonoverlapping(v.dims().as_ptr(), dims, 3);
        }
        if !spacing.is_null() {
            ptr::copy_nonoverlapping(v.spacing().as_ptr(), spacing, 3);
        }
        Ok(())
    })
}

/// Copies the voxels into `buf`, which must hold exactly the voxel count.
///
/// # Safety
/// `vol` is a live handle and `buf` has room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_copy_data(vol: *const CsVolume, buf: *mut f64, len: usize) -> CsStatus {
    guard(|| {
        let v = handle(vol, "vol")?.0.voxels();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != v.len() {
            return Err(Failure(
                CsStatus::SizeMismatch,
                format!("buffer holds {len} values, volume has {}", v.len()),
            ));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `vol` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_free(vol: *mut CsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

// ------------------------------------------------------------------- labels

/// Copies `len` mask bytes (non-zero = foreground) into a new label volume.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` bytes, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_label_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const u8,
    len: usize,
    out: *mut *mut CsLabel,
) -> CsStatus {
    guard(|| {
        let grid = Grid::new(triple(dims, "dims")?, triple(spacing, "spacing")?, [0.0; 3])?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let bytes = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).iter().map(|&b| u8::from(b != 0)).collect() };
        let label = LabelVolume::new(grid, bytes)?;
        write_out(out, boxed(CsLabel(label)), "out")
    })
}

/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_label_read(path: *const c_char, out: *mut *mut CsLabel) -> CsStatus {
    guard(|| {
        let label = volgrid::read_label(path_arg(path, "path")?)?;
        write_out(out, boxed(CsLabel(label)), "out")
    })
}

/// # Safety
/// `label` is a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cs_label_write(label: *const CsLabel, path: *const c_char) -> CsStatus {
    guard(|| {
        volgrid::write_label(&handle(label, "label")?.0, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `label` is a live handle; `dims` holds 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn cs_label_dims(label: *const CsLabel, dims: *mut usize) -> CsStatus {
    guard(|| {
        let d = handle(label, "label")?.0.dims();
        if dims.is_null() {
            return Err(null("dims"));
        }
        ptr::copy_nonoverlapping(d.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Number of foreground voxels.
///
/// # Safety
/// `label` is a live handle and `count` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_label_count(label: *const CsLabel, count: *mut usize) -> CsStatus {
    guard(|| write_out(count, handle(label, "label")?.0.count(), "count"))
}

/// Copies the mask (0/1 bytes, x fastest) into `buf`.
///
/// # Safety
/// `label` is a live handle and `buf` has room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_label_copy_data(label: *const CsLabel, buf: *mut u8, len: usize) -> CsStatus {
    guard(|| {
        let v = handle(label, "label")?.0.voxels();
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len != v.len() {
            return Err(Failure(
                CsStatus::SizeMismatch,
                format!("buffer holds {len} bytes, mask has {}", v.len()),
            ));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `label` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_label_free(label: *mut CsLabel) {
    if !label.is_null() {
        drop(Box::from_raw(label));
    }
}

// ------------------------------------------------------------------ metrics

/// # Safety
/// `a` and `b` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_dice(a: *const CsLabel, b: *const CsLabel, out: *mut f64) -> CsStatus {
    guard(|| {
        let d = metrics::dice(&handle(a, "a")?.0, &handle(b, "b")?.0)?;
        write_out(out, d, "out")
    })
}

/// Symmetric mean surface distance in mm, using the spacing of `a`.
///
/// # Safety
/// `a` and `b` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_mean_surface_distance(a: *const CsLabel, b: *const CsLabel, out: *mut f64) -> CsStatus {
    guard(|| {
        let a = &handle(a, "a")?.0;
        let d = metrics::mean_abs_surface_distance(a, &handle(b, "b")?.0, a.spacing())?;
        write_out(out, d, "out")
    })
}

/// Sensitivity and specificity inside `bbox`. An undefined rate is NaN.
///
/// # Safety
/// `pred` and `reference` are live handles; `sensitivity` and `specificity` are writable.
#[no_mangle]
pub unsafe extern "C" fn cs_sensitivity_specificity(
    pred: *const CsLabel,
    reference: *const CsLabel,
    bbox: CsBox,
    sensitivity: *mut f64,
    specificity: *mut f64,
) -> CsStatus {
    guard(|| {
        let pred = &handle(pred, "pred")?.0;
        let b = BoundingBox3D::new(bbox.lo, bbox.hi, pred.dims())?;
        let (se, sp) = metrics::sensitivity_specificity(pred, &handle(reference, "reference")?.0, &b)?;
        write_out(sensitivity, se.unwrap_or(f64::NAN), "sensitivity")?;
        write_out(specificity, sp.unwrap_or(f64::NAN), "specificity")
    })
}

// ------------------------------------------------------------------ phantom

/// Generates one phantom with the default configuration, overriding dims and
/// spacing when the pointers are non-null.
///
/// # Safety
/// `dims`/`spacing` are null or point to 3 values; `image`, `label` and `true_box` are writable.
#[no_mangle]
pub unsafe extern "C" fn cs_phantom_generate(
    dims: *const usize,
    spacing: *const f64,
    seed: u64,
    image: *mut *mut CsVolume,
    label: *mut *mut CsLabel,
    true_box: *mut CsBox,
) -> CsStatus {
    guard(|| {
        if image.is_null() || label.is_null() || true_box.is_null() {
            return Err(null("output pointer"));
        }
        let mut cfg = PhantomConfig::default();
        if !dims.is_null() {
            cfg.dims = triple(dims, "dims")?;
        }
        if !spacing.is_null() {
            cfg.spacing = triple(spacing, "spacing")?;
        }
        let s = phantom::generate(&cfg, seed)?;
        write_out(true_box, s.true_box.into(), "true_box")?;
        write_out(image, boxed(CsVolume(s.image)), "image")?;
        write_out(label, boxed(CsLabel(s.label)), "label")
    })
}

// ----------------------------------------------------------------- pipeline

/// Loads the four weight files into a pipeline with default parameters.
///
/// # Safety
/// All paths are NUL-terminated strings and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pipeline_load(
    localizer_axial: *const c_char,
    localizer_coronal: *const c_char,
    localizer_sagittal: *const c_char,
    segmenter: *const c_char,
    out: *mut *mut CsPipeline,
) -> CsStatus {
    guard(|| {
        let loc = NetworkSpec::localizer_default();
        let load = |p: *const c_char, name: &str| -> FfiResult<NetworkWeights> {
            Ok(NetworkWeights::load(path_arg(p, name)?, &loc)?)
        };
        let localizer = Localizer::new(
            &loc,
            &load(localizer_axial, "localizer_axial")?,
            &load(localizer_coronal, "localizer_coronal")?,
            &load(localizer_sagittal, "localizer_sagittal")?,
        )?;
        let seg_spec = NetworkSpec::segmentation_default();
        let seg = NetworkWeights::load(path_arg(segmenter, "segmenter")?, &seg_spec)?;
        let pipeline = Pipeline {
            localizer,
            segmenter: Model::new(&seg_spec, &seg)?,
            window: NormalizationWindow::default(),
            fusion: FusionParams::default(),
            post: PostprocessParams::default(),
            classify: ClassifyOptions::default(),
        };
        write_out(out, boxed(CsPipeline(pipeline)), "out")
    })
}

/// Segments a raw-intensity volume. On success `mask` receives a new label
/// handle, `bbox` the localized box and `empty` whether nothing cleared the
/// threshold. `bbox` and `empty` may be null.
///
/// # Safety
/// `pipeline` and `image` are live handles; `mask` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_pipeline_segment(
    pipeline: *const CsPipeline,
    image: *const CsVolume,
    mask: *mut *mut CsLabel,
    bbox: *mut CsBox,
    empty: *mut bool,
) -> CsStatus {
    guard(|| {
        if mask.is_null() {
            return Err(null("mask"));
        }
        let res = handle(pipeline, "pipeline")?.0.segment(&handle(image, "image")?.0)?;
        if !bbox.is_null() {
            bbox.write(res.bbox.into());
        }
        if !empty.is_null() {
            empty.write(res.empty);
        }
        mask.write(boxed(CsLabel(res.mask)));
        Ok(())
    })
}

/// # Safety
/// `pipeline` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_pipeline_free(pipeline: *mut CsPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}
