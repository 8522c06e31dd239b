//! C interface to careseg.
//!
//! Every function returns a [`CsStatus`]. On failure the message is kept per
//! thread and read back with [`cs_last_error_message`]. Handles are opaque and
//! must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use careseg::hierarchy::{LabelSchema, Subgroup};
use careseg::metrics::{dice, surface_distances, volume_ml, BinaryMask};
use careseg::net::CascadeModel;
use careseg::pipeline::{ensemble_predict, load_ensemble, PipelineConfig};
use careseg::postprocess::{postprocess_pipeline, BaseAt, PostprocessConfig};
use careseg::volume::{read_mvol, write_mvol, Geometry, LabelVolume, ScalarVolume};
use careseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    GeometryMismatch = 5,
    Model = 6,
    /// The quantity is not defined for the inputs, e.g. a surface distance
    /// with an empty mask.
    Undefined = 7,
    Panic = 8,
}

/// Post-processing steps for [`cs_postprocess`] and [`cs_ensemble_predict`].
pub const CS_PP_DISCONNECTED_3D: u32 = 1;
pub const CS_PP_DISCONNECTED_2D: u32 = 2;
pub const CS_PP_TOPMOST_SLICE: u32 = 4;
pub const CS_PP_OUTLIERS: u32 = 8;
pub const CS_PP_ALL: u32 = 15;
/// Treat low z as the base for top-most slice removal.
pub const CS_PP_BASE_AT_ZMIN: u32 = 16;

pub const CS_SUBGROUP_D8: u32 = 0;
pub const CS_SUBGROUP_M1: u32 = 1;
pub const CS_SUBGROUP_M12: u32 = 2;

/// Intensity volume.
pub struct CsImage(ScalarVolume);

/// Label volume in stage-3 codes (BG 0, LV 1, MYO 2, MIT 3, MVO 4).
pub struct CsLabels(LabelVolume);

/// Trained models plus the grid they run on.
pub struct CsEnsemble {
    models: Vec<CascadeModel<f32>>,
    config: PipelineConfig,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsSurfaceDistances {
    pub hd: f64,
    pub hd95: f64,
    pub assd: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => CsStatus::Io,
            Error::BadMagic | Error::TruncatedFile { .. } | Error::UnknownDtype(_) | Error::Json(_) => CsStatus::Format,
            Error::GeometryMismatch(_) | Error::ShapeMismatch(_) => CsStatus::GeometryMismatch,
            Error::BadCheckpoint(_) | Error::ArchitectureMismatch(_) => CsStatus::Model,
            _ => CsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CsStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            CsStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(CsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(CsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(CsStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn geometry_arg(dims: *const usize, spacing: *const f32) -> Result<Geometry, Failure> {
    if dims.is_null() || spacing.is_null() {
        return Err(Failure(CsStatus::NullPointer, "dims or spacing is null".into()));
    }
    let d = std::slice::from_raw_parts(dims, 3);
    let s = std::slice::from_raw_parts(spacing, 3);
    Ok(Geometry::new([d[0], d[1], d[2]], [s[0], s[1], s[2]])?)
}

fn postprocess_config(flags: u32) -> Result<PostprocessConfig, Failure> {
    if flags & !(CS_PP_ALL | CS_PP_BASE_AT_ZMIN) != 0 {
        return Err(invalid(format!("unknown post-processing flags {flags:#x}")));
    }
    Ok(PostprocessConfig {
        disconnected_3d: flags & CS_PP_DISCONNECTED_3D != 0,
        disconnected_2d: flags & CS_PP_DISCONNECTED_2D != 0,
        topmost_slice: flags & CS_PP_TOPMOST_SLICE != 0,
        outliers: flags & CS_PP_OUTLIERS != 0,
        base_at: if flags & CS_PP_BASE_AT_ZMIN != 0 {
            BaseAt::ZMin
        } else {
            BaseAt::ZMax
        },
        ..PostprocessConfig::default()
    })
}

fn subgroup_arg(sg: u32) -> Result<Subgroup, Failure> {
    match sg {
        CS_SUBGROUP_D8 => Ok(Subgroup::D8),
        CS_SUBGROUP_M1 => Ok(Subgroup::M1),
        CS_SUBGROUP_M12 => Ok(Subgroup::M12),
        _ => Err(invalid(format!("unknown subgroup {sg}"))),
    }
}

fn masks(pred: &CsLabels, gt: &CsLabels, label: u8) -> Result<(BinaryMask, BinaryMask), Failure> {
    if !LabelSchema::Stage3.contains(label) {
        return Err(invalid(format!("label {label} is not a stage-3 code")));
    }
    Ok((BinaryMask::from_labels(&pred.0, label), BinaryMask::from_labels(&gt.0, label)))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes (without the NUL) of the last error message on this
/// thread, 0 if the last call succeeded.
#[no_mangle]
pub extern "C" fn cs_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message, NUL-terminated and truncated to fit
/// `cap` bytes. Returns the number of bytes written without the NUL.
///
/// # Safety
/// `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    if buf.is_null() || cap == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Reads an intensity volume from an MVOL file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_image_read(path: *const c_char, out: *mut *mut CsImage) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let img = read_mvol(path_arg(path, "path")?)?.into_scalar()?;
        *out = Box::into_raw(Box::new(CsImage(img)));
        Ok(())
    })
}

/// Builds an intensity volume from `nx*ny*nz` values, x fastest.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn cs_image_new(
    dims: *const usize,
    spacing: *const f32,
    data: *const f32,
    len: usize,
    out: *mut *mut CsImage,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let g = geometry_arg(dims, spacing)?;
        if data.is_null() {
            return Err(Failure(CsStatus::NullPointer, "data is null".into()));
        }
        if len != g.nvox() {
            return Err(Failure(
                CsStatus::GeometryMismatch,
                format!("{len} values for {} voxels", g.nvox()),
            ));
        }
        let img = ScalarVolume::new(g, std::slice::from_raw_parts(data, len).to_vec())?;
        *out = Box::into_raw(Box::new(CsImage(img)));
        Ok(())
    })
}

/// # Safety
/// `img` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cs_image_free(img: *mut CsImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Reads a label volume from an MVOL file; codes must be stage-3 codes.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_read(path: *const c_char, out: *mut *mut CsLabels) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let lab = read_mvol(path_arg(path, "path")?)?
            .into_labels()?
            .with_schema(LabelSchema::Stage3)?;
        *out = Box::into_raw(Box::new(CsLabels(lab)));
        Ok(())
    })
}

/// Builds a label volume from `nx*ny*nz` codes, x fastest.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_new(
    dims: *const usize,
    spacing: *const f32,
    data: *const u8,
    len: usize,
    out: *mut *mut CsLabels,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let g = geometry_arg(dims, spacing)?;
        if data.is_null() {
            return Err(Failure(CsStatus::NullPointer, "data is null".into()));
        }
        if len != g.nvox() {
            return Err(Failure(
                CsStatus::GeometryMismatch,
                format!("{len} codes for {} voxels", g.nvox()),
            ));
        }
        let lab = LabelVolume::new(g, LabelSchema::Stage3, std::slice::from_raw_parts(data, len).to_vec())?;
        *out = Box::into_raw(Box::new(CsLabels(lab)));
        Ok(())
    })
}

/// # Safety
/// `labels` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_write(labels: *const CsLabels, path: *const c_char) -> CsStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        write_mvol(&l.0.clone().into(), path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes the grid size to `dims[3]` and the spacing (mm) to `spacing[3]`.
///
/// # Safety
/// `labels` must be valid; `dims` and `spacing` must have room for 3 values.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_geometry(labels: *const CsLabels, dims: *mut usize, spacing: *mut f32) -> CsStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        if dims.is_null() || spacing.is_null() {
            return Err(Failure(CsStatus::NullPointer, "dims or spacing is null".into()));
        }
        for a in 0..3 {
            *dims.add(a) = l.0.dims()[a];
            *spacing.add(a) = l.0.spacing()[a];
        }
        Ok(())
    })
}

/// Borrows the codes, x fastest. The pointer stays valid until the handle
/// is freed.
///
/// # Safety
/// `labels`, `data` and `len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_data(labels: *const CsLabels, data: *mut *const u8, len: *mut usize) -> CsStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        *out_ptr(data, "data")? = l.0.data().as_ptr();
        *out_ptr(len, "len")? = l.0.data().len();
        Ok(())
    })
}

/// # Safety
/// `labels` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cs_labels_free(labels: *mut CsLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Applies the post-processing steps selected by `flags` (`CS_PP_*`).
///
/// # Safety
/// `labels` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cs_postprocess(labels: *const CsLabels, flags: u32, out: *mut *mut CsLabels) -> CsStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        let out = out_ptr(out, "out")?;
        let cfg = postprocess_config(flags)?;
        *out = Box::into_raw(Box::new(CsLabels(postprocess_pipeline(&l.0, &cfg))));
        Ok(())
    })
}

/// Dice score in percent of `label` between two volumes on the same grid.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_dice(pred: *const CsLabels, gt: *const CsLabels, label: u8, out: *mut f64) -> CsStatus {
    guard(|| {
        let (p, g) = masks(borrow(pred, "pred")?, borrow(gt, "gt")?, label)?;
        *out_ptr(out, "out")? = dice(&p, &g)?;
        Ok(())
    })
}

/// Hausdorff, 95th-percentile Hausdorff and average symmetric surface
/// distance (mm). Returns `CS_STATUS_UNDEFINED` when either mask is empty.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_surface_distances(
    pred: *const CsLabels,
    gt: *const CsLabels,
    label: u8,
    out: *mut CsSurfaceDistances,
) -> CsStatus {
    guard(|| {
        let (p, g) = masks(borrow(pred, "pred")?, borrow(gt, "gt")?, label)?;
        let out = out_ptr(out, "out")?;
        match surface_distances(&p, &g)? {
            Some(d) => {
                *out = CsSurfaceDistances {
                    hd: d.hd,
                    hd95: d.hd95,
                    assd: d.assd,
                };
                Ok(())
            }
            None => Err(Failure(CsStatus::Undefined, format!("label {label} is empty in one volume"))),
        }
    })
}

/// Volume of `label` in ml.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_volume_ml(labels: *const CsLabels, label: u8, out: *mut f64) -> CsStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        *out_ptr(out, "out")? = volume_ml(&BinaryMask::from_labels(&l.0, label));
        Ok(())
    })
}

/// Loads every checkpoint in `models_dir`. `config_path` selects the
/// pipeline configuration (network grid); null uses the desk preset.
///
/// # Safety
/// `models_dir` must be NUL-terminated, `config_path` NUL-terminated or
/// null, and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cs_ensemble_load(
    models_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut CsEnsemble,
) -> CsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = path_arg(models_dir, "models_dir")?;
        let config = if config_path.is_null() {
            PipelineConfig::desk()
        } else {
            PipelineConfig::load(path_arg(config_path, "config_path")?)?
        };
        let models = load_ensemble(Path::new(&dir))?;
        *out = Box::into_raw(Box::new(CsEnsemble { models, config }));
        Ok(())
    })
}

/// Number of models in the ensemble, 0 for null.
///
/// # Safety
/// `ens` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn cs_ensemble_len(ens: *const CsEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.models.len())
}

/// Segments `image` for a patient of subgroup `subgroup` (`CS_SUBGROUP_*`).
/// The labels come back on the image grid, post-processed per `flags`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_ensemble_predict(
    ens: *const CsEnsemble,
    image: *const CsImage,
    subgroup: u32,
    flags: u32,
    out: *mut *mut CsLabels,
) -> CsStatus {
    guard(|| {
        let e = borrow(ens, "ensemble")?;
        let img = borrow(image, "image")?;
        let out = out_ptr(out, "out")?;
        let sg = subgroup_arg(subgroup)?;
        let pp = postprocess_config(flags)?;
        let pred = ensemble_predict(
            &e.models,
            &img.0,
            sg,
            &e.config.grid,
            e.config.averaging,
            (flags & CS_PP_ALL != 0).then_some(&pp),
        )?;
        *out = Box::into_raw(Box::new(CsLabels(pred.labels)));
        Ok(())
    })
}

/// # Safety
/// `ens` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn cs_ensemble_free(ens: *mut CsEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}
