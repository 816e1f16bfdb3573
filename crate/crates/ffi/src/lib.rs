//! C interface to the parkloc toolkit.
//!
//! Every fallible call returns a [`PklStatus`]. On failure the message is
//! kept per thread and read back with [`pkl_last_error_message`]. Objects
//! are opaque handles created by `*_load`/`*_new` style calls and released
//! with the matching `*_free`; passing NULL to a free function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use parkloc::features::{extract, load_pyramid, save_pyramid, FeatureBackend, FeaturePyramid};
use parkloc::gallery::{load_index, GalleryIndex};
use parkloc::imaging::{load_image, Image};
use parkloc::localizer::{localize_pyramid, LocalizationResult, LocalizeOptions};
use parkloc::matcher::{match_pyramids, MatchParams};
use parkloc::vehicle_filter::{BoundingBox, DetectionSet, RemovalRule};
use parkloc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PklStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Io = 4,
    Decode = 5,
    Shape = 6,
    Format = 7,
    Parse = 8,
    DimensionMismatch = 9,
    Build = 10,
    Load = 11,
    Evaluation = 12,
    Panic = 13,
}

impl From<&Error> for PklStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => PklStatus::Io,
            Error::Decode { .. } => PklStatus::Decode,
            Error::InvalidInput(_) => PklStatus::InvalidInput,
            Error::Shape(_) => PklStatus::Shape,
            Error::Format(_) => PklStatus::Format,
            Error::Parse { .. } => PklStatus::Parse,
            Error::DimensionMismatch(_) => PklStatus::DimensionMismatch,
            Error::Build(_) => PklStatus::Build,
            Error::Load(_) => PklStatus::Load,
            Error::Evaluation(_) => PklStatus::Evaluation,
        }
    }
}

/// Matcher settings.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PklMatchParams {
    pub temperature: f64,
    pub threshold: f64,
    pub window: usize,
    pub fine_temperature: f64,
}

impl From<PklMatchParams> for MatchParams {
    fn from(p: PklMatchParams) -> Self {
        MatchParams {
            temperature: p.temperature,
            threshold: p.threshold,
            window: p.window,
            fine_temperature: p.fine_temperature,
        }
    }
}

/// One refined correspondence in preprocessed-image pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PklMatch {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub confidence: f64,
    pub clamped: bool,
}

/// Axis-aligned box in preprocessed-image pixels; edges are inclusive.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PklBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

pub struct PklImage {
    inner: Image,
}

pub struct PklPyramid {
    inner: FeaturePyramid,
}

pub struct PklMatchList {
    items: Vec<PklMatch>,
}

pub struct PklIndex {
    inner: GalleryIndex,
    section_names: Vec<CString>,
}

pub struct PklLocalization {
    inner: LocalizationResult,
    best_entry: CString,
    predicted_section: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PklStatus, String)>) -> PklStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PklStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PklStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PklStatus, String) {
    (PklStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (PklStatus, String) {
    (PklStatus::NullArgument, format!("{what} is NULL"))
}

/// # Safety
/// `p` must be NULL or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PklStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PklStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PklStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), (PklStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pkl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn pkl_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

#[no_mangle]
pub extern "C" fn pkl_match_params_default() -> PklMatchParams {
    let p = MatchParams::default();
    PklMatchParams {
        temperature: p.temperature,
        threshold: p.threshold,
        window: p.window,
        fine_temperature: p.fine_temperature,
    }
}

/// Decodes and preprocesses an image file. A target of 0 keeps its size.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pkl_image_load(
    path: *const c_char,
    target_long_side: u32,
    out: *mut *mut PklImage,
) -> PklStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = load_image(path, target_long_side).map_err(lib_err)?;
        out_arg(out, PklImage { inner })
    })
}

/// Wraps `width * height` row-major intensities in `[0, 1]`.
///
/// # Safety
/// `pixels` must point to `width * height` floats; `id` must be a valid C
/// string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pkl_image_from_gray(
    id: *const c_char,
    pixels: *const f32,
    width: usize,
    height: usize,
    out: *mut *mut PklImage,
) -> PklStatus {
    guard(|| {
        let id = str_arg(id, "id")?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = width
            .checked_mul(height)
            .ok_or((PklStatus::InvalidInput, "image size overflows".to_string()))?;
        let data = std::slice::from_raw_parts(pixels, n).to_vec();
        let inner = Image::new(id, width, height, data).map_err(lib_err)?;
        out_arg(out, PklImage { inner })
    })
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pkl_image_size(image: *const PklImage, width: *mut usize, height: *mut usize) -> PklStatus {
    guard(|| {
        let img = ref_arg(image, "image")?;
        if width.is_null() || height.is_null() {
            return Err(null("size output"));
        }
        *width = img.inner.width();
        *height = img.inner.height();
        Ok(())
    })
}

/// # Safety
/// `image` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pkl_image_free(image: *mut PklImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Extracts features. With `features_dir` NULL the built-in descriptor is
/// used; otherwise `<features_dir>/<source_id>.pklf` is loaded.
///
/// # Safety
/// `image` must be a live handle, `features_dir` NULL or a valid C string,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pkl_extract(
    image: *const PklImage,
    features_dir: *const c_char,
    out: *mut *mut PklPyramid,
) -> PklStatus {
    guard(|| {
        let img = ref_arg(image, "image")?;
        let backend = if features_dir.is_null() {
            FeatureBackend::BuiltinHog
        } else {
            FeatureBackend::InjectedFile {
                dir: PathBuf::from(str_arg(features_dir, "features_dir")?),
            }
        };
        let inner = extract(&img.inner, &backend).map_err(lib_err)?;
        out_arg(out, PklPyramid { inner })
    })
}

/// # Safety
/// `pyramid` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn pkl_pyramid_save(pyramid: *const PklPyramid, path: *const c_char) -> PklStatus {
    guard(|| {
        let p = ref_arg(pyramid, "pyramid")?;
        save_pyramid(&p.inner, str_arg(path, "path")?).map_err(lib_err)
    })
}

/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pkl_pyramid_load(path: *const c_char, out: *mut *mut PklPyramid) -> PklStatus {
    guard(|| {
        let inner = load_pyramid(str_arg(path, "path")?).map_err(lib_err)?;
        out_arg(out, PklPyramid { inner })
    })
}

/// Coarse grid size and number of cells with texture.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pkl_pyramid_coarse_shape(
    pyramid: *const PklPyramid,
    rows: *mut usize,
    cols: *mut usize,
    textured: *mut usize,
) -> PklStatus {
    guard(|| {
        let p = ref_arg(pyramid, "pyramid")?;
        if rows.is_null() || cols.is_null() || textured.is_null() {
            return Err(null("shape output"));
        }
        *rows = p.inner.coarse.rows();
        *cols = p.inner.coarse.cols();
        *textured = p.inner.coarse.textured_count();
        Ok(())
    })
}

/// # Safety
/// `pyramid` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_pyramid_free(pyramid: *mut PklPyramid) {
    if !pyramid.is_null() {
        drop(Box::from_raw(pyramid));
    }
}

/// Coarse-to-fine matching of two pyramids. `params` may be NULL for
/// defaults.
///
/// # Safety
/// Handles must be live; `params` NULL or valid; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pkl_match(
    a: *const PklPyramid,
    b: *const PklPyramid,
    params: *const PklMatchParams,
    out: *mut *mut PklMatchList,
) -> PklStatus {
    guard(|| {
        let (a, b) = (ref_arg(a, "a")?, ref_arg(b, "b")?);
        let params: MatchParams = params.as_ref().map(|p| (*p).into()).unwrap_or_default();
        let matches = match_pyramids(&a.inner, &b.inner, &params).map_err(lib_err)?;
        let items = matches
            .iter()
            .map(|m| PklMatch {
                xa: m.point_a[0],
                ya: m.point_a[1],
                xb: m.point_b[0],
                yb: m.point_b[1],
                confidence: m.confidence,
                clamped: m.clamped,
            })
            .collect();
        out_arg(out, PklMatchList { items })
    })
}

/// # Safety
/// `list` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_match_list_len(list: *const PklMatchList) -> usize {
    list.as_ref().map_or(0, |l| l.items.len())
}

/// Pointer to `pkl_match_list_len` contiguous matches, owned by the list.
///
/// # Safety
/// `list` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_match_list_data(list: *const PklMatchList) -> *const PklMatch {
    list.as_ref().map_or(ptr::null(), |l| l.items.as_ptr())
}

/// # Safety
/// `list` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_match_list_free(list: *mut PklMatchList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Loads an index directory written by the `index` command.
///
/// # Safety
/// `dir` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pkl_index_load(dir: *const c_char, out: *mut *mut PklIndex) -> PklStatus {
    guard(|| {
        let inner = load_index(str_arg(dir, "dir")?).map_err(lib_err)?;
        let section_names = inner
            .entries
            .iter()
            .map(|e| CString::new(e.section_id.as_str()).expect("section ids come from whitespace-split text"))
            .collect();
        out_arg(out, PklIndex { inner, section_names })
    })
}

/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_index_len(index: *const PklIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Section of entry `i`, or NULL when out of range. Owned by the index.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_index_entry_section(index: *const PklIndex, i: usize) -> *const c_char {
    index
        .as_ref()
        .and_then(|x| x.section_names.get(i))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_index_free(index: *mut PklIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Localizes a query pyramid. `boxes` (may be NULL when `n_boxes` is 0)
/// are vehicle boxes in the query's preprocessed frame; `vehicle_filter`
/// enables removal of matches on vehicles. `params` may be NULL.
///
/// # Safety
/// Handles must be live, `boxes` must point to `n_boxes` boxes, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pkl_localize(
    index: *const PklIndex,
    query: *const PklPyramid,
    boxes: *const PklBox,
    n_boxes: usize,
    params: *const PklMatchParams,
    vehicle_filter: bool,
    out: *mut *mut PklLocalization,
) -> PklStatus {
    guard(|| {
        let index = ref_arg(index, "index")?;
        let query = ref_arg(query, "query")?;
        let raw_boxes: &[PklBox] = if n_boxes == 0 {
            &[]
        } else if boxes.is_null() {
            return Err(null("boxes"));
        } else {
            std::slice::from_raw_parts(boxes, n_boxes)
        };
        let detections = DetectionSet {
            source_id: query.inner.source_id.clone(),
            boxes: raw_boxes
                .iter()
                .map(|b| BoundingBox::new(b.x_min, b.y_min, b.x_max, b.y_max, "car", 1.0))
                .collect::<parkloc::Result<_>>()
                .map_err(lib_err)?,
        };
        let opts = LocalizeOptions {
            params: params.as_ref().map(|p| (*p).into()).unwrap_or_default(),
            use_vehicle_filter: vehicle_filter,
            removal_rule: RemovalRule::EitherEndpoint,
        };
        let inner = localize_pyramid(&query.inner, &detections, &index.inner, &opts).map_err(lib_err)?;
        let cstr = |s: &str| CString::new(s).expect("ids come from whitespace-split text");
        out_arg(
            out,
            PklLocalization {
                best_entry: cstr(&inner.best_entry),
                predicted_section: cstr(&inner.predicted_section),
                inner,
            },
        )
    })
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_best_index(r: *const PklLocalization) -> usize {
    r.as_ref().map_or(0, |r| r.inner.best_index)
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_best_entry(r: *const PklLocalization) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.best_entry.as_ptr())
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_predicted_section(r: *const PklLocalization) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.predicted_section.as_ptr())
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_second_best_ratio(r: *const PklLocalization) -> f64 {
    r.as_ref().map_or(0.0, |r| r.inner.second_best_ratio)
}

/// Surviving and raw match counts for entry `i`. Fails when `i` is out of
/// range.
///
/// # Safety
/// `r` must be a live handle; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_count(
    r: *const PklLocalization,
    i: usize,
    count: *mut usize,
    raw_count: *mut usize,
) -> PklStatus {
    guard(|| {
        let r = ref_arg(r, "result")?;
        if count.is_null() || raw_count.is_null() {
            return Err(null("count output"));
        }
        let (Some(&c), Some(&raw)) = (r.inner.counts.get(i), r.inner.raw_counts.get(i)) else {
            return Err((
                PklStatus::InvalidInput,
                format!("entry {i} out of range ({} entries)", r.inner.counts.len()),
            ));
        };
        *count = c;
        *raw_count = raw;
        Ok(())
    })
}

/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkl_localization_free(r: *mut PklLocalization) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
