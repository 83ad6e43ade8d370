//! C ABI over the meshdex toolkit: opaque handles, status codes and a
//! thread-local last-error message. The header `include/meshdex.h` is
//! generated at build time by cbindgen.
//!
//! Ownership rules: every pointer returned by a `*_load`, `*_stem` or
//! similar constructor stays owned by this library's allocator and must be
//! released with the matching `*_free` function, exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use meshdex::corpus::MeshOntology;
use meshdex::metrics::MetricsReport;
use meshdex::pipeline::evaluate_files;
use meshdex::textprep;
use meshdex::Error;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let cstring = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Status codes mirroring the CLI failure classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshdexStatus {
    Ok = 0,
    /// Null pointer, non-UTF8 string or otherwise unusable argument.
    InvalidArgument = 1,
    /// Unreadable or malformed input data.
    DataError = 2,
    /// Numeric failure inside the pipeline.
    NumericError = 3,
}

fn status_of(err: &Error) -> MeshdexStatus {
    match err.exit_code() {
        1 => MeshdexStatus::InvalidArgument,
        3 => MeshdexStatus::NumericError,
        _ => MeshdexStatus::DataError,
    }
}

/// Opaque ontology handle.
pub struct MeshdexOntology {
    inner: MeshOntology,
}

/// Flat and hierarchical evaluation measures. Hierarchical fields are set
/// to -1 when no hierarchical evaluation was performed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MeshdexMetrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
    pub accuracy: f64,
    pub subset_accuracy: f64,
    pub lca_precision: f64,
    pub lca_recall: f64,
    pub lca_f: f64,
}

impl From<&MetricsReport> for MeshdexMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            micro_precision: r.mip,
            micro_recall: r.mir,
            micro_f: r.mif,
            macro_precision: r.map,
            macro_recall: r.mar,
            macro_f: r.maf,
            accuracy: r.accuracy,
            subset_accuracy: r.subset_accuracy,
            lca_precision: r.lca_p.unwrap_or(-1.0),
            lca_recall: r.lca_r.unwrap_or(-1.0),
            lca_f: r.lca_f.unwrap_or(-1.0),
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn meshdex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread, or null when the last call
/// succeeded. The pointer stays valid until the next failing call.
#[no_mangle]
pub extern "C" fn meshdex_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|s| s.as_ptr())
            .unwrap_or(ptr::null())
    })
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, MeshdexStatus> {
    if ptr.is_null() {
        set_error("null path argument".into());
        return Err(MeshdexStatus::InvalidArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            Err(MeshdexStatus::InvalidArgument)
        }
    }
}

/// Load an ontology file into an opaque handle. On success writes the
/// handle through `out` and returns `Ok`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn meshdex_ontology_load(
    path: *const c_char,
    out: *mut *mut MeshdexOntology,
) -> MeshdexStatus {
    clear_error();
    if out.is_null() {
        set_error("null output pointer".into());
        return MeshdexStatus::InvalidArgument;
    }
    let path = match path_arg(path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    match MeshOntology::load(path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(MeshdexOntology { inner }));
            MeshdexStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Release an ontology handle. Null is a no-op.
///
/// # Safety
/// `onto` must be a pointer previously returned by
/// [`meshdex_ontology_load`] that has not yet been freed.
#[no_mangle]
pub unsafe extern "C" fn meshdex_ontology_free(onto: *mut MeshdexOntology) {
    if !onto.is_null() {
        drop(Box::from_raw(onto));
    }
}

/// Number of nodes in the ontology; 0 for a null handle.
///
/// # Safety
/// `onto` must be a live handle from [`meshdex_ontology_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn meshdex_ontology_node_count(onto: *const MeshdexOntology) -> usize {
    if onto.is_null() {
        return 0;
    }
    (*onto).inner.node_count()
}

/// Evaluate a prediction file against a gold file (both in
/// `doc_id<TAB>comma-separated-ids` format) over the given ontology,
/// producing flat and hierarchical measures.
///
/// # Safety
/// `gold_path` and `pred_path` must be valid NUL-terminated strings,
/// `onto` a live ontology handle, and `out` a valid metrics slot.
#[no_mangle]
pub unsafe extern "C" fn meshdex_evaluate_files(
    gold_path: *const c_char,
    pred_path: *const c_char,
    onto: *const MeshdexOntology,
    out: *mut MeshdexMetrics,
) -> MeshdexStatus {
    clear_error();
    if out.is_null() || onto.is_null() {
        set_error("null handle or output pointer".into());
        return MeshdexStatus::InvalidArgument;
    }
    let gold = match path_arg(gold_path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    let pred = match path_arg(pred_path) {
        Ok(p) => p,
        Err(status) => return status,
    };
    // evaluate_files reloads the ontology from a path; reuse the loaded
    // handle instead by round-tripping through the metrics module
    let result = (|| -> meshdex::Result<MetricsReport> {
        let golds = meshdex::metrics::read_label_file(gold)?;
        let preds_map = meshdex::metrics::read_label_file(pred)?;
        let preds: Vec<meshdex::metrics::PredictionSet> = preds_map
            .into_iter()
            .map(|(doc_id, predicted)| meshdex::metrics::PredictionSet { doc_id, predicted })
            .collect();
        meshdex::metrics::evaluate(&preds, &golds, Some(&(*onto).inner))
    })();
    match result {
        Ok(report) => {
            *out = MeshdexMetrics::from(&report);
            MeshdexStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Ontology-file variant of [`meshdex_evaluate_files`] for callers that do
/// not hold an ontology handle.
///
/// # Safety
/// All three paths must be valid NUL-terminated strings and `out` a valid
/// metrics slot.
#[no_mangle]
pub unsafe extern "C" fn meshdex_evaluate_paths(
    gold_path: *const c_char,
    pred_path: *const c_char,
    ontology_path: *const c_char,
    out: *mut MeshdexMetrics,
) -> MeshdexStatus {
    clear_error();
    if out.is_null() {
        set_error("null output pointer".into());
        return MeshdexStatus::InvalidArgument;
    }
    let (gold, pred, onto) = match (
        path_arg(gold_path),
        path_arg(pred_path),
        path_arg(ontology_path),
    ) {
        (Ok(g), Ok(p), Ok(o)) => (g, p, o),
        (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
    };
    match evaluate_files(gold, pred, onto) {
        Ok(report) => {
            *out = MeshdexMetrics::from(&report);
            MeshdexStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Porter-stem a lowercase token. The returned string must be released
/// with [`meshdex_string_free`].
///
/// # Safety
/// `token` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn meshdex_stem(token: *const c_char) -> *mut c_char {
    clear_error();
    if token.is_null() {
        set_error("null token".into());
        return ptr::null_mut();
    }
    let Ok(token) = CStr::from_ptr(token).to_str() else {
        set_error("token is not valid UTF-8".into());
        return ptr::null_mut();
    };
    match CString::new(textprep::stem(token)) {
        Ok(s) => s.into_raw(),
        Err(_) => {
            set_error("stem contains interior NUL".into());
            ptr::null_mut()
        }
    }
}

/// Release a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from a meshdex function and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn meshdex_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
