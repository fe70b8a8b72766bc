//! C ABI for the distillrag engine.
//!
//! Every fallible function returns a [`DrStatus`]. On failure a message is
//! kept per thread and can be read with [`dr_last_error`]. Strings returned
//! through out-parameters are owned by the caller and must be released with
//! [`dr_string_free`]; index handles with [`dr_index_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use distillrag::elo::{expected_score, EloState};
use distillrag::index::{load_database, parse_database, FineMode, IndexError, DEFAULT_FANOUT};
use distillrag::toolcall::ToolCallError;
use distillrag::{parse_tool_call, KnowledgeIndex, LocalHashEmbedder};

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    SchemaViolation = 6,
    DuplicateEntity = 7,
    EmptyDatabase = 8,
    EmptyQuery = 9,
    NoToolCall = 10,
    UnbalancedParens = 11,
    Embedding = 12,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrGranularity {
    Coarse = 0,
    Fine = 1,
}

/// Opaque index handle.
pub struct DrIndex {
    index: KnowledgeIndex,
    embedder: LocalHashEmbedder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(DrStatus, String);

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        let status = match e {
            IndexError::EmptyDatabase => DrStatus::EmptyDatabase,
            IndexError::DuplicateEntity(_) => DrStatus::DuplicateEntity,
            IndexError::InvalidRecord { .. } => DrStatus::SchemaViolation,
            IndexError::EmptyQuery => DrStatus::EmptyQuery,
            IndexError::InvalidNum => DrStatus::InvalidArgument,
            IndexError::Embedding { .. } => DrStatus::Embedding,
            IndexError::Io(_) => DrStatus::Io,
            IndexError::Parse(_) => DrStatus::Parse,
            _ => DrStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, converting failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(DrStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(DrStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(DrStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

fn open(records: Vec<distillrag::MedicineRecord>, dim: usize) -> Result<Box<DrIndex>, Failure> {
    let embedder =
        LocalHashEmbedder::new(dim).map_err(|e| Failure(DrStatus::InvalidArgument, e.to_string()))?;
    let index = KnowledgeIndex::build(records, &embedder)?;
    Ok(Box::new(DrIndex { index, embedder }))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn dr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an index from a JSON database body using the local-hash embedder
/// with `dim` buckets.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_index_open_json(
    json: *const c_char,
    dim: usize,
    out: *mut *mut DrIndex,
) -> DrStatus {
    guard(|| {
        out_arg(out, "out")?;
        let records = parse_database(str_arg(json, "json")?)?;
        *out = Box::into_raw(open(records, dim)?);
        Ok(())
    })
}

/// Like [`dr_index_open_json`], reading the database from `path`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_index_open_file(
    path: *const c_char,
    dim: usize,
    out: *mut *mut DrIndex,
) -> DrStatus {
    guard(|| {
        out_arg(out, "out")?;
        let records = load_database(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(open(records, dim)?);
        Ok(())
    })
}

/// Releases an index. Null is ignored.
///
/// # Safety
/// `index` must come from `dr_index_open_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_index_free(index: *mut DrIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` must be a live handle; the out-pointers valid.
#[no_mangle]
pub unsafe extern "C" fn dr_index_stats(
    index: *const DrIndex,
    entities: *mut usize,
    items: *mut usize,
) -> DrStatus {
    guard(|| {
        let idx = index
            .as_ref()
            .ok_or_else(|| Failure(DrStatus::NullArgument, "index is null".into()))?;
        out_arg(entities, "entities")?;
        out_arg(items, "items")?;
        let s = idx.index.stats();
        *entities = s.entities;
        *items = s.items;
        Ok(())
    })
}

/// Searches the index and writes the result as a JSON string
/// (`{"granularity", "candidates": [{"key", "score", "evidence_text"}]}`).
/// Fine search is hierarchical with the default fan-out.
///
/// # Safety
/// `index` must be a live handle, `query` a NUL-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_index_search(
    index: *const DrIndex,
    query: *const c_char,
    granularity: DrGranularity,
    num: usize,
    out_json: *mut *mut c_char,
) -> DrStatus {
    guard(|| {
        let idx = index
            .as_ref()
            .ok_or_else(|| Failure(DrStatus::NullArgument, "index is null".into()))?;
        out_arg(out_json, "out_json")?;
        let q = str_arg(query, "query")?;
        let result = match granularity {
            DrGranularity::Coarse => idx.index.search_coarse(q, num, &idx.embedder)?,
            DrGranularity::Fine => idx.index.search_fine(
                q,
                num,
                &idx.embedder,
                FineMode::Hierarchical,
                DEFAULT_FANOUT,
            )?,
        };
        let json = serde_json::to_string(&result)
            .map_err(|e| Failure(DrStatus::Panic, e.to_string()))?;
        *out_json = into_c_string(json);
        Ok(())
    })
}

/// Extracts the query of the first `search_engine(...)` call in `text`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_query` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dr_parse_tool_call(
    text: *const c_char,
    out_query: *mut *mut c_char,
) -> DrStatus {
    guard(|| {
        out_arg(out_query, "out_query")?;
        let call = parse_tool_call(str_arg(text, "text")?).map_err(|e| {
            let status = match e {
                ToolCallError::NoToolCall => DrStatus::NoToolCall,
                ToolCallError::UnbalancedParens => DrStatus::UnbalancedParens,
                ToolCallError::EmptyQuery => DrStatus::EmptyQuery,
            };
            Failure(status, e.to_string())
        })?;
        *out_query = into_c_string(call.query);
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Expected score of a player rated `r_a` against one rated `r_b`.
#[no_mangle]
pub extern "C" fn dr_elo_expected(r_a: f64, r_b: f64) -> f64 {
    expected_score(r_a, r_b)
}

/// One rating update. `s_a` is 1 (A wins), 0.5 (draw) or 0 (B wins).
///
/// # Safety
/// `new_a` and `new_b` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dr_elo_update(
    r_a: f64,
    r_b: f64,
    s_a: f64,
    k: f64,
    new_a: *mut f64,
    new_b: *mut f64,
) -> DrStatus {
    guard(|| {
        out_arg(new_a, "new_a")?;
        out_arg(new_b, "new_b")?;
        let mut state = EloState::new(["a", "b"], 0.0, k);
        state.ratings.insert("a".into(), r_a);
        state.ratings.insert("b".into(), r_b);
        let (a, b) = state
            .update_pair("a", "b", s_a)
            .map_err(|e| Failure(DrStatus::InvalidArgument, e.to_string()))?;
        *new_a = a;
        *new_b = b;
        Ok(())
    })
}
