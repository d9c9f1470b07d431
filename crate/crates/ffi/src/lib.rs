//! C interface to a finished run directory.
//!
//! `plm_open` loads the base checkpoint and, when present, the newest update
//! checkpoint; `plm_answer` then serves greedy-decoded answers through
//! whatever system the run built (plain model, always-on adapters, or the
//! selector-gated stack), and `plm_route` exposes the gate's decision for a
//! question without generating anything.
//!
//! Conventions: every function returns 0 on success and a `PLM_ERR_*` code
//! otherwise; `plm_last_error_message` retrieves a human-readable reason for
//! the calling thread's most recent failure.  Strings are NUL-terminated
//! UTF-8.  The header in `include/pluglm.h` is maintained by hand to match
//! this file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use pluglm::adapters::AdapterStack;
use pluglm::checkpoint::{load_base, load_update};
use pluglm::error::Error;
use pluglm::model::BaseModel;
use pluglm::selector::{route, EmbeddingMemory};
use pluglm::vocab::Vocab;

pub const PLM_OK: i32 = 0;
pub const PLM_ERR_INTERNAL: i32 = 1;
pub const PLM_ERR_CONFIG: i32 = 2;
pub const PLM_ERR_MISSING_ARTIFACT: i32 = 3;
pub const PLM_ERR_NUMERIC: i32 = 4;
pub const PLM_ERR_BAD_ARGUMENT: i32 = 5;
pub const PLM_ERR_BUFFER_TOO_SMALL: i32 = 6;

/// Generation budget mirroring the evaluation default.
const MAX_ANSWER_LEN: usize = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn code_of(e: &Error) -> i32 {
    match e.exit_code() {
        2 => PLM_ERR_CONFIG,
        3 => PLM_ERR_MISSING_ARTIFACT,
        4 => PLM_ERR_NUMERIC,
        _ => PLM_ERR_INTERNAL,
    }
}

/// One loaded run: the pretrained model plus whatever the update stage left.
pub struct PlmHandle {
    theta_old: BaseModel,
    vocab: Vocab,
    /// Full-model regimes replace the weights outright...
    updated_model: Option<BaseModel>,
    /// ...adapter regimes add a stack and, when gated, memories.
    stack: Option<AdapterStack>,
    memories: Vec<EmbeddingMemory>,
    gated: bool,
    delta: f64,
}

fn newest_update(run_dir: &Path) -> Option<PathBuf> {
    let mut newest = None;
    for p in 1.. {
        let path = run_dir.join(format!("update_phase{}.ckpt", p));
        if !path.exists() {
            break;
        }
        newest = Some(path);
    }
    newest
}

fn open_impl(run_dir: &Path) -> Result<PlmHandle, Error> {
    let loaded = load_base(&run_dir.join("base.ckpt"))?;
    let mut handle = PlmHandle {
        theta_old: loaded.model,
        vocab: loaded.vocab,
        updated_model: None,
        stack: None,
        memories: Vec::new(),
        gated: false,
        delta: 0.0,
    };
    if let Some(path) = newest_update(run_dir) {
        let u = load_update(&path, &handle.theta_old.cfg)?;
        if u.base_checksum != handle.theta_old.checksum() {
            return Err(Error::Config(format!(
                "{} was built from a different base.ckpt",
                path.display()
            )));
        }
        handle.updated_model = u.full_model;
        handle.stack = u.stack;
        handle.memories = u.memories;
        handle.gated = u.regime.is_gated();
        handle.delta = u.delta;
    }
    Ok(handle)
}

fn answer_impl(h: &PlmHandle, question: &str) -> Result<String, Error> {
    let ids = h.vocab.encode(question);
    let tokens = if let Some(m) = &h.updated_model {
        m.generate_greedy(&ids, None, MAX_ANSWER_LEN)?
    } else if let Some(stack) = &h.stack {
        let bits = if h.gated {
            let emb = h.theta_old.question_embedding(&ids)?;
            route(&emb, &h.memories, h.delta)?.active
        } else {
            vec![true; stack.phases.len()]
        };
        h.theta_old.generate_greedy(&ids, Some((stack, &bits)), MAX_ANSWER_LEN)?
    } else {
        h.theta_old.generate_greedy(&ids, None, MAX_ANSWER_LEN)?
    };
    Ok(h.vocab.decode(&tokens))
}

/// Copy `s` into a caller-provided buffer with a trailing NUL.
unsafe fn write_str(s: &str, buf: *mut c_char, buf_len: usize) -> i32 {
    let bytes = s.as_bytes();
    if buf_len < bytes.len() + 1 {
        set_error(&format!(
            "buffer of {} bytes cannot hold a {}-byte string plus NUL",
            buf_len,
            bytes.len()
        ));
        return PLM_ERR_BUFFER_TOO_SMALL;
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    PLM_OK
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(&format!("{} is NULL", what));
        return Err(PLM_ERR_BAD_ARGUMENT);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{} is not valid UTF-8", what));
        PLM_ERR_BAD_ARGUMENT
    })
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn plm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a run directory.  On success `*out` owns the handle; release it with
/// `plm_close`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn plm_open(run_dir: *const c_char, out: *mut *mut PlmHandle) -> i32 {
    if out.is_null() {
        set_error("out is NULL");
        return PLM_ERR_BAD_ARGUMENT;
    }
    let dir = match read_str(run_dir, "run_dir") {
        Ok(s) => s,
        Err(code) => return code,
    };
    match open_impl(Path::new(dir)) {
        Ok(handle) => {
            *out = Box::into_raw(Box::new(handle));
            PLM_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_of(&e)
        }
    }
}

/// Release a handle.  NULL is tolerated.
///
/// # Safety
/// `handle` must have come from `plm_open` and not been closed already.
#[no_mangle]
pub unsafe extern "C" fn plm_close(handle: *mut PlmHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Answer a question through the loaded system, writing NUL-terminated UTF-8
/// into `buf`.
///
/// # Safety
/// `handle` must be open; `question` NUL-terminated; `buf` writable for
/// `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn plm_answer(
    handle: *const PlmHandle,
    question: *const c_char,
    buf: *mut c_char,
    buf_len: usize,
) -> i32 {
    let (h, q) = match (handle.as_ref(), read_str(question, "question")) {
        (None, _) => {
            set_error("handle is NULL");
            return PLM_ERR_BAD_ARGUMENT;
        }
        (_, Err(code)) => return code,
        (Some(h), Ok(q)) => (h, q),
    };
    if buf.is_null() {
        set_error("buf is NULL");
        return PLM_ERR_BAD_ARGUMENT;
    }
    match answer_impl(h, q) {
        Ok(text) => write_str(&text, buf, buf_len),
        Err(e) => {
            set_error(&e.to_string());
            code_of(&e)
        }
    }
}

/// Report the selector's decision for a question: `*s_q` gets the best
/// cosine score and `*phase` the routed phase, or -1 when the gate stays
/// closed.  Fails on runs without gated memories.
///
/// # Safety
/// Same pointer rules as `plm_answer`; `s_q` and `phase` must be writable.
#[no_mangle]
pub unsafe extern "C" fn plm_route(
    handle: *const PlmHandle,
    question: *const c_char,
    s_q: *mut f64,
    phase: *mut i64,
) -> i32 {
    let (h, q) = match (handle.as_ref(), read_str(question, "question")) {
        (None, _) => {
            set_error("handle is NULL");
            return PLM_ERR_BAD_ARGUMENT;
        }
        (_, Err(code)) => return code,
        (Some(h), Ok(q)) => (h, q),
    };
    if s_q.is_null() || phase.is_null() {
        set_error("s_q or phase is NULL");
        return PLM_ERR_BAD_ARGUMENT;
    }
    if !h.gated || h.memories.is_empty() {
        set_error("this run has no selector memories to route against");
        return PLM_ERR_CONFIG;
    }
    let decide = || -> Result<(f64, i64), Error> {
        let ids = h.vocab.encode(q);
        let emb = h.theta_old.question_embedding(&ids)?;
        let d = route(&emb, &h.memories, h.delta)?;
        let routed = if d.is_active() {
            h.memories[d.nearest_memory].phase as i64
        } else {
            -1
        };
        Ok((d.s_q, routed))
    };
    match decide() {
        Ok((score, routed)) => {
            *s_q = score;
            *phase = routed;
            PLM_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_of(&e)
        }
    }
}

/// Copy the calling thread's most recent error message into `buf`.
///
/// # Safety
/// `buf` must be writable for `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn plm_last_error_message(buf: *mut c_char, buf_len: usize) -> i32 {
    if buf.is_null() {
        return PLM_ERR_BAD_ARGUMENT;
    }
    LAST_ERROR.with(|e| write_str(e.borrow().to_str().unwrap_or(""), buf, buf_len))
}
