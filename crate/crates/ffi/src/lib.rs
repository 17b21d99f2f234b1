//! C ABI over the core library: load a self-contained checkpoint directory
//! (model weights plus its vocabulary files) and run tokenization and
//! held-out scoring from non-Rust callers.
//!
//! Conventions:
//! - Every fallible call returns a `cloze_status` code; `CLOZE_OK` is zero.
//! - On any failure the thread-local message retrieved by
//!   [`cloze_last_error`] describes the most recent error on that thread.
//! - Out-parameters are written only on success, except explicit
//!   length-query patterns documented per function.
//! - Handles are opaque and must be released with [`cloze_model_free`];
//!   passing them between threads is safe, sharing them concurrently for
//!   reads is safe, but free must be the last call.

use cloze::model::Model;
use cloze::objectives::{evaluate_perplexity, Objective};
use cloze::text::{make_examples, Codec, ExampleMode, Vocab};
use cloze::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Status codes returned by every fallible entry point.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClozeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Filesystem failure while reading the checkpoint directory.
    Io = 3,
    /// The checkpoint's configuration or files are malformed.
    Config = 4,
    /// The input text cannot be processed (for example, longer than the
    /// model's maximum sequence length).
    Data = 5,
    /// A non-finite value was produced during evaluation.
    Numeric = 6,
    /// The caller-provided buffer is too small; required size was written
    /// to the length out-parameter.
    BufferTooSmall = 7,
    /// An unexpected internal failure (a bug; the message has details).
    Internal = 8,
}

/// Scoring objectives exposed over the ABI.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClozeObjective {
    /// Every position scored from both sides through the combination layer.
    Cloze = 0,
    /// Forward and backward next-token losses from the towers alone.
    Bilm = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // interior NULs would truncate; replace them rather than fail the report
    let clean: String = msg.chars().map(|c| if c == '\0' { '?' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(e: &Error) -> ClozeStatus {
    match e {
        Error::Io(_) => ClozeStatus::Io,
        Error::Config(_) | Error::Serde(_) => ClozeStatus::Config,
        Error::Data(_) => ClozeStatus::Data,
        Error::NonFinite(_) => ClozeStatus::Numeric,
        Error::Shape { .. } | Error::Invariant(_) => ClozeStatus::Internal,
    }
}

fn fail(e: &Error) -> i32 {
    set_error(&e.to_string());
    status_of(e) as i32
}

/// Loaded model plus the codec it was trained with.
pub struct ClozeModel {
    model: Model<f32>,
    codec: Codec,
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        set_error("null string argument");
        return Err(ClozeStatus::NullArgument as i32);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        ClozeStatus::InvalidUtf8 as i32
    })
}

fn guard<F: FnOnce() -> i32>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic; this is a bug");
            ClozeStatus::Internal as i32
        }
    }
}

fn load_codec(dir: &Path) -> Result<Codec, Error> {
    let vocab_path = dir.join("vocab.txt");
    let vocab = Vocab::load(&mut BufReader::new(std::fs::File::open(&vocab_path)?))?;
    let codes_path = dir.join("codes.txt");
    if codes_path.exists() {
        let code = cloze::text::BpeCode::load(
            &mut BufReader::new(std::fs::File::open(&codes_path)?),
            0,
        )?;
        Ok(Codec::Bpe { code, vocab })
    } else {
        Ok(Codec::Word(vocab))
    }
}

/// Load a checkpoint directory containing `config.txt`, `params.manifest`,
/// `params.bin`, `vocab.txt` and, for subword models, `codes.txt`. On
/// success writes a handle to `out`; release it with [`cloze_model_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloze_model_load(dir: *const c_char, out: *mut *mut ClozeModel) -> i32 {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return ClozeStatus::NullArgument as i32;
        }
        let dir = match str_arg(dir) {
            Ok(s) => Path::new(s),
            Err(code) => return code,
        };
        let model = match Model::<f32>::load(dir) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let codec = match load_codec(dir) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        if codec.vocab().len() != model.config.vocab_size {
            set_error(&format!(
                "vocab.txt has {} types but the model was built for {}",
                codec.vocab().len(),
                model.config.vocab_size
            ));
            return ClozeStatus::Config as i32;
        }
        *out = Box::into_raw(Box::new(ClozeModel { model, codec }));
        ClozeStatus::Ok as i32
    })
}

/// Release a handle returned by [`cloze_model_load`]. Null is a no-op.
///
/// # Safety
/// `handle` must be a pointer previously returned by [`cloze_model_load`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cloze_model_free(handle: *mut ClozeModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of vocabulary types (reserved markers included), or -1 on null.
///
/// # Safety
/// `handle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cloze_vocab_size(handle: *const ClozeModel) -> i64 {
    if handle.is_null() {
        return -1;
    }
    (*handle).codec.vocab().len() as i64
}

/// Tokenize one whitespace-separated line into vocabulary ids (no boundary
/// markers added). Always writes the id count to `out_len`; copies into
/// `out_ids` only when `cap` suffices, otherwise returns `BufferTooSmall`.
/// Call with `cap == 0` to query the required size.
///
/// # Safety
/// `handle` and `line` must be valid; `out_ids` must point to at least
/// `cap` writable elements (it may be null when `cap` is 0); `out_len`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloze_tokenize(
    handle: *const ClozeModel,
    line: *const c_char,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| {
        if handle.is_null() || out_len.is_null() {
            set_error("null argument");
            return ClozeStatus::NullArgument as i32;
        }
        let line = match str_arg(line) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let (_, ids) = (*handle).codec.encode_line(line);
        *out_len = ids.len();
        if ids.len() > cap {
            set_error(&format!("need room for {} ids, caller provided {cap}", ids.len()));
            return ClozeStatus::BufferTooSmall as i32;
        }
        if !ids.is_empty() {
            if out_ids.is_null() {
                set_error("null id buffer with nonzero capacity request");
                return ClozeStatus::NullArgument as i32;
            }
            std::ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
        }
        ClozeStatus::Ok as i32
    })
}

/// Score one line under an objective. Writes the summed negative
/// log-likelihood and the number of scored predictions; perplexity is
/// `exp(nll_sum / tokens)`. The line is wrapped in boundary markers the
/// same way training examples are. Bilm counts each position twice (once
/// per direction).
///
/// # Safety
/// `handle` and `line` must be valid; `out_nll_sum` and `out_tokens` must
/// be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cloze_score_line(
    handle: *const ClozeModel,
    line: *const c_char,
    objective: ClozeObjective,
    out_nll_sum: *mut f64,
    out_tokens: *mut usize,
) -> i32 {
    guard(|| {
        if handle.is_null() || out_nll_sum.is_null() || out_tokens.is_null() {
            set_error("null argument");
            return ClozeStatus::NullArgument as i32;
        }
        let line = match str_arg(line) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let h = &*handle;
        let docs = vec![vec![line.to_string()]];
        let examples = match make_examples(&docs, ExampleMode::Sentence, &h.codec) {
            Ok(ex) => ex,
            Err(e) => return fail(&e),
        };
        let obj = match objective {
            ClozeObjective::Cloze => Objective::Cloze,
            ClozeObjective::Bilm => Objective::Bilm,
        };
        let report = match evaluate_perplexity(&h.model, &examples, obj, 512) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let (nll, tokens) = match objective {
            ClozeObjective::Cloze => (report.cloze.nll_sum, report.cloze.tokens),
            ClozeObjective::Bilm => (
                report.fwd.nll_sum + report.bwd.nll_sum,
                report.fwd.tokens + report.bwd.tokens,
            ),
        };
        *out_nll_sum = nll;
        *out_tokens = tokens;
        ClozeStatus::Ok as i32
    })
}

/// Copy the calling thread's most recent error message (NUL-terminated)
/// into `buf` and return the full message length in bytes excluding the
/// NUL. When `cap` is too small the message is truncated but still
/// NUL-terminated; call with `cap == 0` to query the length.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null when
/// `cap` is 0.
#[no_mangle]
pub unsafe extern "C" fn cloze_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if cap > 0 && !buf.is_null() {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cloze::model::ModelConfig;
    use std::collections::HashMap;
    use std::ffi::CString;
    use std::io::Write;

    fn checkpoint_dir() -> (tempfile::TempDir, Vec<String>) {
        let types = ["red", "green", "blue", "cyan"];
        let counts: HashMap<String, u64> =
            types.iter().map(|t| (t.to_string(), 7)).collect();
        let vocab = Vocab::from_counts(&counts).unwrap();
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.d_model = 16;
        cfg.n_blocks = 1;
        cfg.n_heads = 2;
        cfg.final_heads = 2;
        cfg.ffn_dim = 32;
        cfg.max_len = 16;
        let model = Model::<f32>::init(cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let mut w = std::fs::File::create(dir.path().join("vocab.txt")).unwrap();
        vocab.save(&mut w).unwrap();
        w.flush().unwrap();
        (dir, types.iter().map(|s| s.to_string()).collect())
    }

    fn load(dir: &std::path::Path) -> *mut ClozeModel {
        let c = CString::new(dir.to_str().unwrap()).unwrap();
        let mut h: *mut ClozeModel = std::ptr::null_mut();
        let code = unsafe { cloze_model_load(c.as_ptr(), &mut h) };
        assert_eq!(code, ClozeStatus::Ok as i32, "{}", last_error_string());
        assert!(!h.is_null());
        h
    }

    fn last_error_string() -> String {
        let mut buf: Vec<c_char> = vec![0; 256];
        let n = unsafe { cloze_last_error(buf.as_mut_ptr(), buf.len()) };
        let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).unwrap()
    }

    #[test]
    fn load_score_free_roundtrip() {
        let (dir, _) = checkpoint_dir();
        let h = load(dir.path());
        assert_eq!(unsafe { cloze_vocab_size(h) }, 8); // 4 reserved + 4 types

        let line = CString::new("red blue blue green").unwrap();
        let (mut nll, mut tokens) = (0.0f64, 0usize);
        let code = unsafe {
            cloze_score_line(h, line.as_ptr(), ClozeObjective::Cloze, &mut nll, &mut tokens)
        };
        assert_eq!(code, 0, "{}", last_error_string());
        // every position is predicted, boundary markers included
        assert_eq!(tokens, 6);
        assert!(nll.is_finite() && nll > 0.0);

        // must agree with scoring through the library directly
        let model = Model::<f32>::load(dir.path()).unwrap();
        let codec = load_codec(dir.path()).unwrap();
        let examples =
            make_examples(&[vec!["red blue blue green".into()]], ExampleMode::Sentence, &codec)
                .unwrap();
        let report = evaluate_perplexity(&model, &examples, Objective::Cloze, 512).unwrap();
        assert_eq!(nll, report.cloze.nll_sum);

        let code = unsafe {
            cloze_score_line(h, line.as_ptr(), ClozeObjective::Bilm, &mut nll, &mut tokens)
        };
        assert_eq!(code, 0);
        assert_eq!(tokens, 10, "bilm scores each position per direction");

        unsafe { cloze_model_free(h) };
    }

    #[test]
    fn tokenize_two_call_pattern() {
        let (dir, _) = checkpoint_dir();
        let h = load(dir.path());
        let line = CString::new("blue mystery red").unwrap();

        let mut needed = 0usize;
        let code =
            unsafe { cloze_tokenize(h, line.as_ptr(), std::ptr::null_mut(), 0, &mut needed) };
        assert_eq!(code, ClozeStatus::BufferTooSmall as i32);
        assert_eq!(needed, 3);

        let mut ids = vec![0u32; needed];
        let code =
            unsafe { cloze_tokenize(h, line.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut needed) };
        assert_eq!(code, 0);
        // unknown word maps to <unk> (reserved id 3)
        assert_eq!(ids[1], 3);
        assert_ne!(ids[0], ids[2]);

        unsafe { cloze_model_free(h) };
    }

    #[test]
    fn error_paths_set_codes_and_messages() {
        let missing = CString::new("/nonexistent/checkpoint").unwrap();
        let mut h: *mut ClozeModel = std::ptr::null_mut();
        let code = unsafe { cloze_model_load(missing.as_ptr(), &mut h) };
        assert_eq!(code, ClozeStatus::Io as i32);
        assert!(h.is_null());
        assert!(!last_error_string().is_empty());

        let code = unsafe { cloze_model_load(std::ptr::null(), &mut h) };
        assert_eq!(code, ClozeStatus::NullArgument as i32);

        // over-length input surfaces the core error, not a crash
        let (dir, _) = checkpoint_dir();
        let h = load(dir.path());
        let long = CString::new((0..200).map(|_| "red ").collect::<String>()).unwrap();
        let (mut nll, mut tokens) = (0.0f64, 0usize);
        let code = unsafe {
            cloze_score_line(h, long.as_ptr(), ClozeObjective::Cloze, &mut nll, &mut tokens)
        };
        assert_eq!(code, ClozeStatus::Config as i32, "{}", last_error_string());
        assert!(last_error_string().contains("max_len"));
        unsafe { cloze_model_free(h) };
    }

    #[test]
    fn vocab_model_mismatch_is_rejected() {
        let (dir, _) = checkpoint_dir();
        // rewrite vocab.txt with an extra type; the model expects 8 ids
        let mut w = std::fs::File::create(dir.path().join("vocab.txt")).unwrap();
        for t in ["<s>", "<sep>", "<pad>", "<unk>", "red", "green", "blue", "cyan", "extra"] {
            writeln!(w, "{t}\t1").unwrap();
        }
        w.flush().unwrap();
        let c = CString::new(dir.path().to_str().unwrap()).unwrap();
        let mut h: *mut ClozeModel = std::ptr::null_mut();
        let code = unsafe { cloze_model_load(c.as_ptr(), &mut h) };
        assert_eq!(code, ClozeStatus::Config as i32);
        assert!(last_error_string().contains("vocab.txt"));
    }
}
