//! C ABI over `hiertask-core`.
//!
//! Conventions:
//! - Every fallible function returns an [`HtStatus`]; on failure the reason
//!   is available from [`ht_last_error_message`] on the same thread.
//! - Strings passed in are NUL-terminated UTF-8 and borrowed for the call.
//! - Strings handed out through `out_json` are owned by the caller and must
//!   be released with [`ht_string_free`].
//! - Handles are opaque and released with their matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hiertask_core::config::Config;
use hiertask_core::planner::TaskSpec;
use hiertask_core::protocol::{Body, TaskState};
use hiertask_core::scenario::Scenario;
use hiertask_core::similarity::{cosine, report};
use hiertask_core::skills::{skills_for_class, RobotClass, SkillRegistry};
use hiertask_core::tiers::{run_task, Deployment, Transport};
use hiertask_core::vectorizer::embed;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    /// The call completed but the task did not; the JSON result is still set.
    TaskFailed = 5,
    Internal = 6,
}

/// Skill registry handle.
pub struct HtRegistry(SkillRegistry);

/// A configured deployment that can run tasks end to end in-process.
pub struct HtEngine {
    config: Config,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: HtStatus, msg: impl Into<String>) -> HtStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> HtStatus) -> HtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(HtStatus::Internal, "panic inside hiertask"))
}

unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, HtStatus> {
    if p.is_null() {
        return Err(fail(HtStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(HtStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> HtStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            HtStatus::Ok
        }
        Err(_) => fail(HtStatus::Internal, "result contains a NUL byte"),
    }
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the last failure on this thread, or null. Owned by the
/// library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ht_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an `out_json` parameter.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ht_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ht_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Cosine similarity of the embeddings of two plain descriptions.
///
/// # Safety
/// `a` and `b` must be valid C strings; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_text_similarity(a: *const c_char, b: *const c_char, out_score: *mut f64) -> HtStatus {
    guard(|| {
        let a = try_ffi!(arg(a, "a"));
        let b = try_ffi!(arg(b, "b"));
        if out_score.is_null() {
            return fail(HtStatus::NullPointer, "`out_score` is null");
        }
        match cosine(&embed(a, &[], ""), &embed(b, &[], "")) {
            Ok(s) => {
                *out_score = s;
                HtStatus::Ok
            }
            Err(e) => fail(HtStatus::Internal, e.to_string()),
        }
    })
}

/// The bundled skill registry.
#[no_mangle]
pub extern "C" fn ht_registry_bundled() -> *mut HtRegistry {
    Box::into_raw(Box::new(HtRegistry(SkillRegistry::bundled())))
}

/// Parses a registry from its JSON form.
///
/// # Safety
/// `json` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_registry_from_json(json: *const c_char, out: *mut *mut HtRegistry) -> HtStatus {
    guard(|| {
        let json = try_ffi!(arg(json, "json"));
        if out.is_null() {
            return fail(HtStatus::NullPointer, "`out` is null");
        }
        match SkillRegistry::from_json(json) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(HtRegistry(r)));
                HtStatus::Ok
            }
            Err(e) => fail(HtStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Number of skills, or 0 for a null handle.
///
/// # Safety
/// `registry` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ht_registry_len(registry: *const HtRegistry) -> usize {
    registry.as_ref().map_or(0, |r| r.0.len())
}

/// # Safety
/// `registry` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ht_registry_free(registry: *mut HtRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Aligns newline-separated subtask texts against the skills of
/// `robot_class` ("quadruped" or "drone") and writes the alignment report
/// as JSON: `{"skills": [...], "report": {...}}`.
///
/// # Safety
/// Pointers must be valid; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_registry_align(
    registry: *const HtRegistry,
    robot_class: *const c_char,
    subtasks: *const c_char,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> HtStatus {
    guard(|| {
        let Some(reg) = registry.as_ref() else { return fail(HtStatus::NullPointer, "`registry` is null") };
        let class: RobotClass = match try_ffi!(arg(robot_class, "robot_class")).parse() {
            Ok(c) => c,
            Err(e) => return fail(HtStatus::InvalidArgument, e.to_string()),
        };
        let texts = try_ffi!(arg(subtasks, "subtasks"));
        if out_json.is_null() {
            return fail(HtStatus::NullPointer, "`out_json` is null");
        }
        if !(0.0..=1.0).contains(&threshold) {
            return fail(HtStatus::InvalidArgument, format!("threshold {threshold} outside [0, 1]"));
        }
        let skills = skills_for_class(&reg.0, class);
        let ids: Vec<&str> = skills.iter().map(|s| s.id.as_str()).collect();
        let vectors: Vec<_> = skills.iter().map(|s| s.vector()).collect();
        let rows: Vec<_> = texts.lines().filter(|l| !l.trim().is_empty()).map(|t| embed(t, &[], "")).collect();
        match report(&rows, &ids, &vectors, threshold) {
            Ok(r) => put_string(out_json, serde_json::json!({ "skills": ids, "report": r }).to_string()),
            Err(e) => fail(HtStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Creates an engine from a TOML config file, or from defaults when
/// `config_path` is null.
///
/// # Safety
/// `config_path` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_engine_new(config_path: *const c_char, out: *mut *mut HtEngine) -> HtStatus {
    guard(|| {
        if out.is_null() {
            return fail(HtStatus::NullPointer, "`out` is null");
        }
        let config = if config_path.is_null() {
            Config::default()
        } else {
            match Config::load(Path::new(try_ffi!(arg(config_path, "config_path")))) {
                Ok(c) => c,
                Err(e) => return fail(HtStatus::InvalidArgument, e.to_string()),
            }
        };
        *out = Box::into_raw(Box::new(HtEngine { config }));
        HtStatus::Ok
    })
}

/// # Safety
/// `engine` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ht_engine_free(engine: *mut HtEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

fn run(engine: &HtEngine, world: &str, task: &TaskSpec) -> Result<(HtStatus, String), HtStatus> {
    let deployment: Deployment =
        engine.config.deployment(world).map_err(|e| fail(HtStatus::InvalidArgument, e.to_string()))?;
    let run = run_task(&deployment, task, Transport::InProcess).map_err(|e| fail(HtStatus::Internal, e.to_string()))?;
    let status = match &run.reply.body {
        Body::Status(s) if s.state == TaskState::Done => HtStatus::Ok,
        Body::Status(s) => {
            set_error(s.detail.clone().unwrap_or_else(|| "task failed".into()));
            HtStatus::TaskFailed
        }
        Body::Error(e) => {
            set_error(format!("{}: {}", e.code, e.message));
            HtStatus::TaskFailed
        }
        _ => HtStatus::Internal,
    };
    let json = serde_json::json!({
        "reply": run.reply.body,
        "trace": run.outcome.as_ref().map(|o| o.trace.redacted()),
        "world": run.world.state(),
    });
    Ok((status, json.to_string()))
}

/// Runs a bundled scenario with all tiers in-process. Writes
/// `{"reply", "trace", "world"}` JSON even when the task fails.
///
/// # Safety
/// Pointers must be valid; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_engine_run_scenario(
    engine: *const HtEngine,
    name: *const c_char,
    out_json: *mut *mut c_char,
) -> HtStatus {
    guard(|| {
        let Some(engine) = engine.as_ref() else { return fail(HtStatus::NullPointer, "`engine` is null") };
        let name = try_ffi!(arg(name, "name"));
        if out_json.is_null() {
            return fail(HtStatus::NullPointer, "`out_json` is null");
        }
        let Some(s) = Scenario::bundled(name) else {
            return fail(HtStatus::NotFound, format!("unknown scenario `{name}`"));
        };
        let (status, json) = try_ffi!(run(engine, &s.world, &s.task));
        match put_string(out_json, json) {
            HtStatus::Ok => status,
            other => other,
        }
    })
}

/// Runs a free-text task in the bundled field world.
///
/// # Safety
/// Pointers must be valid; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ht_engine_run_task(
    engine: *const HtEngine,
    task_id: *const c_char,
    description: *const c_char,
    out_json: *mut *mut c_char,
) -> HtStatus {
    guard(|| {
        let Some(engine) = engine.as_ref() else { return fail(HtStatus::NullPointer, "`engine` is null") };
        let task = TaskSpec::new(try_ffi!(arg(task_id, "task_id")), try_ffi!(arg(description, "description")));
        if out_json.is_null() {
            return fail(HtStatus::NullPointer, "`out_json` is null");
        }
        if let Err(e) = task.validate() {
            return fail(HtStatus::InvalidArgument, e);
        }
        let (status, json) = try_ffi!(run(engine, "field", &task));
        match put_string(out_json, json) {
            HtStatus::Ok => status,
            other => other,
        }
    })
}
