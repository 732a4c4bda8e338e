//! C interface to the `dynalloc` solver.
//!
//! Every function returns a [`DynallocStatus`]. On failure a message is kept
//! per thread and can be read with [`dynalloc_last_error`]. Handles are
//! opaque; free them with the matching `_free` function. Strings returned
//! through `char **` out-parameters are owned by the caller and must be
//! released with [`dynalloc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dynalloc::model::ProblemSpec;
use dynalloc::policy::AllocationPolicy;
use dynalloc::simulate::simulate_policy;
use dynalloc::solve::{solve, SolveMode, SolveOptions, SolveReport};
use dynalloc::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynallocStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Malformed input or an instance that fails validation.
    InvalidInput = 3,
    /// The solver failed on a valid instance.
    SolverError = 4,
    /// A period or entity index is out of range, or a buffer is too short.
    OutOfRange = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Solver selection for [`dynalloc_solve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynallocMode {
    Auto = 0,
    Recursion = 1,
    ScenarioExact = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DynallocSolveOptions {
    pub mode: DynallocMode,
    /// Nonzero to use the literal coefficient formulas (uniform multiplier shift).
    pub literal: u8,
    /// Nonzero to forbid negative allocations.
    pub nonneg: u8,
}

/// A validated problem instance.
pub struct DynallocProblem {
    spec: ProblemSpec,
}

/// A solved problem: the report plus the instance it belongs to.
pub struct DynallocSolution {
    problem: ProblemSpec,
    report: SolveReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls were removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DynallocStatus, message: impl Into<String>) -> DynallocStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> DynallocStatus {
    let status = if e.is_validation() {
        DynallocStatus::InvalidInput
    } else {
        DynallocStatus::SolverError
    };
    fail(status, e.to_string())
}

/// Runs `body`, converting panics into [`DynallocStatus::Panic`].
fn guarded(body: impl FnOnce() -> DynallocStatus) -> DynallocStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DynallocStatus::Panic, format!("panic: {message}"))
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, DynallocStatus> {
    if s.is_null() {
        return Err(fail(DynallocStatus::NullPointer, "string argument is null"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(DynallocStatus::InvalidUtf8, format!("string argument is not UTF-8: {e}")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> DynallocStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            DynallocStatus::Ok
        }
        Err(_) => fail(DynallocStatus::SolverError, "output contains a nul byte"),
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(
            if $p.is_null() {
                return fail(DynallocStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
            }
        )+
    };
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dynalloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn dynalloc_status_name(status: DynallocStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DynallocStatus::Ok => c"Ok",
        DynallocStatus::NullPointer => c"NullPointer",
        DynallocStatus::InvalidUtf8 => c"InvalidUtf8",
        DynallocStatus::InvalidInput => c"InvalidInput",
        DynallocStatus::SolverError => c"SolverError",
        DynallocStatus::OutOfRange => c"OutOfRange",
        DynallocStatus::Panic => c"Panic",
    };
    s.as_ptr()
}

/// Default options: automatic solver choice, exact formulas, shorting allowed.
#[no_mangle]
pub extern "C" fn dynalloc_default_options() -> DynallocSolveOptions {
    DynallocSolveOptions {
        mode: DynallocMode::Auto,
        literal: 0,
        nonneg: 0,
    }
}

/// Parses and validates a problem from JSON text.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_problem_from_json(
    json: *const c_char,
    out: *mut *mut DynallocProblem,
) -> DynallocStatus {
    guarded(|| {
        non_null!(out);
        let text = match read_str(json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match ProblemSpec::from_json_str(text) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(DynallocProblem { spec }));
                DynallocStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `problem` must come from [`dynalloc_problem_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_problem_free(problem: *mut DynallocProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of periods and of risky entities.
///
/// # Safety
/// `problem` must be a live handle; `horizon` and `n` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_problem_shape(
    problem: *const DynallocProblem,
    horizon: *mut usize,
    n: *mut usize,
) -> DynallocStatus {
    guarded(|| {
        non_null!(problem, horizon, n);
        *horizon = (*problem).spec.horizon;
        *n = (*problem).spec.n();
        DynallocStatus::Ok
    })
}

/// Solves `problem`. `options` may be null for the defaults.
///
/// # Safety
/// `problem` must be a live handle, `options` null or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solve(
    problem: *const DynallocProblem,
    options: *const DynallocSolveOptions,
    out: *mut *mut DynallocSolution,
) -> DynallocStatus {
    guarded(|| {
        non_null!(problem, out);
        let o = if options.is_null() { dynalloc_default_options() } else { *options };
        let opts = SolveOptions {
            mode: match o.mode {
                DynallocMode::Auto => SolveMode::Auto,
                DynallocMode::Recursion => SolveMode::Recursion,
                DynallocMode::ScenarioExact => SolveMode::ScenarioExact,
            },
            literal: o.literal != 0,
            nonneg: o.nonneg != 0,
        };
        let spec = &(*problem).spec;
        match solve(spec, &opts) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(DynallocSolution {
                    problem: spec.clone(),
                    report,
                }));
                DynallocStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `solution` must come from [`dynalloc_solve`] or be null.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solution_free(solution: *mut DynallocSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// The problem's objective under the optimal policy (NaN when the moments
/// could not be evaluated exactly).
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solution_objective(
    solution: *const DynallocSolution,
    out: *mut f64,
) -> DynallocStatus {
    guarded(|| {
        non_null!(solution, out);
        *out = (*solution).report.objective;
        DynallocStatus::Ok
    })
}

/// Value from period `t` (0-based) onward at resource `x`, in the solved
/// separable objective.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solution_value(
    solution: *const DynallocSolution,
    t: usize,
    x: f64,
    out: *mut f64,
) -> DynallocStatus {
    guarded(|| {
        non_null!(solution, out);
        let values = (*solution).report.solution.values();
        match values.get(t) {
            Some(v) => {
                *out = v.eval(x);
                DynallocStatus::Ok
            }
            None => fail(
                DynallocStatus::OutOfRange,
                format!("period {t} is outside 0..{}", values.len()),
            ),
        }
    })
}

/// Optimal allocation in period `t` (0-based) at resource `x`, written to
/// `out[0..n]`. `len` is the capacity of `out`.
///
/// # Safety
/// `solution` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solution_allocate(
    solution: *const DynallocSolution,
    t: usize,
    x: f64,
    out: *mut f64,
    len: usize,
) -> DynallocStatus {
    guarded(|| {
        non_null!(solution, out);
        let policy = &(*solution).report.solution;
        if t >= policy.horizon() {
            return fail(
                DynallocStatus::OutOfRange,
                format!("period {t} is outside 0..{}", policy.horizon()),
            );
        }
        if len < policy.n() {
            return fail(
                DynallocStatus::OutOfRange,
                format!("buffer holds {len} values, {} are needed", policy.n()),
            );
        }
        match policy.allocate(t, x) {
            Ok(u) => {
                std::slice::from_raw_parts_mut(out, u.len()).copy_from_slice(&u);
                DynallocStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// The full solve report as JSON.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_solution_report_json(
    solution: *const DynallocSolution,
    out: *mut *mut c_char,
) -> DynallocStatus {
    guarded(|| {
        non_null!(solution, out);
        write_string(out, (*solution).report.to_json())
    })
}

/// Monte Carlo summary of the optimal policy as JSON.
///
/// # Safety
/// `solution` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_simulate(
    solution: *const DynallocSolution,
    paths: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> DynallocStatus {
    guarded(|| {
        non_null!(solution, out);
        let s = &*solution;
        match simulate_policy(&s.problem, &s.report.solution, paths, seed) {
            Ok(summary) => write_string(out, summary.to_json()),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dynalloc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
