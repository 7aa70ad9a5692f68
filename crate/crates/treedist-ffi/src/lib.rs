//! C interface to the treedist library.
//!
//! Handles are opaque pointers owned by Rust: everything returned through an
//! out parameter must be released with the matching `_free` function.
//! Functions report a [`TreedistStatus`]; on any non-zero status a
//! human-readable message is available from [`treedist_last_error`] until
//! the next call on the same thread. The C header is generated into
//! `include/treedist.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use treedist::json::{parse_swi_spec_str, parse_tree_str, spec_to_json, tree_to_json};
use treedist::metric::{Ground, StagewiseMetric};
use treedist::nested::{nested_dp, nested_lp, NestedError};
use treedist::swi::{detect_swi, nested_swi, reduce_swi, SwiError, DEFAULT_SWI_TOL};
use treedist::transport::{wasserstein_p, TransportError};
use treedist::tree::{ProbabilityTree, StageMarginal};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreedistStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Input failed parsing or a consistency check.
    InvalidInput = 2,
    /// A solver could not produce an optimum.
    SolverFailure = 3,
    /// The trees or the metric disagree on the number of stages.
    StageMismatch = 4,
    /// Stagewise independence was required but does not hold.
    NotSwi = 5,
    /// Unexpected internal failure.
    Internal = 6,
}

/// Opaque scenario tree handle.
pub struct TreedistTree {
    inner: ProbabilityTree,
}

/// Opaque metric handle.
pub struct TreedistMetric {
    inner: StagewiseMetric,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn guarded(f: impl FnOnce() -> TreedistStatus) -> TreedistStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            TreedistStatus::Internal
        }
    }
}

fn status_transport(e: &TransportError) -> TreedistStatus {
    match e {
        TransportError::IterationLimit { .. } | TransportError::Solver { .. } => {
            TreedistStatus::SolverFailure
        }
        _ => TreedistStatus::InvalidInput,
    }
}

fn status_nested(e: &NestedError) -> TreedistStatus {
    match e {
        NestedError::StageMismatch { .. }
        | NestedError::MetricStages { .. }
        | NestedError::PairStage { .. } => TreedistStatus::StageMismatch,
        NestedError::Solver { .. } => TreedistStatus::SolverFailure,
        NestedError::Transport(t) => status_transport(t),
        _ => TreedistStatus::InvalidInput,
    }
}

fn status_swi(e: &SwiError) -> TreedistStatus {
    match e {
        SwiError::NotSwi(_) | SwiError::NotSwiIn { .. } => TreedistStatus::NotSwi,
        SwiError::Nested(n) => status_nested(n),
        SwiError::Transport(t) => status_transport(t),
        _ => TreedistStatus::InvalidInput,
    }
}

fn fail(status: TreedistStatus, msg: impl ToString) -> TreedistStatus {
    set_error(msg);
    status
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn treedist_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. The pointer is invalidated by the next treedist call on
/// the same thread; do not free.
#[no_mangle]
pub extern "C" fn treedist_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |s| s.as_ptr())
    })
}

/// # Safety
/// `s` must be a string returned by this library's allocating functions
/// (such as [`treedist_tree_to_json`]) and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn treedist_string_free(s: *mut c_char) {
    if s.is_null() {
        return;
    }
    // SAFETY: caller guarantees `s` came from CString::into_raw in this
    // library.
    let _ = CString::from_raw(s);
}

/// Parses a tree from its JSON document. On success writes a handle to
/// `out`; free it with [`treedist_tree_free`]. Structure is checked here,
/// probability mass by [`treedist_tree_validate`].
///
/// # Safety
/// `json` must point to a NUL-terminated string; `out` must be a valid
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_parse(
    json: *const c_char,
    out: *mut *mut TreedistTree,
) -> TreedistStatus {
    clear_error();
    if json.is_null() || out.is_null() {
        return fail(TreedistStatus::NullArgument, "json and out must not be null");
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    let text = match CStr::from_ptr(json).to_str() {
        Ok(t) => t,
        Err(_) => return fail(TreedistStatus::InvalidInput, "json is not valid UTF-8"),
    };
    guarded(|| match parse_tree_str(text) {
        Ok(tree) => {
            // SAFETY: out is valid for writes per the contract above.
            unsafe { *out = Box::into_raw(Box::new(TreedistTree { inner: tree })) };
            TreedistStatus::Ok
        }
        Err(e) => fail(TreedistStatus::InvalidInput, e),
    })
}

/// # Safety
/// `tree` must be a handle from [`treedist_tree_parse`] or
/// [`treedist_product`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_free(tree: *mut TreedistTree) {
    if tree.is_null() {
        return;
    }
    // SAFETY: caller guarantees ownership of a live handle.
    drop(Box::from_raw(tree));
}

/// Number of stages, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_stages(tree: *const TreedistTree) -> usize {
    // SAFETY: caller guarantees the handle is live when non-null.
    tree.as_ref().map_or(0, |t| t.inner.stages())
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_node_count(tree: *const TreedistTree) -> usize {
    // SAFETY: as in treedist_tree_stages.
    tree.as_ref().map_or(0, |t| t.inner.node_count())
}

/// Number of leaves, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_leaf_count(tree: *const TreedistTree) -> usize {
    // SAFETY: as in treedist_tree_stages.
    tree.as_ref().map_or(0, |t| t.inner.leaves().len())
}

/// Checks probability mass consistency within `tol`.
///
/// # Safety
/// `tree` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_validate(
    tree: *const TreedistTree,
    tol: f64,
) -> TreedistStatus {
    clear_error();
    // SAFETY: caller guarantees the handle is live when non-null.
    let Some(tree) = tree.as_ref() else {
        return fail(TreedistStatus::NullArgument, "tree must not be null");
    };
    let report = tree.inner.validate(tol);
    if report.is_ok() {
        TreedistStatus::Ok
    } else {
        fail(TreedistStatus::InvalidInput, report)
    }
}

/// Serializes a tree to its JSON document. Free the returned string with
/// [`treedist_string_free`]; null for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_tree_to_json(tree: *const TreedistTree) -> *mut c_char {
    clear_error();
    // SAFETY: caller guarantees the handle is live when non-null.
    let Some(tree) = tree.as_ref() else {
        set_error("tree must not be null");
        return ptr::null_mut();
    };
    let text = tree_to_json(&tree.inner).render();
    CString::new(text).map_or(ptr::null_mut(), CString::into_raw)
}

/// Creates a metric: order `p`, one positive weight per stage, ground 0 for
/// Euclidean or 1 for absolute difference. Free with
/// [`treedist_metric_free`].
///
/// # Safety
/// `weights` must point to `stages` readable doubles; `out` must be a valid
/// writable pointer.
#[no_mangle]
pub unsafe extern "C" fn treedist_metric_create(
    p: f64,
    weights: *const f64,
    stages: usize,
    ground: c_int,
    out: *mut *mut TreedistMetric,
) -> TreedistStatus {
    clear_error();
    if weights.is_null() || out.is_null() {
        return fail(TreedistStatus::NullArgument, "weights and out must not be null");
    }
    let ground = match ground {
        0 => Ground::Euclidean,
        1 => Ground::Abs,
        other => {
            return fail(TreedistStatus::InvalidInput, format!("unknown ground code {other}"));
        }
    };
    // SAFETY: caller guarantees `stages` readable doubles.
    let weights = std::slice::from_raw_parts(weights, stages).to_vec();
    match StagewiseMetric::new(p, weights, ground) {
        Ok(metric) => {
            // SAFETY: out is valid for writes per the contract above.
            *out = Box::into_raw(Box::new(TreedistMetric { inner: metric }));
            TreedistStatus::Ok
        }
        Err(e) => fail(TreedistStatus::InvalidInput, e),
    }
}

/// # Safety
/// `metric` must be a handle from [`treedist_metric_create`], not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn treedist_metric_free(metric: *mut TreedistMetric) {
    if metric.is_null() {
        return;
    }
    // SAFETY: caller guarantees ownership of a live handle.
    drop(Box::from_raw(metric));
}

/// Nested distance between two trees. `method`: 0 picks the stagewise fast
/// path when both trees qualify and the backward recursion otherwise, 1
/// forces the monolithic linear program, 2 the recursion, 3 the fast path.
/// Writes the p-power value and its p-th root.
///
/// # Safety
/// `a`, `b`, `metric` must be live handles from this library; `value_p` and
/// `value_root` must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn treedist_nested(
    a: *const TreedistTree,
    b: *const TreedistTree,
    metric: *const TreedistMetric,
    method: c_int,
    value_p: *mut f64,
    value_root: *mut f64,
) -> TreedistStatus {
    clear_error();
    // SAFETY: caller guarantees live handles when non-null.
    let (Some(a), Some(b), Some(metric)) = (a.as_ref(), b.as_ref(), metric.as_ref()) else {
        return fail(TreedistStatus::NullArgument, "a, b and metric must not be null");
    };
    if value_p.is_null() || value_root.is_null() {
        return fail(TreedistStatus::NullArgument, "value_p and value_root must not be null");
    }
    guarded(|| {
        let (ta, tb, m) = (&a.inner, &b.inner, &metric.inner);
        let result = match method {
            0 => {
                if detect_swi(ta, DEFAULT_SWI_TOL).is_ok() && detect_swi(tb, DEFAULT_SWI_TOL).is_ok()
                {
                    nested_swi(ta, tb, m).map_err(|e| (status_swi(&e), e.to_string()))
                } else {
                    nested_dp(ta, tb, m).map_err(|e| (status_nested(&e), e.to_string()))
                }
            }
            1 => nested_lp(ta, tb, m).map_err(|e| (status_nested(&e), e.to_string())),
            2 => nested_dp(ta, tb, m).map_err(|e| (status_nested(&e), e.to_string())),
            3 => nested_swi(ta, tb, m).map_err(|e| (status_swi(&e), e.to_string())),
            other => Err((
                TreedistStatus::InvalidInput,
                format!("unknown method code {other}"),
            )),
        };
        match result {
            Ok(r) => {
                // SAFETY: pointers checked non-null above.
                unsafe {
                    *value_p = r.value_p;
                    *value_root = r.value_root;
                }
                TreedistStatus::Ok
            }
            Err((status, msg)) => fail(status, msg),
        }
    })
}

/// Wasserstein distance (p-power) between two discrete distributions given
/// as flat row-major point arrays. `ground` is 0 for Euclidean, 1 for
/// absolute difference.
///
/// # Safety
/// `p_points` must hold `p_len * dimension` doubles and `p_probs` `p_len`
/// doubles; likewise for `q_*`; `value_p` must be a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn treedist_wasserstein(
    p_points: *const f64,
    p_probs: *const f64,
    p_len: usize,
    q_points: *const f64,
    q_probs: *const f64,
    q_len: usize,
    dimension: usize,
    order: f64,
    ground: c_int,
    value_p: *mut f64,
) -> TreedistStatus {
    clear_error();
    if p_points.is_null() || p_probs.is_null() || q_points.is_null() || q_probs.is_null()
        || value_p.is_null()
    {
        return fail(TreedistStatus::NullArgument, "all array arguments must not be null");
    }
    if dimension == 0 {
        return fail(TreedistStatus::InvalidInput, "dimension must be positive");
    }
    let ground = match ground {
        0 => Ground::Euclidean,
        1 => Ground::Abs,
        other => {
            return fail(TreedistStatus::InvalidInput, format!("unknown ground code {other}"));
        }
    };
    // SAFETY: caller guarantees the stated array lengths.
    let gather = |points: *const f64, probs: *const f64, len: usize| {
        let flat = unsafe { std::slice::from_raw_parts(points, len * dimension) };
        let probs = unsafe { std::slice::from_raw_parts(probs, len) };
        StageMarginal::new(
            flat.chunks(dimension).map(<[f64]>::to_vec).collect(),
            probs.to_vec(),
        )
    };
    guarded(|| {
        let p = match gather(p_points, p_probs, p_len) {
            Ok(m) => m,
            Err(e) => return fail(TreedistStatus::InvalidInput, e),
        };
        let q = match gather(q_points, q_probs, q_len) {
            Ok(m) => m,
            Err(e) => return fail(TreedistStatus::InvalidInput, e),
        };
        let metric = match StagewiseMetric::new(order, vec![1.0], ground) {
            Ok(m) => m,
            Err(e) => return fail(TreedistStatus::InvalidInput, e),
        };
        match wasserstein_p(&p, &q, &metric, 1) {
            Ok(v) => {
                // SAFETY: value_p checked non-null above.
                unsafe { *value_p = v };
                TreedistStatus::Ok
            }
            Err(e) => fail(status_transport(&e), e),
        }
    })
}

/// Attaches `b` below every leaf of `a`, multiplying probabilities. The new
/// handle must be freed with [`treedist_tree_free`].
///
/// # Safety
/// `a` and `b` must be live handles from this library; `out` must be a
/// valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn treedist_product(
    a: *const TreedistTree,
    b: *const TreedistTree,
    out: *mut *mut TreedistTree,
) -> TreedistStatus {
    clear_error();
    // SAFETY: caller guarantees live handles when non-null.
    let (Some(a), Some(b)) = (a.as_ref(), b.as_ref()) else {
        return fail(TreedistStatus::NullArgument, "a and b must not be null");
    };
    if out.is_null() {
        return fail(TreedistStatus::NullArgument, "out must not be null");
    }
    guarded(|| match treedist::tree::tree_product(&a.inner, &b.inner) {
        Ok(product) => {
            // SAFETY: out checked non-null above.
            unsafe { *out = Box::into_raw(Box::new(TreedistTree { inner: product })) };
            TreedistStatus::Ok
        }
        Err(e) => fail(TreedistStatus::InvalidInput, e),
    })
}

/// Tests stagewise independence with tolerance `tol` on conditional
/// probabilities. Returns `Ok` when independent, `NotSwi` with a violation
/// message otherwise.
///
/// # Safety
/// `tree` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn treedist_detect_swi(
    tree: *const TreedistTree,
    tol: f64,
) -> TreedistStatus {
    clear_error();
    // SAFETY: caller guarantees the handle is live when non-null.
    let Some(tree) = tree.as_ref() else {
        return fail(TreedistStatus::NullArgument, "tree must not be null");
    };
    guarded(|| match detect_swi(&tree.inner, tol) {
        Ok(_) => TreedistStatus::Ok,
        Err(e) => fail(status_swi(&e), e),
    })
}

/// Reduces the per-stage supports of a stagewise independent specification
/// (JSON document in the spec file format) to `targets`. Writes the reduced
/// specification as JSON to `out_json` (free with
/// [`treedist_string_free`]) and the weighted distance to `total_p`.
///
/// # Safety
/// `spec_json` must point to a NUL-terminated string; `targets` must hold
/// `n_targets` readable values; `metric` must be a live handle; `out_json`
/// and `total_p` must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn treedist_reduce(
    spec_json: *const c_char,
    targets: *const usize,
    n_targets: usize,
    metric: *const TreedistMetric,
    seed: u64,
    out_json: *mut *mut c_char,
    total_p: *mut f64,
) -> TreedistStatus {
    clear_error();
    if spec_json.is_null() || targets.is_null() || out_json.is_null() || total_p.is_null() {
        return fail(TreedistStatus::NullArgument, "pointer arguments must not be null");
    }
    // SAFETY: caller guarantees live handles when non-null.
    let Some(metric) = metric.as_ref() else {
        return fail(TreedistStatus::NullArgument, "metric must not be null");
    };
    // SAFETY: caller guarantees a NUL-terminated string.
    let text = match CStr::from_ptr(spec_json).to_str() {
        Ok(t) => t,
        Err(_) => return fail(TreedistStatus::InvalidInput, "spec_json is not valid UTF-8"),
    };
    // SAFETY: caller guarantees `n_targets` readable values.
    let targets = std::slice::from_raw_parts(targets, n_targets).to_vec();
    guarded(|| {
        let spec = match parse_swi_spec_str(text) {
            Ok(s) => s,
            Err(e) => return fail(TreedistStatus::InvalidInput, e),
        };
        match reduce_swi(&spec, &targets, &metric.inner, seed) {
            Ok(result) => {
                let rendered = spec_to_json(&result.reduced).render();
                let Ok(cstring) = CString::new(rendered) else {
                    return fail(TreedistStatus::Internal, "rendered JSON contained NUL");
                };
                // SAFETY: out pointers checked non-null above.
                unsafe {
                    *out_json = cstring.into_raw();
                    *total_p = result.total_p;
                }
                TreedistStatus::Ok
            }
            Err(e) => fail(status_swi(&e), e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TREE: &str = r#"{"stages": 2, "dimension": 1, "nodes": [
        {"id": 0, "parent": null, "stage": 1, "outcome": [0.0], "prob": 1.0},
        {"id": 1, "parent": 0, "stage": 2, "outcome": [-1.0], "prob": 0.5},
        {"id": 2, "parent": 0, "stage": 2, "outcome": [1.0], "prob": 0.5}
    ]}"#;

    const POINT: &str = r#"{"stages": 2, "dimension": 1, "nodes": [
        {"id": 0, "parent": null, "stage": 1, "outcome": [0.0], "prob": 1.0},
        {"id": 1, "parent": 0, "stage": 2, "outcome": [0.0], "prob": 1.0}
    ]}"#;

    fn parse(text: &str) -> *mut TreedistTree {
        let json = CString::new(text).unwrap();
        let mut out = ptr::null_mut();
        let status = unsafe { treedist_tree_parse(json.as_ptr(), &mut out) };
        assert_eq!(status, TreedistStatus::Ok);
        assert!(!out.is_null());
        out
    }

    fn last_error_text() -> String {
        let ptr = treedist_last_error();
        assert!(!ptr.is_null());
        unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string()
    }

    #[test]
    fn parse_query_validate_free() {
        let tree = parse(TREE);
        unsafe {
            assert_eq!(treedist_tree_stages(tree), 2);
            assert_eq!(treedist_tree_node_count(tree), 3);
            assert_eq!(treedist_tree_leaf_count(tree), 2);
            assert_eq!(treedist_tree_validate(tree, 1e-9), TreedistStatus::Ok);
            let json = treedist_tree_to_json(tree);
            assert!(!json.is_null());
            let text = CStr::from_ptr(json).to_str().unwrap();
            assert!(text.contains("\"stages\": 2"));
            treedist_string_free(json);
            treedist_tree_free(tree);
        }
    }

    #[test]
    fn parse_rejects_null_and_garbage() {
        let mut out = ptr::null_mut();
        unsafe {
            assert_eq!(
                treedist_tree_parse(ptr::null(), &mut out),
                TreedistStatus::NullArgument
            );
            let garbage = CString::new("not json").unwrap();
            assert_eq!(
                treedist_tree_parse(garbage.as_ptr(), &mut out),
                TreedistStatus::InvalidInput
            );
            assert!(!treedist_last_error().is_null());
        }
    }

    #[test]
    fn nested_distance_through_the_c_surface() {
        let a = parse(TREE);
        let b = parse(POINT);
        let weights = [1.0, 1.0];
        let mut metric = ptr::null_mut();
        unsafe {
            assert_eq!(
                treedist_metric_create(2.0, weights.as_ptr(), 2, 0, &mut metric),
                TreedistStatus::Ok
            );
            let (mut vp, mut vr) = (f64::NAN, f64::NAN);
            for method in [0, 1, 2, 3] {
                let status = treedist_nested(a, b, metric, method, &mut vp, &mut vr);
                assert_eq!(status, TreedistStatus::Ok, "method {method}");
                assert!((vp - 1.0).abs() < 1e-9, "method {method}: {vp}");
                assert!((vr - 1.0).abs() < 1e-9);
            }
            assert_eq!(
                treedist_nested(a, b, metric, 9, &mut vp, &mut vr),
                TreedistStatus::InvalidInput
            );
            treedist_metric_free(metric);
            treedist_tree_free(a);
            treedist_tree_free(b);
        }
    }

    #[test]
    fn stage_mismatch_and_not_swi_codes() {
        let a = parse(TREE);
        let three = parse(
            r#"{"stages": 3, "dimension": 1, "nodes": [
                {"id": 0, "parent": null, "stage": 1, "outcome": [0.0], "prob": 1.0},
                {"id": 1, "parent": 0, "stage": 2, "outcome": [0.0], "prob": 1.0},
                {"id": 2, "parent": 1, "stage": 3, "outcome": [0.0], "prob": 1.0}
            ]}"#,
        );
        let persistent = parse(
            r#"{"stages": 3, "dimension": 1, "nodes": [
                {"id": 0, "parent": null, "stage": 1, "outcome": [0.0], "prob": 1.0},
                {"id": 1, "parent": 0, "stage": 2, "outcome": [-1.0], "prob": 0.5},
                {"id": 2, "parent": 0, "stage": 2, "outcome": [1.0], "prob": 0.5},
                {"id": 3, "parent": 1, "stage": 3, "outcome": [-1.0], "prob": 0.5},
                {"id": 4, "parent": 2, "stage": 3, "outcome": [1.0], "prob": 0.5}
            ]}"#,
        );
        let weights = [1.0, 1.0];
        let mut metric = ptr::null_mut();
        unsafe {
            treedist_metric_create(2.0, weights.as_ptr(), 2, 0, &mut metric);
            let (mut vp, mut vr) = (0.0, 0.0);
            assert_eq!(
                treedist_nested(a, three, metric, 2, &mut vp, &mut vr),
                TreedistStatus::StageMismatch
            );
            assert_eq!(treedist_detect_swi(persistent, 1e-9), TreedistStatus::NotSwi);
            assert!(last_error_text().contains("disagrees"));
            assert_eq!(treedist_detect_swi(a, 1e-9), TreedistStatus::Ok);
            treedist_metric_free(metric);
            treedist_tree_free(a);
            treedist_tree_free(three);
            treedist_tree_free(persistent);
        }
    }

    #[test]
    fn wasserstein_and_product_and_reduce() {
        unsafe {
            let p_points = [0.0];
            let p_probs = [1.0];
            let q_points = [3.0];
            let q_probs = [1.0];
            let mut value = f64::NAN;
            let status = treedist_wasserstein(
                p_points.as_ptr(),
                p_probs.as_ptr(),
                1,
                q_points.as_ptr(),
                q_probs.as_ptr(),
                1,
                1,
                1.0,
                1,
                &mut value,
            );
            assert_eq!(status, TreedistStatus::Ok);
            assert!((value - 3.0).abs() < 1e-12);

            let a = parse(TREE);
            let b = parse(POINT);
            let mut product = ptr::null_mut();
            assert_eq!(treedist_product(a, b, &mut product), TreedistStatus::Ok);
            assert_eq!(treedist_tree_stages(product), 3);
            assert_eq!(treedist_tree_node_count(product), 5);

            let spec = CString::new(
                r#"{"stages": [
                    [{"point": [0.0], "prob": 1.0}],
                    [{"point": [0.0], "prob": 0.25}, {"point": [1.0], "prob": 0.25},
                     {"point": [2.0], "prob": 0.25}, {"point": [3.0], "prob": 0.25}]
                ]}"#,
            )
            .unwrap();
            let weights = [1.0, 1.0];
            let mut metric = ptr::null_mut();
            treedist_metric_create(2.0, weights.as_ptr(), 2, 0, &mut metric);
            let targets = [1usize, 2];
            let mut out_json = ptr::null_mut();
            let mut total = f64::NAN;
            let status = treedist_reduce(
                spec.as_ptr(),
                targets.as_ptr(),
                2,
                metric,
                7,
                &mut out_json,
                &mut total,
            );
            assert_eq!(status, TreedistStatus::Ok);
            assert!((total - 0.25).abs() < 1e-12);
            let text = CStr::from_ptr(out_json).to_str().unwrap();
            assert!(text.contains("\"stages\""));
            treedist_string_free(out_json);
            treedist_metric_free(metric);
            treedist_tree_free(a);
            treedist_tree_free(b);
            treedist_tree_free(product);
        }
    }

    #[test]
    fn version_and_header_exist() {
        let version = unsafe { CStr::from_ptr(treedist_version()) };
        assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
        let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("include")
            .join("treedist.h");
        let text = std::fs::read_to_string(header).unwrap();
        assert!(text.contains("TREEDIST_H"));
        assert!(text.contains("treedist_nested"));
        assert!(text.contains("typedef struct TreedistTree TreedistTree;"));
    }
}
