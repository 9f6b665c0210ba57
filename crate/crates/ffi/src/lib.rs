//! C ABI for the `coss` library.
//!
//! Units are collected in a [`CossUnits`] builder, allocated into an opaque
//! [`CossPlan`], and queried by index or id. Every fallible call returns a
//! [`CossStatus`]; on failure a message is available from
//! [`coss_last_error_message`] on the same thread. Handles are freed with
//! their matching `_free` function and are not thread-safe to share for
//! mutation.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use coss::allocation::{self, Arm, ExperimentUnit, Parity, Strategy};
use coss::estimation;
use coss::inference::{self, InferenceResult};
use coss::theory::{self, BiasRateSpec, RateFamily};
use coss::Error;

/// Result code of every fallible call. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CossStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    EmptyInput = 3,
    DuplicateId = 4,
    NonFinite = 5,
    MissingValue = 6,
    EmptyArm = 7,
    Degenerate = 8,
    TooFew = 9,
    ZeroVariance = 10,
    NotPaired = 11,
    InvalidArgument = 12,
    OutOfRange = 13,
    NotFound = 14,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CossStrategy {
    Coss = 0,
    Rct = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CossParity {
    TreatmentFirst = 0,
    ControlFirst = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CossArm {
    Treatment = 0,
    Control = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CossRateFamily {
    Uniform = 0,
    Normal = 1,
    ShiftedPoisson = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CossEstimate {
    pub delta: f64,
    pub se: f64,
    pub n_treat: usize,
    pub n_control: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CossTest {
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom.
    pub df: f64,
}

/// Units waiting to be allocated.
pub struct CossUnits {
    units: Vec<ExperimentUnit>,
}

/// An allocation plan. Ids are kept as C strings owned by the plan.
pub struct CossPlan {
    plan: allocation::AllocationPlan,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CossStatus {
    match e {
        Error::EmptyInput => CossStatus::EmptyInput,
        Error::DuplicateId(_) => CossStatus::DuplicateId,
        Error::NonFiniteCovariate(_) | Error::NonFiniteOutcome(_) => CossStatus::NonFinite,
        Error::MissingOutcome(_) | Error::MissingCovariate(_) => CossStatus::MissingValue,
        Error::EmptyArm => CossStatus::EmptyArm,
        Error::DegenerateCovariate | Error::DegenerateDesign => CossStatus::Degenerate,
        Error::TooFewUnits { .. }
        | Error::TooFewSamples { .. }
        | Error::TooFewPairs { .. }
        | Error::NTooSmall { .. }
        | Error::SampleTooLarge { .. } => CossStatus::TooFew,
        Error::ZeroVariance => CossStatus::ZeroVariance,
        Error::NotPaired => CossStatus::NotPaired,
        Error::InvalidParameter { .. } => CossStatus::InvalidArgument,
    }
}

fn fail(status: CossStatus, msg: &str) -> CossStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording errors and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), CossStatus>) -> CossStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CossStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CossStatus::Panic, "internal panic"),
    }
}

fn core_err(e: Error) -> CossStatus {
    fail(status_of(&e), &e.to_string())
}

fn null(name: &str) -> CossStatus {
    fail(CossStatus::NullPointer, &format!("`{name}` is null"))
}

/// Borrows `len` doubles; a null pointer is allowed only when `len` is 0.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], CossStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, CossStatus> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CossStatus::InvalidUtf8, &format!("`{name}` is not valid UTF-8")))
}

fn arm_out(a: Arm) -> CossArm {
    match a {
        Arm::Treatment => CossArm::Treatment,
        Arm::Control => CossArm::Control,
    }
}

fn test_out(r: InferenceResult) -> CossTest {
    CossTest {
        statistic: r.statistic,
        p_value: r.p_value,
        df: r.df.unwrap_or(f64::NAN),
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn coss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn coss_units_new() -> *mut CossUnits {
    Box::into_raw(Box::new(CossUnits { units: Vec::new() }))
}

/// # Safety
/// `units` must come from [`coss_units_new`] and `id` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn coss_units_push(units: *mut CossUnits, id: *const c_char, covariate: f64) -> CossStatus {
    guard(|| {
        let units = units.as_mut().ok_or_else(|| null("units"))?;
        let id = string(id, "id")?;
        units.units.push(ExperimentUnit::new(id, covariate));
        Ok(())
    })
}

/// # Safety
/// `units` must be null or come from [`coss_units_new`].
#[no_mangle]
pub unsafe extern "C" fn coss_units_len(units: *const CossUnits) -> usize {
    units.as_ref().map_or(0, |u| u.units.len())
}

/// # Safety
/// `units` must be null or come from [`coss_units_new`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn coss_units_free(units: *mut CossUnits) {
    if !units.is_null() {
        drop(Box::from_raw(units));
    }
}

/// Allocates the collected units. On success `*out` receives a plan to be
/// released with [`coss_plan_free`].
///
/// # Safety
/// `units` must come from [`coss_units_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coss_allocate(
    units: *const CossUnits,
    strategy: CossStrategy,
    seed: u64,
    parity: CossParity,
    out: *mut *mut CossPlan,
) -> CossStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let units = units.as_ref().ok_or_else(|| null("units"))?;
        let strategy = match strategy {
            CossStrategy::Coss => Strategy::Coss,
            CossStrategy::Rct => Strategy::Rct,
        };
        let parity = match parity {
            CossParity::TreatmentFirst => Parity::TreatmentFirst,
            CossParity::ControlFirst => Parity::ControlFirst,
        };
        let plan = allocation::allocate(&units.units, strategy, seed, parity).map_err(core_err)?;
        let ids = plan
            .assignments()
            .iter()
            .map(|a| CString::new(a.id.as_str()).map_err(|_| fail(CossStatus::InvalidArgument, "id contains NUL")))
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(CossPlan { plan, ids }));
        Ok(())
    })
}

/// Number of assignments; they are listed in rank order for COSS plans and
/// id order for RCT plans.
///
/// # Safety
/// `plan` must be null or come from [`coss_allocate`].
#[no_mangle]
pub unsafe extern "C" fn coss_plan_len(plan: *const CossPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.ids.len())
}

/// Units in `arm`.
///
/// # Safety
/// `plan` must be null or come from [`coss_allocate`].
#[no_mangle]
pub unsafe extern "C" fn coss_plan_count(plan: *const CossPlan, arm: CossArm) -> usize {
    let arm = match arm {
        CossArm::Treatment => Arm::Treatment,
        CossArm::Control => Arm::Control,
    };
    plan.as_ref().map_or(0, |p| p.plan.count(arm))
}

/// Id of assignment `index`, owned by the plan, or null when out of range.
///
/// # Safety
/// `plan` must be null or come from [`coss_allocate`].
#[no_mangle]
pub unsafe extern "C" fn coss_plan_id_at(plan: *const CossPlan, index: usize) -> *const c_char {
    plan.as_ref()
        .and_then(|p| p.ids.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Arm and pair index of assignment `index`. `*pair_index` is -1 for
/// unpaired units; `pair_index` may be null.
///
/// # Safety
/// `plan` must come from [`coss_allocate`]; `arm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coss_plan_get(
    plan: *const CossPlan,
    index: usize,
    arm: *mut CossArm,
    pair_index: *mut i64,
) -> CossStatus {
    guard(|| {
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        let arm = arm.as_mut().ok_or_else(|| null("arm"))?;
        let a = plan.plan.assignments().get(index).ok_or_else(|| {
            fail(
                CossStatus::OutOfRange,
                &format!("index {index} out of range for {} assignments", plan.ids.len()),
            )
        })?;
        *arm = arm_out(a.arm);
        if let Some(p) = pair_index.as_mut() {
            *p = a.pair_index.map_or(-1, |i| i as i64);
        }
        Ok(())
    })
}

/// Arm of the unit with id `id`.
///
/// # Safety
/// `plan` must come from [`coss_allocate`], `id` must be a NUL-terminated
/// string and `arm` writable.
#[no_mangle]
pub unsafe extern "C" fn coss_plan_arm_of(plan: *const CossPlan, id: *const c_char, arm: *mut CossArm) -> CossStatus {
    guard(|| {
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        let out = arm.as_mut().ok_or_else(|| null("arm"))?;
        let id = string(id, "id")?;
        let a = plan
            .plan
            .arm_of(id)
            .ok_or_else(|| fail(CossStatus::NotFound, &format!("unit `{id}` is not in the plan")))?;
        *out = arm_out(a);
        Ok(())
    })
}

/// # Safety
/// `plan` must be null or come from [`coss_allocate`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn coss_plan_free(plan: *mut CossPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Difference in arm means with Welch standard error.
///
/// # Safety
/// `treat` and `control` must point to `n_treat` and `n_control` doubles;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coss_diff_means(
    treat: *const f64,
    n_treat: usize,
    control: *const f64,
    n_control: usize,
    out: *mut CossEstimate,
) -> CossStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let t = slice(treat, n_treat, "treat")?;
        let c = slice(control, n_control, "control")?;
        let e = estimation::diff_means_values(t, c).map_err(core_err)?;
        *out = CossEstimate {
            delta: e.delta,
            se: e.se,
            n_treat: e.n_treat,
            n_control: e.n_control,
        };
        Ok(())
    })
}

/// Welch two-sample t-test.
///
/// # Safety
/// As [`coss_diff_means`], with `out` a writable [`CossTest`].
#[no_mangle]
pub unsafe extern "C" fn coss_t_test_independent(
    treat: *const f64,
    n_treat: usize,
    control: *const f64,
    n_control: usize,
    out: *mut CossTest,
) -> CossStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let t = slice(treat, n_treat, "treat")?;
        let c = slice(control, n_control, "control")?;
        *out = test_out(inference::t_test_independent(t, c).map_err(core_err)?);
        Ok(())
    })
}

/// Paired t-test over `n` (treat[i], control[i]) pairs.
///
/// # Safety
/// `treat` and `control` must each point to `n` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn coss_t_test_paired(
    treat: *const f64,
    control: *const f64,
    n: usize,
    out: *mut CossTest,
) -> CossStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let t = slice(treat, n, "treat")?;
        let c = slice(control, n, "control")?;
        let pairs: Vec<(f64, f64)> = t.iter().copied().zip(c.iter().copied()).collect();
        *out = test_out(inference::t_test_paired(&pairs).map_err(core_err)?);
        Ok(())
    })
}

/// Closed-form bias decay rate for `n >= 3` pairs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coss_bias_rate(family: CossRateFamily, n: usize, out: *mut f64) -> CossStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let distribution = match family {
            CossRateFamily::Uniform => RateFamily::Uniform,
            CossRateFamily::Normal => RateFamily::Normal,
            CossRateFamily::ShiftedPoisson => RateFamily::ShiftedPoisson,
        };
        *out = theory::bias_rate(BiasRateSpec { distribution, n }).map_err(core_err)?;
        Ok(())
    })
}
