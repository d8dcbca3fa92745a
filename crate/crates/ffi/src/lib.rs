//! C ABI over `reachsafe`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Fallible functions
//! return an `RsStatus`; on failure, `rs_last_error` describes the error on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reachsafe::dataset::{self, Dataset, GenerateConfig};
use reachsafe::env::{self as renv, EnvConfig, EnvState, OBS_DIM};
use reachsafe::nn::Checkpoint;
use reachsafe::pipeline::{self, PolicyHead};
use reachsafe::rng::stream;
use reachsafe::value::{CriticBank, CriticKind, SafetySignal};
use reachsafe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Data = 3,
    Divergence = 4,
    Io = 5,
    Panic = 6,
}

pub struct RsEnvConfig(EnvConfig);
pub struct RsDataset(Dataset);
pub struct RsCriticBank(CriticBank);
pub struct RsPolicy(PolicyHead);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsStepOutcome {
    pub next: RsState,
    pub reward: f64,
    pub cost: f64,
    pub h: f64,
    pub done: bool,
    pub reached_goal: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RsStatus {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => RsStatus::InvalidInput,
        Error::Dataset(_) | Error::Shape(_) => RsStatus::Data,
        Error::Divergence { .. } => RsStatus::Divergence,
        Error::Io { .. } | Error::Checkpoint(_) | Error::Json(_) => RsStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RsStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidInput(format!("{what} is not UTF-8"))))
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn to_state(s: &RsState) -> EnvState {
    EnvState::new(s.x, s.y, s.v, s.theta)
}

fn from_state(s: &EnvState) -> RsState {
    RsState {
        x: s.x,
        y: s.y,
        v: s.v,
        theta: s.theta,
    }
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Observation width of the toy environment.
#[no_mangle]
pub extern "C" fn rs_obs_dim() -> usize {
    OBS_DIM
}

/// Default environment configuration. Never null.
#[no_mangle]
pub extern "C" fn rs_env_config_default() -> *mut RsEnvConfig {
    Box::into_raw(Box::new(RsEnvConfig(EnvConfig::default())))
}

/// # Safety
/// `json` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rs_env_config_from_json(json: *const c_char, out: *mut *mut RsEnvConfig) -> RsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = EnvConfig::from_json(c_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(RsEnvConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_env_config_free(cfg: *mut RsEnvConfig) {
    free_box(cfg)
}

/// Advances the environment by one step.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_env_step(
    cfg: *const RsEnvConfig,
    state: *const RsState,
    accel: f64,
    turn: f64,
    out: *mut RsStepOutcome,
) -> RsStatus {
    guard(|| {
        let cfg = &non_null(cfg, "cfg")?.0;
        let s = to_state(non_null(state, "state")?);
        let o = renv::step(&s, &renv::Action::new(accel, turn), cfg)?;
        *out_ptr(out, "out")? = RsStepOutcome {
            next: from_state(&o.state),
            reward: o.reward,
            cost: o.cost,
            h: o.h,
            done: o.done,
            reached_goal: o.reached_goal,
        };
        Ok(())
    })
}

/// Ground-truth feasibility of a state under the braking-and-turning-away
/// policy.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_oracle_feasible(
    cfg: *const RsEnvConfig,
    state: *const RsState,
    out: *mut bool,
) -> RsStatus {
    guard(|| {
        let cfg = &non_null(cfg, "cfg")?.0;
        let s = to_state(non_null(state, "state")?);
        if !s.is_finite() {
            return Err(Error::InvalidInput("state must be finite".into()).into());
        }
        *out_ptr(out, "out")? = renv::oracle_feasible(&s, cfg);
        Ok(())
    })
}

/// Generates a behavior dataset with the scripted and random policies.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_generate(
    cfg: *const RsEnvConfig,
    n_scripted: usize,
    n_random: usize,
    seed: u64,
    out: *mut *mut RsDataset,
) -> RsStatus {
    guard(|| {
        let cfg = &non_null(cfg, "cfg")?.0;
        let out = out_ptr(out, "out")?;
        let gen = GenerateConfig {
            n_scripted,
            n_random,
            seed,
            ..Default::default()
        };
        *out = Box::into_raw(Box::new(RsDataset(dataset::generate(cfg, &gen)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_load(path: *const c_char, out: *mut *mut RsDataset) -> RsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let d = dataset::load(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(RsDataset(d)));
        Ok(())
    })
}

/// Writes the dataset and its manifest.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_save(data: *const RsDataset, path: *const c_char) -> RsStatus {
    guard(|| {
        let d = &non_null(data, "data")?.0;
        dataset::save(d, Path::new(c_str(path, "path")?))?;
        Ok(())
    })
}

/// Number of transitions; 0 for a null handle.
///
/// # Safety
/// `data` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_len(data: *const RsDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `data` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_free(data: *mut RsDataset) {
    free_box(data)
}

/// Loads critics from a checkpoint written by the training pipeline.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rs_critic_bank_load(path: *const c_char, out: *mut *mut RsCriticBank) -> RsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::read(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(RsCriticBank(CriticBank::from_checkpoint(&ck)?)));
        Ok(())
    })
}

/// Feasible value `V_h` for `n` row-major observations of width
/// `rs_obs_dim()`, written to `out[0..n]`.
///
/// # Safety
/// `obs` must hold `n * rs_obs_dim()` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn rs_critic_bank_feasible_value(
    bank: *const RsCriticBank,
    obs: *const f64,
    n: usize,
    out: *mut f64,
) -> RsStatus {
    guard(|| {
        let bank = &non_null(bank, "bank")?.0;
        if n == 0 {
            return Ok(());
        }
        if obs.is_null() {
            return Err(Fail::Null("obs"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let obs = std::slice::from_raw_parts(obs, n * bank.obs_dim);
        let v = bank.v(CriticKind::Feasible, obs)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&v);
        Ok(())
    })
}

/// # Safety
/// `bank` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_critic_bank_free(bank: *mut RsCriticBank) {
    free_box(bank)
}

/// Loads a policy checkpoint written by the training pipeline.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_load(path: *const c_char, out: *mut *mut RsPolicy) -> RsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ck = Checkpoint::read(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(RsPolicy(PolicyHead::from_checkpoint(&ck)?)));
        Ok(())
    })
}

/// Samples `candidates` actions at `state`, keeps the one with the lowest
/// feasible `Q`, and writes `(accel, turn)` to `out[0..2]`. The same
/// `(seed, stream_id)` always yields the same action.
///
/// # Safety
/// Pointers must be valid and `out` must have room for two values.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_select_action(
    policy: *const RsPolicy,
    bank: *const RsCriticBank,
    state: *const RsState,
    candidates: usize,
    seed: u64,
    stream_id: u64,
    out: *mut f64,
) -> RsStatus {
    guard(|| {
        let policy = &non_null(policy, "policy")?.0;
        let bank = &non_null(bank, "bank")?.0;
        let s = to_state(non_null(state, "state")?);
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if candidates == 0 {
            return Err(Error::InvalidInput("candidates must be at least 1".into()).into());
        }
        let mut rng = stream(seed, stream_id);
        let (a, _) = pipeline::select_action(
            policy,
            bank,
            SafetySignal::FEASIBLE,
            &s.observation(),
            candidates,
            &mut rng,
        )?;
        std::slice::from_raw_parts_mut(out, a.len()).copy_from_slice(&a);
        Ok(())
    })
}

/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_policy_free(policy: *mut RsPolicy) {
    free_box(policy)
}
