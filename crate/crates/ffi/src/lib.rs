//! C ABI over the core toolkit. Objects are opaque heap handles released
//! with their `*_free` function. Every call returns a [`BtStatus`]; on
//! failure the message is kept per thread for [`bt_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use beamtrack::feedback::{BinarySnrParams, FeedbackModel, FrameReward};
use beamtrack::harness::{Experiment, ExperimentConfig, PolicyKind};
use beamtrack::mdp::{mdp_value_iteration, MdpPolicy};
use beamtrack::pomdp::Belief;
use beamtrack::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtPolicy {
    Pbvi = 0,
    Mdp = 1,
    ErMdp = 2,
    Exos = 3,
    Stss = 4,
    Genie = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtPreset {
    Highway = 0,
    TShaped = 1,
}

/// Campaign summary.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BtMetrics {
    pub episodes: usize,
    pub mean_se: f64,
    pub se_ci95: f64,
    pub bt_overhead: f64,
    pub total_bits: u64,
    pub episode_duration_s: f64,
}

/// Per-size feedback probabilities.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BtFeedbackEntry {
    pub eta: f64,
    pub p_corr: f64,
    pub p_md: f64,
    pub p_fa: f64,
}

pub struct BtFeedbackModel(FeedbackModel);
pub struct BtExperiment(Experiment);
pub struct BtMdpPolicy(MdpPolicy);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BtStatus {
    match e {
        Error::Config(_) => BtStatus::Config,
        Error::Io(_) | Error::Json(_) => BtStatus::Io,
        Error::NoThresholdCrossing { .. } | Error::Unnormalized(_) | Error::ZeroLikelihood | Error::DegenerateEmission(_) => {
            BtStatus::Numerical
        }
        _ => BtStatus::InvalidArgument,
    }
}

/// Runs `f`, mapping errors and panics to a status.
fn guard<F: FnOnce() -> Result<(), (BtStatus, String)>>(f: F) -> BtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BtStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            BtStatus::Panic
        }
    }
}

fn core<T>(r: beamtrack::Result<T>) -> Result<T, (BtStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), (BtStatus, String)> {
    if p.is_null() {
        Err((BtStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Calibrates detection thresholds for set sizes `1..=max_size`.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bt_feedback_calibrate(
    snr_db: f64,
    rho_db: f64,
    l_sy: f64,
    max_size: usize,
    out: *mut *mut BtFeedbackModel,
) -> BtStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = core(BinarySnrParams::from_db(snr_db, rho_db, l_sy))?;
        let m = core(FeedbackModel::calibrate(p, max_size))?;
        *out = Box::into_raw(Box::new(BtFeedbackModel(m)));
        Ok(())
    })
}

/// Probabilities for scans of `size` beams.
///
/// # Safety
/// `model` must come from [`bt_feedback_calibrate`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bt_feedback_entry(model: *const BtFeedbackModel, size: usize, out: *mut BtFeedbackEntry) -> BtStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let m = &(*model).0;
        if size == 0 || size > m.max_size() {
            return Err((BtStatus::InvalidArgument, format!("size {size} outside 1..={}", m.max_size())));
        }
        let e = m.entry(size);
        *out = BtFeedbackEntry { eta: e.eta.unwrap_or(f64::NAN), p_corr: e.p_corr, p_md: e.p_md, p_fa: e.p_fa };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from [`bt_feedback_calibrate`], freed once.
#[no_mangle]
pub unsafe extern "C" fn bt_feedback_free(model: *mut BtFeedbackModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn new_experiment(cfg: ExperimentConfig, out: *mut *mut BtExperiment) -> Result<(), (BtStatus, String)> {
    non_null(out, "out")?;
    let e = core(Experiment::new(cfg))?;
    // SAFETY: checked non-null; the caller guarantees it is writable
    unsafe { *out = Box::into_raw(Box::new(BtExperiment(e))) };
    Ok(())
}

/// Builds a preset experiment with `episodes` episodes and `seed`.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn bt_experiment_new(preset: BtPreset, episodes: usize, seed: u64, out: *mut *mut BtExperiment) -> BtStatus {
    guard(|| {
        let base = match preset {
            BtPreset::Highway => ExperimentConfig::default(),
            BtPreset::TShaped => ExperimentConfig::t_shaped(),
        };
        new_experiment(ExperimentConfig { episodes, seed, ..base }, out)
    })
}

/// Builds an experiment from a TOML config string.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bt_experiment_from_toml(toml: *const c_char, out: *mut *mut BtExperiment) -> BtStatus {
    guard(|| {
        non_null(toml, "toml")?;
        let s = CStr::from_ptr(toml).to_str().map_err(|e| (BtStatus::InvalidArgument, e.to_string()))?;
        new_experiment(core(ExperimentConfig::from_toml_str(s))?, out)
    })
}

/// # Safety
/// `exp` must come from a `bt_experiment_*` constructor; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bt_experiment_n_states(exp: *const BtExperiment, out: *mut usize) -> BtStatus {
    guard(|| {
        non_null(exp, "exp")?;
        non_null(out, "out")?;
        *out = (*exp).0.scenario.n_states();
        Ok(())
    })
}

fn policy_kind(p: BtPolicy) -> PolicyKind {
    match p {
        BtPolicy::Pbvi => PolicyKind::Pbvi,
        BtPolicy::Mdp => PolicyKind::Mdp,
        BtPolicy::ErMdp => PolicyKind::ErMdp,
        BtPolicy::Exos => PolicyKind::Exos,
        BtPolicy::Stss => PolicyKind::Stss,
        BtPolicy::Genie => PolicyKind::Genie,
    }
}

/// Runs the configured number of episodes of `policy` on the ground-truth
/// model. Optimizes the policy on first use.
///
/// # Safety
/// `exp` must come from a `bt_experiment_*` constructor and not be shared
/// across threads during the call; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bt_experiment_run(exp: *mut BtExperiment, policy: BtPolicy, out: *mut BtMetrics) -> BtStatus {
    guard(|| {
        non_null(exp, "exp")?;
        non_null(out, "out")?;
        let e = &mut (*exp).0;
        let p = policy_kind(policy);
        core(e.prepare(&[p]))?;
        let r = core(e.campaign_with(p, &e.ground_truth, e.config.episodes, e.config.seed, None))?;
        let m = r.metrics;
        *out = BtMetrics {
            episodes: m.episodes,
            mean_se: m.mean_se,
            se_ci95: m.se_ci95,
            bt_overhead: m.bt_overhead,
            total_bits: m.total_bits,
            episode_duration_s: m.episode_duration_s,
        };
        Ok(())
    })
}

/// # Safety
/// `exp` must be null or come from a `bt_experiment_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn bt_experiment_free(exp: *mut BtExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Error-free value iteration for one frame prior of `n` states.
///
/// # Safety
/// `prior` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bt_mdp_solve(prior: *const f64, n: usize, se_ba: f64, slots: usize, out: *mut *mut BtMdpPolicy) -> BtStatus {
    guard(|| {
        non_null(prior, "prior")?;
        non_null(out, "out")?;
        let b = core(Belief::new(std::slice::from_raw_parts(prior, n).to_vec()))?;
        let p = core(mdp_value_iteration(&b, &FrameReward { se_ba, k: slots }))?;
        *out = Box::into_raw(Box::new(BtMdpPolicy(p)));
        Ok(())
    })
}

/// Expected frame SE of the policy under error-free feedback.
///
/// # Safety
/// `policy` must come from [`bt_mdp_solve`]; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bt_mdp_value(policy: *const BtMdpPolicy, out: *mut f64) -> BtStatus {
    guard(|| {
        non_null(policy, "policy")?;
        non_null(out, "out")?;
        *out = (*policy).0.value();
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or come from [`bt_mdp_solve`], freed once.
#[no_mangle]
pub unsafe extern "C" fn bt_mdp_free(policy: *mut BtMdpPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error() -> String {
        let mut buf = [0 as c_char; 256];
        let n = unsafe { bt_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
        assert_eq!(s.len(), n.min(255));
        s
    }

    #[test]
    fn feedback_roundtrip() {
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { bt_feedback_calibrate(20.0, -10.2, 32.0, 4, &mut m) }, BtStatus::Ok);
        let mut e = BtFeedbackEntry::default();
        assert_eq!(unsafe { bt_feedback_entry(m, 2, &mut e) }, BtStatus::Ok);
        assert!((e.p_fa - e.p_md).abs() < 1e-9);
        assert_eq!(unsafe { bt_feedback_entry(m, 9, &mut e) }, BtStatus::InvalidArgument);
        assert!(last_error().contains("size 9"));
        unsafe { bt_feedback_free(m) };
    }

    #[test]
    fn errors_are_reported() {
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { bt_feedback_calibrate(20.0, 3.0, 32.0, 4, &mut m) }, BtStatus::InvalidArgument);
        assert!(m.is_null());
        assert!(last_error().contains("rho"));
        assert_eq!(unsafe { bt_feedback_calibrate(20.0, -10.0, 32.0, 4, ptr::null_mut()) }, BtStatus::NullPointer);
        let bad = c"policy = 3";
        let mut e = ptr::null_mut();
        assert_eq!(unsafe { bt_experiment_from_toml(bad.as_ptr(), &mut e) }, BtStatus::Config);
    }

    #[test]
    fn mdp_value_matches_core() {
        let prior = [0.5, 0.3, 0.2];
        let mut p = ptr::null_mut();
        assert_eq!(unsafe { bt_mdp_solve(prior.as_ptr(), 3, 3.0, 10, &mut p) }, BtStatus::Ok);
        let mut v = 0.0;
        assert_eq!(unsafe { bt_mdp_value(p, &mut v) }, BtStatus::Ok);
        let want = mdp_value_iteration(&Belief::new(prior.to_vec()).unwrap(), &FrameReward { se_ba: 3.0, k: 10 }).unwrap().value();
        assert_eq!(v, want);
        unsafe { bt_mdp_free(p) };
        let bad = [0.5, 0.6];
        assert_eq!(unsafe { bt_mdp_solve(bad.as_ptr(), 2, 3.0, 10, &mut p) }, BtStatus::InvalidArgument);
    }
}
