//! C ABI over the core library.
//!
//! Every function returns a [`DragonStatus`]; results go through out
//! pointers. On failure a message is kept per thread and can be fetched with
//! [`dragon_last_error`]. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dragon::aggregator::{aggregate_with_weights, expected_acceptance, AggregationDraws};
use dragon::dist::{eta_log_weights, CorrectedWeight, LogDist, Vocab};
use dragon::reference::{run_reference, GenerationSetup};
use dragon::retrieval::{Corpus, Half};
use dragon::scheduler::{choose_side, delta_z, theoretical_speedup, AcceptanceEstimate, CostVector};
use dragon::simulator::{self, AcceptanceTrace, NetModel, SimConfig, Strategy};
use dragon::transport::{self, MessageHeader};
use dragon::Side;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Distribution = 3,
    Aggregation = 4,
    Decoder = 5,
    Transport = 6,
    Simulation = 7,
    Runtime = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragonSide {
    Device = 0,
    Cloud = 1,
}

impl From<DragonSide> for Side {
    fn from(s: DragonSide) -> Side {
        match s {
            DragonSide::Device => Side::Device,
            DragonSide::Cloud => Side::Cloud,
        }
    }
}

impl From<Side> for DragonSide {
    fn from(s: Side) -> DragonSide {
        match s {
            Side::Device => DragonSide::Device,
            Side::Cloud => DragonSide::Cloud,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragonStrategy {
    Device = 0,
    Cloud = 1,
    Random = 2,
    Dragon = 3,
}

/// Decode and one-way transmission costs in ms; `l` is the local side.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragonCosts {
    pub c_dec_l: f64,
    pub c_dec_r: f64,
    pub c_trans_l: f64,
    pub c_trans_r: f64,
}

impl From<DragonCosts> for CostVector {
    fn from(c: DragonCosts) -> Self {
        CostVector::new(c.c_dec_l, c.c_dec_r, c.c_trans_l, c.c_trans_r)
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragonNet {
    pub base_latency: f64,
    pub extra_latency: f64,
    pub jitter_amplitude: f64,
    pub jitter_period: f64,
    /// bytes per ms; zero or negative means unlimited.
    pub bandwidth: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DragonOutcome {
    pub target: u32,
    pub accept_l: bool,
    pub accept_r: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragonSimSummary {
    pub total_time: f64,
    pub tokens: usize,
    pub switches: u32,
}

/// Opaque token distribution.
pub struct DragonDist(LogDist);

/// Opaque acceptance trace.
pub struct DragonTrace(AcceptanceTrace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DragonStatus, msg: impl ToString) -> DragonStatus {
    set_error(msg.to_string());
    status
}

fn status_of(e: &dragon::Error) -> DragonStatus {
    match e {
        dragon::Error::Dist(_) => DragonStatus::Distribution,
        dragon::Error::Retrieval(_) | dragon::Error::Decoder(_) => DragonStatus::Decoder,
        dragon::Error::Aggregation(_) => DragonStatus::Aggregation,
        dragon::Error::Transport(_) => DragonStatus::Transport,
        dragon::Error::Simulation(_) => DragonStatus::Simulation,
        dragon::Error::Runtime(_) | dragon::Error::Profile(_) => DragonStatus::Runtime,
        dragon::Error::Io(_) => DragonStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), DragonStatus>) -> DragonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DragonStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DragonStatus::Panic, "internal panic"),
    }
}

fn lift<T, E: Into<dragon::Error>>(r: Result<T, E>) -> Result<T, DragonStatus> {
    r.map_err(|e| {
        let e = e.into();
        fail(status_of(&e), &e)
    })
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, DragonStatus> {
    p.as_mut().ok_or_else(|| fail(DragonStatus::NullPointer, "null output pointer"))
}

unsafe fn input<'a, T>(p: *const T) -> Result<&'a T, DragonStatus> {
    p.as_ref().ok_or_else(|| fail(DragonStatus::NullPointer, "null input pointer"))
}

unsafe fn array<'a, T>(p: *const T, len: usize) -> Result<&'a [T], DragonStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DragonStatus::NullPointer, "null array"));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length, or 0
/// when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dragon_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dragon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a distribution from `len` non-negative weights.
///
/// # Safety
/// `weights` must point to `len` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_dist_new(weights: *const f64, len: usize, out_dist: *mut *mut DragonDist) -> DragonStatus {
    guard(|| {
        let o = out(out_dist)?;
        let w = array(weights, len)?;
        let d = lift(LogDist::from_weights(w))?;
        *o = Box::into_raw(Box::new(DragonDist(d)));
        Ok(())
    })
}

/// # Safety
/// `dist` must be null or a handle from [`dragon_dist_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dragon_dist_free(dist: *mut DragonDist) {
    if !dist.is_null() {
        drop(Box::from_raw(dist));
    }
}

/// Probability of `token`.
///
/// # Safety
/// `dist` must be a live handle and `out_p` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_dist_prob(dist: *const DragonDist, token: u32, out_p: *mut f64) -> DragonStatus {
    guard(|| {
        let d = input(dist)?;
        let o = out(out_p)?;
        if token as usize >= d.0.len() {
            return Err(fail(DragonStatus::InvalidArgument, format!("token {token} outside vocabulary")));
        }
        *o = d.0.prob(token);
        Ok(())
    })
}

/// Interpolation weights `(η^l, η^r)` from the two sides' corrected log weights.
///
/// # Safety
/// Output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_eta(h_l: f64, h_r: f64, out_eta_l: *mut f64, out_eta_r: *mut f64) -> DragonStatus {
    guard(|| {
        let (a, b) = (out(out_eta_l)?, out(out_eta_r)?);
        let (l, r) = lift(eta_log_weights(CorrectedWeight(h_l), CorrectedWeight(h_r)))?;
        *a = l.exp();
        *b = r.exp();
        Ok(())
    })
}

/// Aggregates drafts `x_l ~ p_l` and `x_r ~ p_r` with the step's seeded draws.
///
/// # Safety
/// Handles must be live and `out_outcome` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_aggregate(
    x_l: u32,
    p_l: *const DragonDist,
    x_r: u32,
    p_r: *const DragonDist,
    eta_l: f64,
    seed: u64,
    step: u32,
    out_outcome: *mut DragonOutcome,
) -> DragonStatus {
    guard(|| {
        let (pl, pr) = (input(p_l)?, input(p_r)?);
        let o = out(out_outcome)?;
        if !(0.0..=1.0).contains(&eta_l) {
            return Err(fail(DragonStatus::InvalidArgument, format!("eta_l {eta_l} outside [0, 1]")));
        }
        let draws = AggregationDraws::for_step(seed, step);
        let r = lift(aggregate_with_weights((x_l, &pl.0), (x_r, &pr.0), eta_l.ln(), (1.0 - eta_l).ln(), step, &draws))?;
        *o = DragonOutcome { target: r.target, accept_l: r.accept_l, accept_r: r.accept_r };
        Ok(())
    })
}

/// Expected acceptance rate of side-l drafts.
///
/// # Safety
/// Handles must be live and `out_rate` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_expected_acceptance(
    p_l: *const DragonDist,
    p_r: *const DragonDist,
    eta_r: f64,
    gamma_l: f64,
    out_rate: *mut f64,
) -> DragonStatus {
    guard(|| {
        let (pl, pr) = (input(p_l)?, input(p_r)?);
        let o = out(out_rate)?;
        *o = lift(expected_acceptance(&pl.0, &pr.0, eta_r, gamma_l))?;
        Ok(())
    })
}

fn checked_costs(c: &DragonCosts) -> Result<CostVector, DragonStatus> {
    let v = CostVector::from(*c);
    if v.is_valid() {
        Ok(v)
    } else {
        Err(fail(DragonStatus::InvalidArgument, "costs must be finite and non-negative"))
    }
}

/// Latency difference between aggregating locally and remotely; positive
/// favours moving aggregation.
///
/// # Safety
/// `costs` must be readable and `out_dz` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_delta_z(costs: *const DragonCosts, alpha_l: f64, alpha_r: f64, out_dz: *mut f64) -> DragonStatus {
    guard(|| {
        let c = checked_costs(input(costs)?)?;
        *out(out_dz)? = delta_z(&c, &AcceptanceEstimate::new(alpha_l, alpha_r));
        Ok(())
    })
}

/// Side that should aggregate next, given the current one.
///
/// # Safety
/// `costs` must be readable and `out_side` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_choose_side(
    current: DragonSide,
    costs: *const DragonCosts,
    alpha_l: f64,
    alpha_r: f64,
    out_side: *mut DragonSide,
) -> DragonStatus {
    guard(|| {
        let c = checked_costs(input(costs)?)?;
        *out(out_side)? = choose_side(current.into(), &c, &AcceptanceEstimate::new(alpha_l, alpha_r)).into();
        Ok(())
    })
}

/// Closed-form speedup over the token-wise synchronized baseline.
///
/// # Safety
/// `costs` must be readable and `out_s` writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_theoretical_speedup(costs: *const DragonCosts, alpha_r: f64, out_s: *mut f64) -> DragonStatus {
    guard(|| {
        let c = checked_costs(input(costs)?)?;
        if !(0.0..=1.0).contains(&alpha_r) {
            return Err(fail(DragonStatus::InvalidArgument, "alpha_r outside [0, 1]"));
        }
        *out(out_s)? = theoretical_speedup(&c, alpha_r);
        Ok(())
    })
}

/// A trace of independent acceptances.
///
/// # Safety
/// `out_trace` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_trace_bernoulli(
    tokens: usize,
    alpha_l: f64,
    alpha_r: f64,
    seed: u64,
    out_trace: *mut *mut DragonTrace,
) -> DragonStatus {
    guard(|| {
        let o = out(out_trace)?;
        *o = Box::into_raw(Box::new(DragonTrace(AcceptanceTrace::bernoulli(tokens, alpha_l, alpha_r, seed))));
        Ok(())
    })
}

/// A trace from per-step device and cloud acceptance flags.
///
/// # Safety
/// Both arrays must hold `tokens` entries and `out_trace` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_trace_from_flags(
    accept_l: *const bool,
    accept_r: *const bool,
    tokens: usize,
    out_trace: *mut *mut DragonTrace,
) -> DragonStatus {
    guard(|| {
        let o = out(out_trace)?;
        let (l, r) = (array(accept_l, tokens)?, array(accept_r, tokens)?);
        let steps = l.iter().copied().zip(r.iter().copied()).collect();
        *o = Box::into_raw(Box::new(DragonTrace(AcceptanceTrace::new(steps))));
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn dragon_trace_free(trace: *mut DragonTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Replays `trace`; `costs` are read with `l` = device, `r` = cloud. A null
/// `net` means no extra latency.
///
/// # Safety
/// Pointers must be valid; `net` may be null.
#[no_mangle]
pub unsafe extern "C" fn dragon_simulate(
    trace: *const DragonTrace,
    costs: *const DragonCosts,
    net: *const DragonNet,
    strategy: DragonStrategy,
    seed: u64,
    out_summary: *mut DragonSimSummary,
) -> DragonStatus {
    guard(|| {
        let t = input(trace)?;
        let c = checked_costs(input(costs)?)?;
        let o = out(out_summary)?;
        let net = match net.as_ref() {
            None => NetModel::none(),
            Some(n) => NetModel {
                base_latency: n.base_latency,
                extra_latency: n.extra_latency,
                jitter_amplitude: n.jitter_amplitude,
                jitter_period: n.jitter_period,
                bandwidth: if n.bandwidth > 0.0 { n.bandwidth } else { f64::INFINITY },
            },
        };
        let strategy = match strategy {
            DragonStrategy::Device => Strategy::Device,
            DragonStrategy::Cloud => Strategy::Cloud,
            DragonStrategy::Random => Strategy::Random(seed),
            DragonStrategy::Dragon => Strategy::Dragon,
        };
        let r = lift(simulator::simulate_with(&t.0, &SimConfig::new(&c, net, strategy)))?;
        *o = DragonSimSummary { total_time: r.total_time, tokens: r.per_token.len(), switches: r.switches };
        Ok(())
    })
}

/// Sequential generation over a synthetic corpus. Writes up to `capacity`
/// tokens into `out_tokens` and the number generated into `out_len`.
///
/// # Safety
/// `out_tokens` must hold `capacity` entries; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_generate_synthetic(
    vocab: usize,
    docs: usize,
    topics: usize,
    prompt_len: usize,
    max_new_tokens: usize,
    seed: u64,
    out_tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> DragonStatus {
    guard(|| {
        let n_out = out(out_len)?;
        if capacity < max_new_tokens {
            return Err(fail(DragonStatus::BufferTooSmall, format!("need room for {max_new_tokens} tokens")));
        }
        if max_new_tokens > 0 && out_tokens.is_null() {
            return Err(fail(DragonStatus::NullPointer, "null token buffer"));
        }
        let vocab = lift(Vocab::new(vocab))?;
        if docs == 0 || prompt_len == 0 || prompt_len > 64 {
            return Err(fail(DragonStatus::InvalidArgument, "need documents and a prompt of 1..=64 tokens"));
        }
        let corpus = Corpus::synthetic(vocab, docs, topics, 64, seed);
        let prompt = corpus.docs()[0].tokens()[..prompt_len].to_vec();
        let setup = GenerationSetup::new(vocab, prompt, max_new_tokens, seed);
        let log = lift(run_reference(&setup, (&corpus, Half::Second), (&corpus, Half::First)))?;
        for (i, r) in log.iter().enumerate() {
            *out_tokens.add(i) = r.token;
        }
        *n_out = log.len();
        Ok(())
    })
}

/// Message type byte of the frame in `bytes`, after full validation.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out_type` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dragon_frame_type(bytes: *const u8, len: usize, out_type: *mut u8) -> DragonStatus {
    guard(|| {
        let o = out(out_type)?;
        let frame = array(bytes, len)?;
        let header = lift(MessageHeader::parse(frame))?;
        lift(transport::decode(frame))?;
        *o = header.msg_type as u8;
        Ok(())
    })
}
