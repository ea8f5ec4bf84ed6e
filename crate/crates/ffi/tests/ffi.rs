use std::ffi::CStr;
use std::ptr;

use dragon_ffi::*;

fn dist(w: &[f64]) -> *mut DragonDist {
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { dragon_dist_new(w.as_ptr(), w.len(), &mut d) }, DragonStatus::Ok);
    d
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    let n = unsafe { dragon_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(dragon_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn distribution_lifecycle_and_errors() {
    let d = dist(&[1.0, 3.0]);
    let mut p = 0.0;
    assert_eq!(unsafe { dragon_dist_prob(d, 1, &mut p) }, DragonStatus::Ok);
    assert!((p - 0.75).abs() < 1e-12);
    assert_eq!(unsafe { dragon_dist_prob(d, 2, &mut p) }, DragonStatus::InvalidArgument);
    assert!(last_error().contains("outside"));
    unsafe { dragon_dist_free(d) };
    unsafe { dragon_dist_free(ptr::null_mut()) };

    let mut out = ptr::null_mut();
    let zeros = [0.0, 0.0];
    assert_eq!(unsafe { dragon_dist_new(zeros.as_ptr(), 2, &mut out) }, DragonStatus::Distribution);
    assert!(out.is_null());
    assert_eq!(unsafe { dragon_dist_new(ptr::null(), 3, &mut out) }, DragonStatus::NullPointer);
}

#[test]
fn aggregation_and_acceptance() {
    let a = dist(&[0.5, 0.5, 0.0]);
    let b = dist(&[0.0, 0.0, 1.0]);
    let mut o = DragonOutcome { target: 99, accept_l: false, accept_r: false };
    assert_eq!(unsafe { dragon_aggregate(0, a, 2, b, 0.5, 1, 0, &mut o) }, DragonStatus::Ok);
    assert!(o.target < 3);
    assert_eq!(o.accept_l, o.target == 0);
    assert_eq!(o.accept_r, o.target == 2);
    assert_eq!(unsafe { dragon_aggregate(2, a, 2, b, 0.5, 1, 0, &mut o) }, DragonStatus::Aggregation);

    let mut rate = 0.0;
    assert_eq!(unsafe { dragon_expected_acceptance(a, b, 0.25, 0.5, &mut rate) }, DragonStatus::Ok);
    // Disjoint supports: 0.5 η^l (1 + Σ p_l²).
    assert!((rate - 0.5 * 0.75 * 1.5).abs() < 1e-12);
    unsafe {
        dragon_dist_free(a);
        dragon_dist_free(b);
    }

    let (mut el, mut er) = (0.0, 0.0);
    assert_eq!(unsafe { dragon_eta(0.0, 2f64.ln(), &mut el, &mut er) }, DragonStatus::Ok);
    assert!((el - 1.0 / 3.0).abs() < 1e-12 && (er - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn scheduling_calls() {
    let c = DragonCosts { c_dec_l: 1.0, c_dec_r: 1.5, c_trans_l: 0.75, c_trans_r: 0.75 };
    let mut s = 0.0;
    assert_eq!(unsafe { dragon_theoretical_speedup(&c, 0.5, &mut s) }, DragonStatus::Ok);
    assert!((s - 4.0 / 3.0).abs() < 1e-12);

    let mut side = DragonSide::Cloud;
    assert_eq!(unsafe { dragon_choose_side(DragonSide::Device, &c, 0.5, 0.5, &mut side) }, DragonStatus::Ok);
    let mut dz = 0.0;
    assert_eq!(unsafe { dragon_delta_z(&c, 0.5, 0.5, &mut dz) }, DragonStatus::Ok);
    assert_eq!(side == DragonSide::Cloud, dz > 0.0);

    let bad = DragonCosts { c_dec_l: -1.0, ..c };
    assert_eq!(unsafe { dragon_delta_z(&bad, 0.5, 0.5, &mut dz) }, DragonStatus::InvalidArgument);
    assert_eq!(unsafe { dragon_delta_z(ptr::null(), 0.5, 0.5, &mut dz) }, DragonStatus::NullPointer);
}

#[test]
fn simulation_through_handles() {
    let l = [false; 200];
    let r = [true; 200];
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { dragon_trace_from_flags(l.as_ptr(), r.as_ptr(), 200, &mut t) }, DragonStatus::Ok);
    let c = DragonCosts { c_dec_l: 1.0, c_dec_r: 1.5, c_trans_l: 1.2, c_trans_r: 1.8 };
    let mut s = DragonSimSummary { total_time: 0.0, tokens: 0, switches: 9 };
    assert_eq!(unsafe { dragon_simulate(t, &c, ptr::null(), DragonStrategy::Device, 0, &mut s) }, DragonStatus::Ok);
    assert_eq!((s.tokens, s.switches), (200, 0));
    assert!(s.total_time >= 1.5 * 199.0);
    unsafe { dragon_trace_free(t) };

    let mut empty = ptr::null_mut();
    assert_eq!(unsafe { dragon_trace_bernoulli(0, 0.5, 0.5, 1, &mut empty) }, DragonStatus::Ok);
    assert_eq!(unsafe { dragon_simulate(empty, &c, ptr::null(), DragonStrategy::Dragon, 0, &mut s) }, DragonStatus::Simulation);
    unsafe { dragon_trace_free(empty) };
}

#[test]
fn generation_and_frames() {
    let mut buf = [0u32; 16];
    let mut n = 0;
    let st = unsafe { dragon_generate_synthetic(64, 16, 2, 8, 16, 3, buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(st, DragonStatus::Ok);
    assert_eq!(n, 16);
    assert!(buf.iter().all(|&t| t < 64));
    let st = unsafe { dragon_generate_synthetic(64, 16, 2, 8, 32, 3, buf.as_mut_ptr(), buf.len(), &mut n) };
    assert_eq!(st, DragonStatus::BufferTooSmall);

    let hello = [5u8, 0, 0, 0, 0, 0];
    let mut ty = 0;
    assert_eq!(unsafe { dragon_frame_type(hello.as_ptr(), hello.len(), &mut ty) }, DragonStatus::Ok);
    assert_eq!(ty, 5);
    let bad = [9u8, 0, 0, 0, 0, 0];
    assert_eq!(unsafe { dragon_frame_type(bad.as_ptr(), bad.len(), &mut ty) }, DragonStatus::Transport);
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dragon.h")).unwrap();
    for name in ["dragon_aggregate", "dragon_simulate", "dragon_last_error", "DragonDist", "DRAGON_STATUS_OK"] {
        assert!(h.contains(name), "{name} missing from header");
    }
}
