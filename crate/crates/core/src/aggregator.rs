//! Speculative aggregation of two draft streams.
//!
//! Each side's draft is verified against the other side's distribution with
//! a rejection step weighted by the other side's interpolation weight; one of
//! the two verified tokens is then picked at random. The emitted token is
//! distributed exactly as `η^l p^l + η^r p^r`, and each draft is accepted
//! when it equals the emitted token.

use rand::Rng;
use thiserror::Error;

use crate::decoder::DraftRecord;
use crate::dist::{self, inverse_cdf, DistError, LogDist};
use crate::rng::{self, Domain};

/// Selection weight of the local verified token.
pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("draft steps differ: {left} vs {right}")]
    StepMismatch { left: u32, right: u32 },
    #[error("draft token {0} has zero probability under its own distribution")]
    DraftOutsideSupport(u32),
    #[error("weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Which speculative sample produced the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampled {
    None,
    AdjustedL,
    AdjustedR,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub target: u32,
    pub accept_l: bool,
    pub accept_r: bool,
    pub step: u32,
    pub resampled_from: Resampled,
}

/// Uniform draws consumed by one aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationDraws {
    pub reject_l: f64,
    pub resample_l: f64,
    pub reject_r: f64,
    pub resample_r: f64,
    pub select: f64,
}

impl AggregationDraws {
    pub fn from_rng(rng: &mut impl Rng) -> Self {
        AggregationDraws {
            reject_l: rng.gen(),
            resample_l: rng.gen(),
            reject_r: rng.gen(),
            resample_r: rng.gen(),
            select: rng.gen(),
        }
    }

    /// Draws for generation step `step`, shared by everyone holding `seed`.
    pub fn for_step(seed: u64, step: u32) -> Self {
        Self::from_rng(&mut rng::stream(seed, Domain::Aggregate, step as u64))
    }
}

/// Verifies draft `x ~ p_a` against `p_b`.
///
/// Keeps `x` unless `p_a(x) > p_b(x)` and `u_reject < eta (1 - p_b(x)/p_a(x))`;
/// on rejection, draws from `norm(max(0, p_b - p_a))` by inverse CDF.
/// Returns the token and whether it was resampled.
pub fn speculative_sample_traced(
    x: u32,
    p_a: &LogDist,
    p_b: &LogDist,
    eta: f64,
    u_reject: f64,
    u_resample: f64,
) -> Result<(u32, bool), AggregationError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(AggregationError::WeightOutOfRange(eta));
    }
    if p_a.len() != p_b.len() {
        return Err(DistError::VocabMismatch { left: p_a.len(), right: p_b.len() }.into());
    }
    let la = p_a.log_prob(x);
    if la == f64::NEG_INFINITY {
        return Err(AggregationError::DraftOutsideSupport(x));
    }
    let lb = p_b.log_prob(x);
    if la <= lb || u_reject >= eta * -(lb - la).exp_m1() {
        return Ok((x, false));
    }
    let residual = p_a.logp().iter().zip(p_b.logp()).map(|(&a, &b)| (b.exp() - a.exp()).max(0.0));
    // p_a(x) > p_b(x) implies positive residual mass somewhere else.
    debug_assert!(residual.clone().sum::<f64>() > 0.0);
    Ok((inverse_cdf(residual, u_resample), true))
}

pub fn speculative_sample(
    x: u32,
    p_a: &LogDist,
    p_b: &LogDist,
    eta: f64,
    u_reject: f64,
    u_resample: f64,
) -> Result<u32, AggregationError> {
    speculative_sample_traced(x, p_a, p_b, eta, u_reject, u_resample).map(|(t, _)| t)
}

/// Aggregates two drafts given the log interpolation weights.
pub fn aggregate_with_weights(
    draft_l: (u32, &LogDist),
    draft_r: (u32, &LogDist),
    log_eta_l: f64,
    log_eta_r: f64,
    step: u32,
    draws: &AggregationDraws,
) -> Result<AggregationOutcome, AggregationError> {
    let (eta_l, eta_r) = (log_eta_l.exp(), log_eta_r.exp());
    let (xl, pl) = draft_l;
    let (xr, pr) = draft_r;
    let (tl, rl) = speculative_sample_traced(xl, pl, pr, eta_r, draws.reject_l, draws.resample_l)?;
    let (tr, rr) = speculative_sample_traced(xr, pr, pl, eta_l, draws.reject_r, draws.resample_r)?;
    let (target, resampled_from) = if draws.select <= DEFAULT_GAMMA {
        (tl, if rl { Resampled::AdjustedL } else { Resampled::None })
    } else {
        (tr, if rr { Resampled::AdjustedR } else { Resampled::None })
    };
    Ok(AggregationOutcome { target, accept_l: xl == target, accept_r: xr == target, step, resampled_from })
}

/// Runs one aggregation over the two sides' drafts.
pub fn aggregate(
    draft_l: &DraftRecord,
    draft_r: &DraftRecord,
    draws: &AggregationDraws,
) -> Result<AggregationOutcome, AggregationError> {
    if draft_l.step != draft_r.step {
        return Err(AggregationError::StepMismatch { left: draft_l.step, right: draft_r.step });
    }
    let (le_l, le_r) = dist::eta_log_weights(draft_l.h, draft_r.h)?;
    aggregate_with_weights(
        (draft_l.token, &draft_l.dist),
        (draft_r.token, &draft_r.dist),
        le_l,
        le_r,
        draft_l.step,
        draws,
    )
}

/// Expected acceptance rate of side-l drafts:
/// `γ^l (1 - η^r δ) + γ^r Σ_x p^l(x) p_t(x)`.
pub fn expected_acceptance(p_l: &LogDist, p_r: &LogDist, eta_r: f64, gamma_l: f64) -> Result<f64, AggregationError> {
    for w in [eta_r, gamma_l] {
        if !(0.0..=1.0).contains(&w) {
            return Err(AggregationError::WeightOutOfRange(w));
        }
    }
    let delta = dist::lk_divergence(p_l, p_r)?;
    let eta_l = 1.0 - eta_r;
    let cross: f64 = p_l
        .logp()
        .iter()
        .zip(p_r.logp())
        .map(|(&a, &b)| {
            let pa = a.exp();
            pa * (eta_l * pa + eta_r * b.exp())
        })
        .sum();
    Ok(gamma_l * (1.0 - eta_r * delta) + (1.0 - gamma_l) * cross)
}
