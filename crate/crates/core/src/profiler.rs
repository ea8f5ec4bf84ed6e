//! Decode and link latency models.
//!
//! Decode delay is modeled as `k_a t / k_b + k_c` in milliseconds, fitted
//! offline by least squares and refined online with the intercept frozen.
//! Transmission delay is `L + g / B` for a payload of `g` bytes.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weight on new observations in [`DecodeModel::update_runtime`].
pub const DEFAULT_ZETA: f64 = 0.3;
/// Tokens between bandwidth refreshes.
pub const BANDWIDTH_INTERVAL: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("need at least two distinct steps to fit, got {0}")]
    Degenerate(usize),
    #[error("zeta {0} outside [0, 1]")]
    ZetaOutOfRange(f64),
    #[error("update would divide by zero")]
    ZeroDenominator,
    #[error("non-finite sample at t={0}")]
    NonFinite(f64),
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeModel {
    pub k_a: f64,
    pub k_b: f64,
    pub k_c: f64,
}

impl DecodeModel {
    /// A model that predicts `c` at every step.
    pub fn constant(c: f64) -> Self {
        DecodeModel { k_a: 0.0, k_b: 1.0, k_c: c }
    }

    pub fn slope(&self) -> f64 {
        self.k_a / self.k_b
    }

    /// Predicted decode delay at step `t`, never negative.
    pub fn predict(&self, t: f64) -> f64 {
        (self.slope() * t + self.k_c).max(0.0)
    }

    /// Ordinary least squares over `(t, c)` samples, with `k_b = 1`.
    pub fn fit_offline(samples: &[(f64, f64)]) -> Result<Self, ProfileError> {
        if let Some(&(t, _)) = samples.iter().find(|(t, c)| !t.is_finite() || !c.is_finite()) {
            return Err(ProfileError::NonFinite(t));
        }
        let n = samples.len() as f64;
        if samples.len() < 2 {
            return Err(ProfileError::Degenerate(samples.len()));
        }
        let mean_t = samples.iter().map(|s| s.0).sum::<f64>() / n;
        let mean_c = samples.iter().map(|s| s.1).sum::<f64>() / n;
        let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |(sxx, sxy), &(t, c)| {
            let dt = t - mean_t;
            (sxx + dt * dt, sxy + dt * (c - mean_c))
        });
        if sxx == 0.0 {
            return Err(ProfileError::Degenerate(1));
        }
        let slope = sxy / sxx;
        Ok(DecodeModel { k_a: slope, k_b: 1.0, k_c: mean_c - slope * mean_t })
    }

    /// Blends one observation `c_obs` at step `t` into the slope.
    pub fn update_runtime(&self, t: f64, c_obs: f64, zeta: f64) -> Result<Self, ProfileError> {
        if !(0.0..=1.0).contains(&zeta) {
            return Err(ProfileError::ZetaOutOfRange(zeta));
        }
        if !c_obs.is_finite() || !t.is_finite() {
            return Err(ProfileError::NonFinite(t));
        }
        let k_a = (1.0 - zeta) * self.k_a + zeta * (c_obs - self.k_c) * t;
        let k_b = (1.0 - zeta) * self.k_b + zeta * t * t;
        if k_b == 0.0 {
            return Err(ProfileError::ZeroDenominator);
        }
        Ok(DecodeModel { k_a, k_b, k_c: self.k_c })
    }
}

/// Averages `reps` timings of `measure(t)` for each step in `steps`.
pub fn measure_decode(
    steps: impl IntoIterator<Item = u32>,
    reps: usize,
    mut measure: impl FnMut(u32) -> f64,
) -> Vec<(f64, f64)> {
    let reps = reps.max(1);
    steps
        .into_iter()
        .map(|t| {
            let total: f64 = (0..reps).map(|_| measure(t)).sum();
            (t as f64, total / reps as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Send,
    Recv,
}

/// Round-trip latency `L` (ms) and per-direction bandwidths (bytes/ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency: f64,
    pub b_send: f64,
    pub b_recv: f64,
}

impl LinkModel {
    pub fn new(latency: f64, b_send: f64, b_recv: f64) -> Result<Self, ProfileError> {
        for b in [b_send, b_recv] {
            if b.is_nan() || b <= 0.0 {
                return Err(ProfileError::Bandwidth(b));
            }
        }
        Ok(LinkModel { latency: latency.max(0.0), b_send, b_recv })
    }

    /// `L + g / B` for a `g`-byte payload in direction `dir`.
    pub fn estimate_trans(&self, g: f64, dir: Direction) -> f64 {
        let b = match dir {
            Direction::Send => self.b_send,
            Direction::Recv => self.b_recv,
        };
        self.latency + g.max(0.0) / b
    }

    /// Round trip of a `send`-byte message answered by a `recv`-byte one.
    pub fn round_trip(&self, send: f64, recv: f64) -> f64 {
        self.latency + send.max(0.0) / self.b_send + recv.max(0.0) / self.b_recv
    }
}

/// Online link estimate: the latest RTT sample blended with a historical
/// moving average, and byte-counted bandwidth windows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkEstimator {
    rtt_last: Option<f64>,
    rtt_avg: Option<f64>,
    weight: f64,
    bw: [Option<f64>; 2],
    window: [(f64, f64); 2],
}

impl Default for LinkEstimator {
    fn default() -> Self {
        LinkEstimator::new(0.2)
    }
}

impl LinkEstimator {
    pub fn new(weight: f64) -> Self {
        LinkEstimator { rtt_last: None, rtt_avg: None, weight: weight.clamp(0.0, 1.0), bw: [None; 2], window: [(0.0, 0.0); 2] }
    }

    pub fn observe_rtt(&mut self, rtt_ms: f64) {
        if !rtt_ms.is_finite() || rtt_ms < 0.0 {
            return;
        }
        self.rtt_last = Some(rtt_ms);
        self.rtt_avg = Some(match self.rtt_avg {
            Some(avg) => (1.0 - self.weight) * avg + self.weight * rtt_ms,
            None => rtt_ms,
        });
    }

    /// Accumulates `bytes` moved over `ms`; call [`Self::refresh_bandwidth`]
    /// every [`BANDWIDTH_INTERVAL`] tokens.
    pub fn observe_transfer(&mut self, dir: Direction, bytes: f64, ms: f64) {
        let w = &mut self.window[dir as usize];
        w.0 += bytes;
        w.1 += ms;
    }

    pub fn refresh_bandwidth(&mut self) {
        for i in 0..2 {
            let (bytes, ms) = std::mem::take(&mut self.window[i]);
            if bytes > 0.0 && ms > 0.0 {
                self.bw[i] = Some(bytes / ms);
            }
        }
    }

    pub fn rtt_last(&self) -> Option<f64> {
        self.rtt_last
    }

    /// Mean of the real-time sample and the historical average.
    pub fn rtt(&self) -> Option<f64> {
        Some((self.rtt_last? + self.rtt_avg?) / 2.0)
    }

    pub fn bandwidth(&self, dir: Direction) -> Option<f64> {
        self.bw[dir as usize]
    }

    /// Current model, with `default_bw` standing in for unmeasured bandwidths.
    pub fn model(&self, default_bw: f64) -> Option<LinkModel> {
        let latency = self.rtt()?;
        LinkModel::new(
            latency,
            self.bw[0].unwrap_or(default_bw),
            self.bw[1].unwrap_or(default_bw),
        )
        .ok()
    }
}

/// One row of a profile snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub t: u32,
    pub c_dec_obs: f64,
    pub c_dec_pred: f64,
    pub rtt_obs: Option<f64>,
    pub bw_obs: Option<f64>,
}

pub fn write_profile<W: io::Write>(w: W, rows: &[ProfileRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
