//! Greedy choice of the aggregation side.
//!
//! `l` is always the side currently aggregating and `r` the other one. The
//! expected per-token latency of keeping aggregation on either side is
//! derived from the decode and transmission delays and the two acceptance
//! rates; the scheduler moves aggregation when the other side is cheaper.

use crate::Side;

/// Smoothing weight of the acceptance-rate moving average.
pub const DEFAULT_EMA_WEIGHT: f64 = 0.2;

/// Delays seen from the aggregating side `l`, all in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostVector {
    pub c_dec_l: f64,
    pub c_dec_r: f64,
    /// One-way transmission delay from `l` to `r`.
    pub c_trans_l: f64,
    /// One-way transmission delay from `r` to `l`.
    pub c_trans_r: f64,
}

impl CostVector {
    pub fn new(c_dec_l: f64, c_dec_r: f64, c_trans_l: f64, c_trans_r: f64) -> Self {
        CostVector { c_dec_l, c_dec_r, c_trans_l, c_trans_r }
    }

    /// Costs with the round trip split evenly over the two directions.
    pub fn with_rtt(c_dec_l: f64, c_dec_r: f64, rtt: f64) -> Self {
        CostVector::new(c_dec_l, c_dec_r, rtt / 2.0, rtt / 2.0)
    }

    pub fn rtt(&self) -> f64 {
        self.c_trans_l + self.c_trans_r
    }

    /// The same costs seen from the other side.
    pub fn swapped(&self) -> Self {
        CostVector::new(self.c_dec_r, self.c_dec_l, self.c_trans_r, self.c_trans_l)
    }

    pub fn is_valid(&self) -> bool {
        [self.c_dec_l, self.c_dec_r, self.c_trans_l, self.c_trans_r].iter().all(|x| x.is_finite() && *x >= 0.0)
    }
}

/// Acceptance rates of `l` and `r` drafts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceEstimate {
    pub alpha_l: f64,
    pub alpha_r: f64,
}

impl AcceptanceEstimate {
    pub fn new(alpha_l: f64, alpha_r: f64) -> Self {
        AcceptanceEstimate { alpha_l: alpha_l.clamp(0.0, 1.0), alpha_r: alpha_r.clamp(0.0, 1.0) }
    }

    pub fn swapped(&self) -> Self {
        AcceptanceEstimate { alpha_l: self.alpha_r, alpha_r: self.alpha_l }
    }
}

/// Exponential moving average of each side's acceptance rate, starting
/// optimistic at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceTracker {
    rates: [f64; 2],
    weight: f64,
}

impl Default for AcceptanceTracker {
    fn default() -> Self {
        AcceptanceTracker::new(DEFAULT_EMA_WEIGHT)
    }
}

impl AcceptanceTracker {
    pub fn new(weight: f64) -> Self {
        AcceptanceTracker { rates: [1.0, 1.0], weight: weight.clamp(0.0, 1.0) }
    }

    /// Folds in one observation per side (a 0/1 flag or an expected rate).
    pub fn update(&mut self, device: f64, cloud: f64) {
        for (rate, obs) in self.rates.iter_mut().zip([device, cloud]) {
            *rate = (1.0 - self.weight) * *rate + self.weight * obs.clamp(0.0, 1.0);
        }
    }

    pub fn rate(&self, side: Side) -> f64 {
        self.rates[side.index()]
    }

    /// Estimate with `l = current`.
    pub fn perspective(&self, current: Side) -> AcceptanceEstimate {
        AcceptanceEstimate::new(self.rate(current), self.rate(current.other()))
    }
}

/// Remaining time of a process of length `total` that began at `begin`.
pub fn phi(total: f64, begin: f64, now: f64) -> f64 {
    (total + begin - now).max(0.0)
}

/// Time still needed by in-flight work, as seen when scheduling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InFlight {
    /// `φ(c^l_dec)`: remaining local decode of the next draft.
    pub local_decode: f64,
    /// `φ(c^r_dec + c^r_trans)`: remaining remote decode plus delivery.
    pub remote_delivery: f64,
}

/// Waiting time for the next pair of drafts given whether the previous `l`
/// and `r` drafts were accepted.
pub fn waiting_time(prev_l_accepted: bool, prev_r_accepted: bool, costs: &CostVector, inflight: &InFlight) -> f64 {
    let CostVector { c_dec_l, c_dec_r, c_trans_l, c_trans_r } = *costs;
    match (prev_l_accepted, prev_r_accepted) {
        (false, true) => c_dec_l.max(inflight.remote_delivery),
        (true, false) => inflight.local_decode.max(c_trans_l + c_dec_r + c_trans_r),
        (true, true) => inflight.local_decode.max(inflight.remote_delivery),
        (false, false) => c_dec_l.max(c_trans_l + c_trans_r + c_dec_r),
    }
}

/// Whose per-token latency to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregating {
    /// Aggregation stays on `l`.
    Local,
    /// Aggregation moves to `r`.
    Remote,
}

/// Expected latency per token when `which` keeps aggregating:
/// `Z^l = α^r max(c^l, c^r) + (1 - α^r) max(c^l, c^r + rtt)`.
pub fn latency_per_token(which: Aggregating, costs: &CostVector, acc: &AcceptanceEstimate) -> f64 {
    let rtt = costs.rtt();
    let (own, other, alpha_other) = match which {
        Aggregating::Local => (costs.c_dec_l, costs.c_dec_r, acc.alpha_r),
        Aggregating::Remote => (costs.c_dec_r, costs.c_dec_l, acc.alpha_l),
    };
    alpha_other * own.max(other) + (1.0 - alpha_other) * own.max(other + rtt)
}

/// `Z^l - Z^r` in closed form; positive means `r` is the faster aggregator.
pub fn delta_z(costs: &CostVector, acc: &AcceptanceEstimate) -> f64 {
    let rtt = costs.rtt();
    let (cl, cr) = (costs.c_dec_l, costs.c_dec_r);
    let (al, ar) = (acc.alpha_l, acc.alpha_r);
    let j = cr - cl;
    if cl <= cr - rtt {
        (1.0 - ar) * rtt
    } else if cl <= cr {
        (1.0 - al) * j + (al - ar) * rtt
    } else if cl <= cr + rtt {
        (1.0 - ar) * j + (al - ar) * rtt
    } else {
        (al - 1.0) * rtt
    }
}

/// Side that should aggregate the next token; ties keep `current`.
pub fn choose_side(current: Side, costs: &CostVector, acc: &AcceptanceEstimate) -> Side {
    let dz = delta_z(costs, acc);
    if dz > 0.0 {
        current.other()
    } else {
        current
    }
}

/// Speedup over token-wise synchronized aggregation with `l = device`
/// aggregating and cloud acceptance rate `alpha_r`.
pub fn theoretical_speedup(costs: &CostVector, alpha_r: f64) -> f64 {
    let rtt = costs.rtt();
    let (cl, cr) = (costs.c_dec_l, costs.c_dec_r);
    let inv = if cl <= cr {
        if cr + rtt == 0.0 {
            1.0
        } else {
            1.0 - alpha_r * rtt / (rtt + cr)
        }
    } else if cl <= cr + rtt {
        1.0 - (1.0 - cl / (cr + rtt)) * alpha_r
    } else {
        1.0
    };
    1.0 / inv
}
