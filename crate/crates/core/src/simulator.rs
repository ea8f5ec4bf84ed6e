//! Discrete-event replay of the two-sided pipeline.
//!
//! Acceptance decisions come from a recorded or synthetic trace, so only
//! timing is simulated: decodes take `c_dec`, every message takes the
//! one-way delay of its direction plus network latency and serialization,
//! and aggregation is instantaneous. Both sides draft continuously and
//! restart when their draft is rejected. A remote side only learns of its
//! rejection when the target reaches it.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::f64::consts::PI;
use std::io;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::DecodeModel;
use crate::reference::TargetRecord;
use crate::scheduler::{choose_side, theoretical_speedup, AcceptanceTracker, CostVector};
use crate::Side;

/// Encoded size of a draft carrying 64 kept tokens.
pub const DEFAULT_DRAFT_BYTES: usize = 418;
/// Encoded size of a target message.
pub const DEFAULT_TARGET_BYTES: usize = 17;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty acceptance trace")]
    EmptyTrace,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("trace file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Extra network latency with a sinusoidal jitter, applied to every message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetModel {
    /// ms
    pub base_latency: f64,
    /// ms
    pub extra_latency: f64,
    /// ms
    pub jitter_amplitude: f64,
    /// s
    pub jitter_period: f64,
    /// bytes per ms
    pub bandwidth: f64,
}

impl NetModel {
    /// No latency and unlimited bandwidth.
    pub fn none() -> Self {
        NetModel { base_latency: 0.0, extra_latency: 0.0, jitter_amplitude: 0.0, jitter_period: 20.0 * PI, bandwidth: f64::INFINITY }
    }

    /// Jitter amplitude a fifth of the total latency, period 20π s.
    pub fn with_extra(base_latency: f64, extra_latency: f64) -> Self {
        NetModel {
            base_latency,
            extra_latency,
            jitter_amplitude: (base_latency + extra_latency) / 5.0,
            ..NetModel::none()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let total = self.base_latency + self.extra_latency;
        if !(self.base_latency >= 0.0 && self.extra_latency >= 0.0) {
            return Err(SimError::Invalid("latencies must be non-negative".into()));
        }
        if self.jitter_amplitude.abs() > total {
            return Err(SimError::Invalid(format!("jitter amplitude {} exceeds latency {total}", self.jitter_amplitude)));
        }
        if self.jitter_period.is_nan() || self.jitter_period <= 0.0 || self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(SimError::Invalid("jitter period and bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Latency in ms at time `t` seconds.
    pub fn instantaneous_latency(&self, t: f64) -> f64 {
        self.base_latency + self.extra_latency + self.jitter_amplitude * (2.0 * PI * t / self.jitter_period).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u32,
    /// Device draft accepted.
    pub accept_l: bool,
    /// Cloud draft accepted.
    pub accept_r: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AcceptanceTrace {
    pub steps: Vec<(bool, bool)>,
}

impl AcceptanceTrace {
    pub fn new(steps: Vec<(bool, bool)>) -> Self {
        AcceptanceTrace { steps }
    }

    pub fn repeat(pattern: (bool, bool), n: usize) -> Self {
        AcceptanceTrace { steps: vec![pattern; n] }
    }

    /// Independent Bernoulli acceptances.
    pub fn bernoulli(n: usize, alpha_l: f64, alpha_r: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AcceptanceTrace { steps: (0..n).map(|_| (rng.gen::<f64>() < alpha_l, rng.gen::<f64>() < alpha_r)).collect() }
    }

    pub fn from_log(log: &[TargetRecord]) -> Self {
        AcceptanceTrace { steps: log.iter().map(|r| (r.accept_l, r.accept_r)).collect() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn acceptance(&self, side: Side) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let n = self.steps.iter().filter(|s| if side == Side::Device { s.0 } else { s.1 }).count();
        n as f64 / self.steps.len() as f64
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, SimError> {
        let mut steps = Vec::new();
        for (i, row) in csv::Reader::from_reader(r).deserialize::<TraceStep>().enumerate() {
            let row = row?;
            if row.step as usize != i {
                return Err(SimError::Invalid(format!("trace row {i} has step {}", row.step)));
            }
            steps.push((row.accept_l, row.accept_r));
        }
        Ok(AcceptanceTrace { steps })
    }

    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        for (i, &(l, r)) in self.steps.iter().enumerate() {
            out.serialize(TraceStep { step: i as u32, accept_l: l, accept_r: r })?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Device,
    Cloud,
    /// Re-pick the aggregator uniformly after every aggregation.
    Random(u64),
    /// Greedy scheduling on live estimates.
    Dragon,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "device" => Ok(Strategy::Device),
            "cloud" => Ok(Strategy::Cloud),
            "dragon" => Ok(Strategy::Dragon),
            "random" => Ok(Strategy::Random(0)),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed.parse().map(Strategy::Random).map_err(|_| format!("bad seed '{seed}'")),
                None => Err(format!("unknown strategy '{other}' (device, cloud, random[:seed], dragon)")),
            },
        }
    }
}

/// Per-step decode duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeTiming {
    Constant(f64),
    /// `model.predict(offset + step)`.
    Model { model: DecodeModel, offset: f64 },
}

impl DecodeTiming {
    fn at(&self, step: u32) -> f64 {
        match *self {
            DecodeTiming::Constant(c) => c,
            DecodeTiming::Model { model, offset } => model.predict(offset + step as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Indexed by [`Side::index`].
    pub decode: [DecodeTiming; 2],
    /// Fixed one-way delay from each side, ms.
    pub trans: [f64; 2],
    pub net: NetModel,
    pub strategy: Strategy,
    /// Outstanding drafts per side; `None` is unbounded.
    pub capacity: Option<usize>,
    pub draft_bytes: usize,
    pub target_bytes: usize,
    pub ema_weight: f64,
}

impl SimConfig {
    /// `costs` read with `l` = device and `r` = cloud.
    pub fn new(costs: &CostVector, net: NetModel, strategy: Strategy) -> Self {
        SimConfig {
            decode: [DecodeTiming::Constant(costs.c_dec_l), DecodeTiming::Constant(costs.c_dec_r)],
            trans: [costs.c_trans_l, costs.c_trans_r],
            net,
            strategy,
            capacity: None,
            draft_bytes: DEFAULT_DRAFT_BYTES,
            target_bytes: DEFAULT_TARGET_BYTES,
            ema_weight: crate::scheduler::DEFAULT_EMA_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub total_time: f64,
    pub per_token: Vec<f64>,
    pub switches: u32,
    pub side_history: Vec<Side>,
    pub aggregate_times: Vec<f64>,
}

impl SimResult {
    /// Mean per-token latency over the last `n` tokens.
    pub fn tail_latency(&self, n: usize) -> f64 {
        let n = n.clamp(1, self.per_token.len().max(1));
        let tail = &self.per_token[self.per_token.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    DecodeDone { side: Side, step: u32, epoch: u64 },
    DraftArrive { to: Side, step: u32, epoch: u64 },
    TargetArrive { to: Side, step: u32, rejected: bool, switch: bool },
}

#[derive(Debug, Clone, Copy)]
struct Scheduled {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Default)]
struct SideState {
    /// Epoch the decoder currently works in.
    epoch: u64,
    /// Epoch whose drafts are still valid; runs ahead of `epoch` while a
    /// rejection is in flight.
    valid_epoch: u64,
    decoding: Option<(u32, u64)>,
    next_step: u32,
    known_resolved: u32,
    own: BTreeMap<u32, u64>,
    remote: BTreeMap<u32, u64>,
    /// Latest arrival time of a message sent by this side.
    last_arrival: f64,
}

struct Sim<'a> {
    trace: &'a AcceptanceTrace,
    cfg: &'a SimConfig,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    sides: [SideState; 2],
    aggregator: Option<Side>,
    next_target: u32,
    tracker: AcceptanceTracker,
    picker: ChaCha8Rng,
    result: SimResult,
}

impl<'a> Sim<'a> {
    fn n(&self) -> u32 {
        self.trace.len() as u32
    }

    fn push(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq: self.seq, event }));
    }

    fn trans(&self, from: Side, at: f64, bytes: usize) -> f64 {
        let net = &self.cfg.net;
        let ser = if net.bandwidth.is_finite() { bytes as f64 / net.bandwidth } else { 0.0 };
        self.cfg.trans[from.index()] + net.instantaneous_latency(at / 1e3).max(0.0) + ser
    }

    /// Sends a message from `from` now, keeping per-direction FIFO order.
    fn send(&mut self, from: Side, bytes: usize, event: Event) {
        let arrive = (self.now + self.trans(from, self.now, bytes)).max(self.sides[from.index()].last_arrival);
        self.sides[from.index()].last_arrival = arrive;
        self.push(arrive, event);
    }

    fn try_start(&mut self, side: Side) {
        let n = self.n();
        let s = &self.sides[side.index()];
        if s.decoding.is_some() || s.next_step >= n {
            return;
        }
        if let Some(cap) = self.cfg.capacity {
            if (s.next_step - s.known_resolved) as usize >= cap {
                return;
            }
        }
        let (step, epoch) = (s.next_step, s.epoch);
        self.sides[side.index()].decoding = Some((step, epoch));
        let done = self.now + self.cfg.decode[side.index()].at(step);
        self.push(done, Event::DecodeDone { side, step, epoch });
    }

    fn restart(&mut self, side: Side, from_step: u32) {
        let s = &mut self.sides[side.index()];
        s.epoch = s.valid_epoch;
        s.decoding = None;
        s.next_step = from_step;
        self.try_start(side);
    }

    fn has_valid(&self, at: Side, producer: Side, step: u32) -> bool {
        let s = &self.sides[at.index()];
        let map = if at == producer { &s.own } else { &s.remote };
        map.get(&step) == Some(&self.sides[producer.index()].valid_epoch)
    }

    fn aggregate_ready(&mut self) {
        while let Some(a) = self.aggregator {
            let t = self.next_target;
            if t >= self.n() || !self.has_valid(a, a, t) || !self.has_valid(a, a.other(), t) {
                return;
            }
            self.aggregate(a, t);
        }
    }

    fn aggregate(&mut self, a: Side, t: u32) {
        let b = a.other();
        let (acc_dev, acc_cld) = self.trace.steps[t as usize];
        let accepted = |s: Side| if s == Side::Device { acc_dev } else { acc_cld };
        let prev = self.result.aggregate_times.last().copied().unwrap_or(0.0);
        self.result.per_token.push(self.now - prev);
        self.result.aggregate_times.push(self.now);
        self.result.side_history.push(a);
        self.next_target = t + 1;
        self.tracker.update(acc_dev as u8 as f64, acc_cld as u8 as f64);

        for s in Side::BOTH {
            if !accepted(s) {
                self.sides[s.index()].valid_epoch += 1;
            }
        }
        self.sides[a.index()].known_resolved = t + 1;
        if !accepted(a) {
            self.restart(a, t + 1);
        }
        let switch = self.next_target < self.n() && self.decide(a) != a;
        if switch {
            self.aggregator = None;
            self.result.switches += 1;
        }
        let bytes = self.cfg.target_bytes;
        self.send(a, bytes, Event::TargetArrive { to: b, step: t, rejected: !accepted(b), switch });
        self.try_start(a);
    }

    fn decide(&mut self, a: Side) -> Side {
        match self.cfg.strategy {
            Strategy::Device => Side::Device,
            Strategy::Cloud => Side::Cloud,
            Strategy::Random(_) => {
                if self.picker.gen::<bool>() {
                    Side::Device
                } else {
                    Side::Cloud
                }
            }
            Strategy::Dragon => {
                let b = a.other();
                let t = self.next_target;
                let bytes = self.cfg.draft_bytes;
                let costs = CostVector::new(
                    self.cfg.decode[a.index()].at(t),
                    self.cfg.decode[b.index()].at(t),
                    self.trans(a, self.now, bytes),
                    self.trans(b, self.now, bytes),
                );
                choose_side(a, &costs, &self.tracker.perspective(a))
            }
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::DecodeDone { side, step, epoch } => {
                let s = &mut self.sides[side.index()];
                if s.decoding != Some((step, epoch)) {
                    return;
                }
                s.decoding = None;
                s.next_step = step + 1;
                s.own.insert(step, epoch);
                let bytes = self.cfg.draft_bytes;
                self.send(side, bytes, Event::DraftArrive { to: side.other(), step, epoch });
                self.try_start(side);
            }
            Event::DraftArrive { to, step, epoch } => {
                self.sides[to.index()].remote.insert(step, epoch);
            }
            Event::TargetArrive { to, step, rejected, switch } => {
                self.sides[to.index()].known_resolved = step + 1;
                if rejected {
                    self.restart(to, step + 1);
                } else {
                    self.try_start(to);
                }
                if switch {
                    self.aggregator = Some(to);
                }
            }
        }
        self.aggregate_ready();
    }
}

/// Replays `trace` under `cfg` and returns the timing of every aggregation.
pub fn simulate_with(trace: &AcceptanceTrace, cfg: &SimConfig) -> Result<SimResult, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    cfg.net.validate()?;
    if cfg.trans.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(SimError::Invalid("transmission delays must be non-negative".into()));
    }
    if cfg.capacity == Some(0) {
        return Err(SimError::Invalid("capacity must be at least 1".into()));
    }
    let initial = match cfg.strategy {
        Strategy::Cloud => Side::Cloud,
        _ => Side::Device,
    };
    let seed = if let Strategy::Random(s) = cfg.strategy { s } else { 0 };
    let mut sim = Sim {
        trace,
        cfg,
        now: 0.0,
        seq: 0,
        queue: BinaryHeap::new(),
        sides: Default::default(),
        aggregator: Some(initial),
        next_target: 0,
        tracker: AcceptanceTracker::new(cfg.ema_weight),
        picker: ChaCha8Rng::seed_from_u64(seed),
        result: SimResult { total_time: 0.0, per_token: Vec::new(), switches: 0, side_history: Vec::new(), aggregate_times: Vec::new() },
    };
    for s in Side::BOTH {
        sim.try_start(s);
    }
    while let Some(Reverse(ev)) = sim.queue.pop() {
        sim.now = ev.time;
        sim.handle(ev.event);
        if sim.next_target >= sim.n() {
            break;
        }
    }
    if sim.next_target < sim.n() {
        return Err(SimError::Invalid(format!("simulation stalled at step {}", sim.next_target)));
    }
    sim.result.total_time = sim.result.per_token.iter().sum();
    Ok(sim.result)
}

/// [`simulate_with`] using default message sizes and unbounded queues.
pub fn simulate(trace: &AcceptanceTrace, costs: &CostVector, net: &NetModel, strategy: Strategy) -> Result<SimResult, SimError> {
    simulate_with(trace, &SimConfig::new(costs, *net, strategy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPoint {
    pub c_dec_l: f64,
    pub c_dec_r: f64,
    pub rtt: f64,
    pub alpha_r: f64,
    pub empirical: f64,
    pub theoretical: f64,
}

/// Empirical vs. closed-form speedup over a grid, aggregating on the device.
/// Device drafts are always rejected in the speculative trace and cloud
/// drafts accepted with probability `alpha_r`; the baseline rejects both.
pub fn speedup_curve(
    costs: &[CostVector],
    alphas: &[f64],
    tokens: usize,
    seed: u64,
) -> Result<Vec<SpeedupPoint>, SimError> {
    if costs.is_empty() || alphas.is_empty() {
        return Err(SimError::Invalid("empty grid".into()));
    }
    let net = NetModel::none();
    let vanilla_trace = AcceptanceTrace::repeat((false, false), tokens);
    let mut out = Vec::with_capacity(costs.len() * alphas.len());
    for (i, c) in costs.iter().enumerate() {
        let vanilla = simulate(&vanilla_trace, c, &net, Strategy::Device)?.total_time;
        for (j, &alpha) in alphas.iter().enumerate() {
            let trace = AcceptanceTrace::bernoulli(tokens, 0.0, alpha, seed ^ ((i as u64) << 32 | j as u64));
            let spec = simulate(&trace, c, &net, Strategy::Device)?.total_time;
            out.push(SpeedupPoint {
                c_dec_l: c.c_dec_l,
                c_dec_r: c.c_dec_r,
                rtt: c.rtt(),
                alpha_r: alpha,
                empirical: if spec > 0.0 { vanilla / spec } else { 1.0 },
                theoretical: theoretical_speedup(c, alpha),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub step: u32,
    pub time_ms: f64,
    pub latency_ms: f64,
    pub aggregator: Side,
    pub accept_l: bool,
    pub accept_r: bool,
}

pub fn write_sim_csv<W: io::Write>(w: W, trace: &AcceptanceTrace, res: &SimResult) -> Result<(), SimError> {
    let mut out = csv::Writer::from_writer(w);
    for (i, ((&lat, &time), &agg)) in res.per_token.iter().zip(&res.aggregate_times).zip(&res.side_history).enumerate() {
        let (l, r) = trace.steps[i];
        out.serialize(SimRow { step: i as u32, time_ms: time, latency_ms: lat, aggregator: agg, accept_l: l, accept_r: r })?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steady(pattern: (bool, bool), costs: CostVector) -> f64 {
        let r = simulate(&AcceptanceTrace::repeat(pattern, 1000), &costs, &NetModel::none(), Strategy::Device).unwrap();
        r.tail_latency(100)
    }

    #[test]
    fn pipeline_cases() {
        assert!((steady((false, true), CostVector::new(1.0, 1.5, 1.2, 1.8)) - 1.5).abs() < 1e-6);
        assert!((steady((true, false), CostVector::new(2.0, 2.0, 1.5, 1.0)) - 4.5).abs() < 1e-6);
        assert!((steady((true, true), CostVector::new(1.0, 1.5, 1.5, 1.8)) - 1.5).abs() < 1e-6);
        assert!((steady((false, false), CostVector::new(2.0, 1.0, 1.5, 1.8)) - 4.3).abs() < 1e-6);
    }

    #[test]
    fn vanilla_on_either_side() {
        let c = CostVector::new(0.7, 1.1, 0.4, 0.9);
        let want = 0.7f64.max(1.1 + 1.3);
        assert!((steady((false, false), c) - want).abs() < 1e-9);
        let r = simulate(&AcceptanceTrace::repeat((false, false), 500), &c, &NetModel::none(), Strategy::Cloud).unwrap();
        assert!((r.tail_latency(100) - 1.1f64.max(0.7 + 1.3)).abs() < 1e-9);
    }

    #[test]
    fn totals_add_up_and_are_deterministic() {
        let trace = AcceptanceTrace::bernoulli(300, 0.6, 0.4, 3);
        let c = CostVector::new(5.0, 1.0, 20.0, 20.0);
        for strategy in [Strategy::Device, Strategy::Cloud, Strategy::Random(7), Strategy::Dragon] {
            let net = NetModel::with_extra(2.0, 100.0);
            let a = simulate(&trace, &c, &net, strategy).unwrap();
            let b = simulate(&trace, &c, &net, strategy).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.per_token.len(), 300);
            let sum: f64 = a.per_token.iter().sum();
            assert!((sum - a.total_time).abs() < 1e-9);
        }
    }

    #[test]
    fn latency_jitter() {
        let net = NetModel { jitter_amplitude: 0.0, ..NetModel::with_extra(3.0, 4.0) };
        assert_eq!(net.instantaneous_latency(17.0), 7.0);
        let net = NetModel::with_extra(3.0, 7.0);
        assert!((net.instantaneous_latency(net.jitter_period / 4.0) - 12.0).abs() < 1e-12);
        assert!((net.instantaneous_latency(5.0 * PI) - 12.0).abs() < 1e-12);
        assert!(NetModel { jitter_amplitude: 11.0, ..net }.validate().is_err());
    }

    #[test]
    fn capacity_one_is_vanilla_timing() {
        let c = CostVector::new(1.0, 1.0, 2.0, 2.0);
        let trace = AcceptanceTrace::repeat((true, true), 200);
        let cfg = SimConfig { capacity: Some(1), ..SimConfig::new(&c, NetModel::none(), Strategy::Device) };
        let r = simulate_with(&trace, &cfg).unwrap();
        assert!((r.tail_latency(50) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = AcceptanceTrace::bernoulli(20, 0.5, 0.5, 1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"step,accept_l,accept_r\n"));
        assert_eq!(AcceptanceTrace::read_csv(&buf[..]).unwrap(), t);
    }

    #[test]
    fn empty_trace_rejected() {
        let c = CostVector::new(1.0, 1.0, 1.0, 1.0);
        assert!(matches!(simulate(&AcceptanceTrace::default(), &c, &NetModel::none(), Strategy::Dragon), Err(SimError::EmptyTrace)));
    }
}
