//! Live two-node generation.
//!
//! Each node runs a decode thread that keeps drafting ahead into its own
//! queue, a reader thread that mirrors the peer's drafts and applies its
//! outcomes, and an aggregation thread that is active only while this node
//! is the aggregator. [`Engine`] holds all protocol state and does no I/O;
//! [`run_node`] wires it to threads and a TCP stream.
//!
//! Resynchronization after a rejection relies on FIFO delivery. The
//! aggregator rolls itself back before announcing the outcome, so every
//! stale draft it sent precedes the announcement. The other side answers
//! each outcome with an ack; drafts from a rejected peer are dropped until
//! that ack arrives.

use std::collections::VecDeque;
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{aggregate, expected_acceptance, AggregationDraws, AggregationError, DEFAULT_GAMMA};
use crate::decoder::{DecoderError, DecoderState, DraftRecord};
use crate::dist::{self, CompressedDist, DistError};
use crate::profiler::{DecodeModel, Direction, LinkEstimator, ProfileRow, BANDWIDTH_INTERVAL, DEFAULT_ZETA};
use crate::reference::{GenerationSetup, TargetRecord};
use crate::retrieval::{Corpus, Half};
use crate::scheduler::{choose_side, AcceptanceTracker, CostVector, DEFAULT_EMA_WEIGHT};
use crate::transport::{self, Codec, DraftMsg, FrameReader, Message, ProbeKind, ProbeMsg, TargetMsg, TransportError, Writer};
use crate::Side;

/// Default bound on drafts a side may have outstanding.
pub const DEFAULT_QUEUE_CAPACITY: usize = 8;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("protocol desync: {0}")]
    Desync(String),
    #[error("peer disconnected after {} tokens: {reason}", partial.len())]
    PeerDisconnected { partial: Vec<TargetRecord>, reason: String },
    #[error("run did not finish within {0:?}")]
    Timeout(Duration),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// How the aggregation side is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Aggregate on one side for the whole run.
    Static(Side),
    /// Start on the device and let the scheduler move aggregation.
    Auto,
    /// Hand aggregation over every `n` tokens, starting on the device.
    Alternate(u32),
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Policy::Auto),
            other => {
                if let Some(n) = other.strip_prefix("alternate:") {
                    return n.parse().map(Policy::Alternate).map_err(|_| format!("bad alternation period '{n}'"));
                }
                other.parse::<Side>().map(Policy::Static).map_err(|_| format!("unknown policy '{other}' (expected device, cloud, auto or alternate:N)"))
            }
        }
    }
}

impl Policy {
    fn initial(self) -> Side {
        match self {
            Policy::Static(s) => s,
            Policy::Auto | Policy::Alternate(_) => Side::Device,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub me: Side,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub capacity: usize,
    pub policy: Policy,
    pub zeta: f64,
    pub ema_weight: f64,
}

impl EngineConfig {
    pub fn new(me: Side, seed: u64, max_new_tokens: usize) -> Self {
        EngineConfig {
            me,
            seed,
            max_new_tokens,
            capacity: DEFAULT_QUEUE_CAPACITY,
            policy: Policy::Static(Side::Device),
            zeta: DEFAULT_ZETA,
            ema_weight: DEFAULT_EMA_WEIGHT,
        }
    }
}

/// A decode to run outside the lock; committed only if `epoch` still holds.
#[derive(Debug, Clone)]
pub struct DecodeJob {
    pub epoch: u64,
    pub decoder: DecoderState,
}

impl DecodeJob {
    /// Runs the toy decode, returning the advanced state and the draft.
    pub fn run(mut self) -> Result<(DecoderState, DraftRecord, CompressedDist), RuntimeError> {
        let step = self.decoder.step();
        let (record, wire) = self.decoder.decode_step_compressed(self.decoder.draw_for(step))?;
        let wire = match wire {
            Some(w) => w,
            None => dist::topp_encode(&record.dist, 1.0)?,
        };
        Ok((self.decoder, record, wire))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineStats {
    pub rollbacks: u32,
    pub switches: u32,
    pub aggregated: u32,
    pub stale_dropped: u32,
    pub preempted: u32,
}

/// Protocol state of one node.
#[derive(Debug)]
pub struct Engine {
    cfg: EngineConfig,
    aggregator: Side,
    decoder: DecoderState,
    epoch: u64,
    own: VecDeque<DraftRecord>,
    remote: VecDeque<DraftRecord>,
    remote_next: u32,
    stale_until_ack: Option<u32>,
    log: Vec<TargetRecord>,
    append_times: Vec<Duration>,
    aggregator_history: Vec<Side>,
    tracker: AcceptanceTracker,
    models: [Option<DecodeModel>; 2],
    link: LinkEstimator,
    profile: Vec<ProfileRow>,
    stats: EngineStats,
    bye_sent: bool,
    peer_bye: bool,
}

impl Engine {
    pub fn new(cfg: EngineConfig, decoder: DecoderState) -> Result<Self, RuntimeError> {
        if decoder.side() != cfg.me {
            return Err(RuntimeError::Config(format!("decoder belongs to {}, engine to {}", decoder.side(), cfg.me)));
        }
        if decoder.step() != 0 {
            return Err(RuntimeError::Config("decoder must start at the prompt".into()));
        }
        if cfg.capacity == 0 {
            return Err(RuntimeError::Config("queue capacity must be at least 1".into()));
        }
        if decoder.prompt().len() + cfg.max_new_tokens > decoder.max_context() {
            return Err(RuntimeError::Config(format!(
                "prompt of {} plus {} new tokens exceeds max context {}",
                decoder.prompt().len(),
                cfg.max_new_tokens,
                decoder.max_context()
            )));
        }
        Ok(Engine {
            aggregator: cfg.policy.initial(),
            tracker: AcceptanceTracker::new(cfg.ema_weight),
            cfg,
            decoder,
            epoch: 0,
            own: VecDeque::new(),
            remote: VecDeque::new(),
            remote_next: 0,
            stale_until_ack: None,
            log: Vec::new(),
            append_times: Vec::new(),
            aggregator_history: Vec::new(),
            models: [None, None],
            link: LinkEstimator::default(),
            profile: Vec::new(),
            stats: EngineStats::default(),
            bye_sent: false,
            peer_bye: false,
        })
    }

    fn me(&self) -> Side {
        self.cfg.me
    }

    fn peer(&self) -> Side {
        self.cfg.me.other()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn aggregator(&self) -> Side {
        self.aggregator
    }

    pub fn log(&self) -> &[TargetRecord] {
        &self.log
    }

    pub fn append_times(&self) -> &[Duration] {
        &self.append_times
    }

    /// Side that aggregated each logged step.
    pub fn aggregator_history(&self) -> &[Side] {
        &self.aggregator_history
    }

    pub fn own_queue(&self) -> &VecDeque<DraftRecord> {
        &self.own
    }

    pub fn remote_queue(&self) -> &VecDeque<DraftRecord> {
        &self.remote
    }

    pub fn decoder(&self) -> &DecoderState {
        &self.decoder
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn tracker(&self) -> &AcceptanceTracker {
        &self.tracker
    }

    pub fn profile(&self) -> &[ProfileRow] {
        &self.profile
    }

    pub fn link(&self) -> &LinkEstimator {
        &self.link
    }

    pub fn is_complete(&self) -> bool {
        self.log.len() >= self.cfg.max_new_tokens
    }

    /// Complete, announced, and the peer has said goodbye.
    pub fn is_finished(&self) -> bool {
        self.is_complete() && self.bye_sent && self.peer_bye
    }

    pub fn peer_gone(&self) -> bool {
        self.peer_bye
    }

    fn diag(&self) -> String {
        format!(
            "[{} aggregator={} log={} own={:?} remote={:?} remote_next={} stale={:?} decoder_step={}]",
            self.me(),
            self.aggregator,
            self.log.len(),
            self.own.iter().map(|d| d.step).collect::<Vec<_>>(),
            self.remote.iter().map(|d| d.step).collect::<Vec<_>>(),
            self.remote_next,
            self.stale_until_ack,
            self.decoder.step()
        )
    }

    fn desync(&self, what: impl std::fmt::Display) -> RuntimeError {
        RuntimeError::Desync(format!("{what} {}", self.diag()))
    }

    /// Messages to send once at startup.
    pub fn start(&mut self) -> Vec<Message> {
        let mut out = Vec::new();
        self.finish(&mut out);
        out
    }

    fn finish(&mut self, out: &mut Vec<Message>) {
        if self.is_complete() && !self.bye_sent {
            self.bye_sent = true;
            out.push(Message::Bye);
        }
    }

    /// The next draft to decode, if the queue has room.
    pub fn next_decode_job(&self) -> Option<DecodeJob> {
        let n = self.cfg.max_new_tokens;
        if self.is_complete() || self.own.len() >= self.cfg.capacity || self.decoder.step() as usize >= n {
            return None;
        }
        Some(DecodeJob { epoch: self.epoch, decoder: self.decoder.clone() })
    }

    fn observe_decode(&mut self, side: Side, position: usize, c_ms: f64) {
        let t = position as f64;
        let slot = &mut self.models[side.index()];
        *slot = Some(match slot {
            None => DecodeModel::constant(c_ms),
            Some(m) => m.update_runtime(t, c_ms, self.cfg.zeta).unwrap_or(*m),
        });
    }

    /// Installs a finished decode. Stale jobs are dropped silently.
    pub fn commit_draft(
        &mut self,
        job_epoch: u64,
        decoder: DecoderState,
        record: DraftRecord,
        wire: CompressedDist,
    ) -> Result<Vec<Message>, RuntimeError> {
        if job_epoch != self.epoch || self.is_complete() {
            self.stats.preempted += 1;
            return Ok(Vec::new());
        }
        let expected = self.decoder.step();
        if record.step != expected || decoder.step() != expected + 1 {
            return Err(self.desync(format!("draft for step {} committed, expected {expected}", record.step)));
        }
        let position = self.decoder.position();
        let predicted = self.models[self.me().index()].map(|m| m.predict(position as f64));
        self.observe_decode(self.me(), position, record.decode_ms);
        self.profile.push(ProfileRow {
            t: position as u32,
            c_dec_obs: record.decode_ms,
            c_dec_pred: predicted.unwrap_or(record.decode_ms),
            rtt_obs: self.link.rtt_last(),
            bw_obs: self.link.bandwidth(Direction::Send),
        });
        self.decoder = decoder;
        let msg = Message::Draft(DraftMsg::from_record(&record, wire));
        self.own.push_back(record);
        Ok(vec![msg])
    }

    /// Applies one message from the peer.
    pub fn on_message(&mut self, msg: Message, now: Duration) -> Result<Vec<Message>, RuntimeError> {
        let mut out = Vec::new();
        match msg {
            Message::Draft(d) => {
                if self.stale_until_ack.is_some() {
                    self.stats.stale_dropped += 1;
                    debug!("{} dropped stale draft {}", self.me(), d.step);
                } else if d.step != self.remote_next {
                    return Err(self.desync(format!("peer draft for step {}", d.step)));
                } else {
                    let record = d.to_record(self.peer())?;
                    self.observe_decode(self.peer(), self.decoder.prompt().len() + d.step as usize, record.decode_ms);
                    self.remote.push_back(record);
                    self.remote_next += 1;
                }
            }
            Message::Target(t) => {
                if self.aggregator == self.me() {
                    return Err(self.desync(format!("outcome for step {} received while aggregating", t.step)));
                }
                let record = TargetRecord { step: t.step, token: t.target, accept_l: t.accept_l, accept_r: t.accept_r };
                self.apply_outcome(record, now)?;
                out.push(Message::Probe(ProbeMsg { seq: t.step, kind: ProbeKind::Ack, stamp_us: 0 }));
                if t.switch_to == Some(self.me()) {
                    self.aggregator = self.me();
                    self.stats.switches += 1;
                    info!("{} takes over aggregation at step {}", self.me(), t.step + 1);
                }
                if !self.is_complete() {
                    out.push(ping(t.step, now));
                }
            }
            Message::Switch(s) => {
                if s.step as usize != self.log.len() || self.aggregator == self.me() {
                    return Err(self.desync(format!("switch to {} at step {}", s.to, s.step)));
                }
                if s.to == self.me() {
                    self.aggregator = self.me();
                    self.stats.switches += 1;
                }
            }
            Message::Probe(p) => match p.kind {
                ProbeKind::Ping => {
                    if !self.bye_sent {
                        out.push(Message::Probe(ProbeMsg { kind: ProbeKind::Pong, ..p }));
                    }
                }
                ProbeKind::Pong => {
                    let sent = Duration::from_micros(p.stamp_us);
                    self.link.observe_rtt(now.saturating_sub(sent).as_secs_f64() * 1e3);
                }
                ProbeKind::Ack => {
                    if self.stale_until_ack == Some(p.seq) {
                        self.stale_until_ack = None;
                        self.remote_next = p.seq + 1;
                    }
                }
            },
            Message::Hello => {}
            Message::Bye => self.peer_bye = true,
        }
        self.finish(&mut out);
        Ok(out)
    }

    /// Aggregates the next step if this node is the aggregator and both
    /// drafts are at hand.
    pub fn try_aggregate(&mut self, now: Duration) -> Result<Option<Vec<Message>>, RuntimeError> {
        if self.aggregator != self.me() || self.is_complete() || self.stale_until_ack.is_some() {
            return Ok(None);
        }
        let step = self.log.len() as u32;
        let (Some(own), Some(remote)) = (self.own.front(), self.remote.front()) else {
            return Ok(None);
        };
        if own.step != step || remote.step != step {
            return Err(self.desync(format!("queue heads {} and {} at step {step}", own.step, remote.step)));
        }
        let (dev, cld) = match self.me() {
            Side::Device => (own, remote),
            Side::Cloud => (remote, own),
        };
        let o = aggregate(dev, cld, &AggregationDraws::for_step(self.cfg.seed, step))?;
        let record = TargetRecord { step, token: o.target, accept_l: o.accept_l, accept_r: o.accept_r };
        self.apply_outcome(record, now)?;
        self.stats.aggregated += 1;
        let switch_to = self.schedule();
        let mut out = vec![Message::Target(TargetMsg {
            step,
            target: o.target,
            accept_l: o.accept_l,
            accept_r: o.accept_r,
            switch_to,
        })];
        if let Some(to) = switch_to {
            self.aggregator = to;
            self.stats.switches += 1;
            info!("{} hands aggregation to {} from step {}", self.me(), to, step + 1);
        }
        if !self.is_complete() {
            out.push(ping(step, now));
        }
        self.finish(&mut out);
        Ok(Some(out))
    }

    /// Queue maintenance and preemption for the outcome of the next step.
    fn apply_outcome(&mut self, rec: TargetRecord, now: Duration) -> Result<(), RuntimeError> {
        let step = rec.step;
        if step as usize != self.log.len() {
            return Err(self.desync(format!("outcome for step {step}")));
        }
        let (Some(own), Some(remote)) = (self.own.front(), self.remote.front()) else {
            return Err(self.desync(format!("outcome for step {step} without both drafts")));
        };
        if own.step != step || remote.step != step {
            return Err(self.desync(format!("outcome for step {step} with heads {} and {}", own.step, remote.step)));
        }
        let (dev, cld) = match self.me() {
            Side::Device => (own, remote),
            Side::Cloud => (remote, own),
        };
        let (le_d, le_c) = dist::eta_log_weights(dev.h, cld.h)?;
        let alpha_d = expected_acceptance(&dev.dist, &cld.dist, le_c.exp(), DEFAULT_GAMMA)?;
        let alpha_c = expected_acceptance(&cld.dist, &dev.dist, le_d.exp(), DEFAULT_GAMMA)?;
        self.tracker.update(alpha_d, alpha_c);

        if rec.accepted(self.me()) {
            self.own.pop_front();
        } else {
            self.own.clear();
            self.epoch += 1;
            self.stats.rollbacks += 1;
            let keep = self.decoder.prompt().len() + step as usize;
            let prefix = self.decoder.context()[..keep].to_vec();
            self.decoder.rollback(&prefix, rec.token)?;
        }
        if rec.accepted(self.peer()) {
            self.remote.pop_front();
        } else {
            self.remote.clear();
            if self.aggregator == self.me() {
                self.stale_until_ack = Some(step);
            } else {
                self.remote_next = step + 1;
            }
        }
        self.log.push(rec);
        self.append_times.push(now);
        self.aggregator_history.push(self.aggregator);
        Ok(())
    }

    fn schedule(&self) -> Option<Side> {
        if self.is_complete() {
            return None;
        }
        match self.cfg.policy {
            Policy::Static(_) => None,
            Policy::Alternate(n) => (n > 0 && self.log.len().is_multiple_of(n as usize)).then(|| self.peer()),
            Policy::Auto => {
                let position = self.decoder.prompt().len() + self.log.len();
                let mine = self.models[self.me().index()]?.predict(position as f64);
                let theirs = self.models[self.peer().index()]?.predict(position as f64);
                let costs = CostVector::with_rtt(mine, theirs, self.link.rtt().unwrap_or(0.0));
                let side = choose_side(self.me(), &costs, &self.tracker.perspective(self.me()));
                (side != self.me()).then_some(side)
            }
        }
    }

    /// Folds byte counts into the bandwidth estimate.
    pub fn observe_transfer(&mut self, sent: f64, received: f64, over_ms: f64) {
        self.link.observe_transfer(Direction::Send, sent, over_ms);
        self.link.observe_transfer(Direction::Recv, received, over_ms);
        self.link.refresh_bandwidth();
    }
}

fn ping(step: u32, now: Duration) -> Message {
    Message::Probe(ProbeMsg { seq: step, kind: ProbeKind::Ping, stamp_us: now.as_micros() as u64 })
}

/// One row of the per-token metrics file. `accept_l` is the device flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u32,
    pub token: u32,
    pub accept_l: bool,
    pub accept_r: bool,
    pub latency_ms: f64,
    pub aggregator: Side,
}

#[derive(Debug, Clone)]
pub struct NodeReport {
    pub role: Side,
    pub log: Vec<TargetRecord>,
    pub metrics: Vec<MetricRow>,
    /// Start of retrieval to the first appended target (or to the end of
    /// setup when no token is requested).
    pub ttft_ms: f64,
    pub total_ms: f64,
    pub stats: EngineStats,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub profile: Vec<ProfileRow>,
}

impl NodeReport {
    /// Mean inter-token latency after the first token.
    pub fn steady_latency_ms(&self) -> Option<f64> {
        let m = &self.metrics;
        (m.len() >= 2).then(|| m[1..].iter().map(|r| r.latency_ms).sum::<f64>() / (m.len() - 1) as f64)
    }

    pub fn acceptance(&self, side: Side) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().filter(|r| r.accepted(side)).count() as f64 / self.log.len() as f64
    }
}

pub fn write_metrics<W: io::Write>(w: W, rows: &[MetricRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_log<W: io::Write>(w: W, log: &[TargetRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in log {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log<R: io::Read>(r: R) -> csv::Result<Vec<TargetRecord>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub role: Side,
    pub setup: GenerationSetup,
    pub corpus: Arc<Corpus>,
    pub half: Half,
    pub policy: Policy,
    /// Token-wise synchronized mode: no drafting ahead.
    pub vanilla: bool,
    pub capacity: usize,
    /// Extra time each decode takes, standing in for model compute.
    pub decode_delay: Duration,
    /// One-way delay added to every outgoing message.
    pub link_delay: Duration,
    pub codec: Codec,
    pub timeout: Duration,
}

impl NodeConfig {
    pub fn new(role: Side, setup: GenerationSetup, corpus: Arc<Corpus>) -> Self {
        NodeConfig {
            role,
            setup,
            corpus,
            half: match role {
                Side::Cloud => Half::First,
                Side::Device => Half::Second,
            },
            policy: Policy::Static(Side::Device),
            vanilla: false,
            capacity: DEFAULT_QUEUE_CAPACITY,
            decode_delay: Duration::ZERO,
            link_delay: Duration::ZERO,
            codec: Codec::None,
            timeout: Duration::from_secs(600),
        }
    }

    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            policy: self.policy,
            capacity: if self.vanilla { 1 } else { self.capacity },
            ..EngineConfig::new(self.role, self.setup.seed, self.setup.max_new_tokens)
        }
    }
}

/// Where to find the peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Listen(String),
    Connect(String),
}

impl Endpoint {
    pub fn open(&self, timeout: Duration) -> io::Result<TcpStream> {
        match self {
            Endpoint::Listen(addr) => {
                let listener = TcpListener::bind(addr)?;
                let (s, _) = listener.accept()?;
                s.set_nodelay(true)?;
                Ok(s)
            }
            Endpoint::Connect(addr) => transport::connect_with_retry(addr.as_str(), timeout),
        }
    }
}

struct Shared {
    engine: Engine,
    writer: Option<Writer>,
    error: Option<crate::Error>,
    stop: bool,
}

struct Node {
    state: Mutex<Shared>,
    cv: Condvar,
    epoch: AtomicU64,
    start: Instant,
}

impl Node {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    /// Sends `msgs` in order (under the caller's lock) and wakes everyone.
    fn dispatch(&self, g: &mut Shared, msgs: Result<Vec<Message>, RuntimeError>) {
        match msgs {
            Ok(msgs) => {
                for m in msgs {
                    let sent = g.writer.as_ref().map(|w| w.send(m));
                    if let Some(Err(e)) = sent {
                        g.error.get_or_insert(RuntimeError::from(e).into());
                    }
                }
            }
            Err(e) => {
                g.error.get_or_insert(e.into());
            }
        }
        self.epoch.store(g.engine.epoch(), Ordering::Release);
        self.cv.notify_all();
    }

    fn decode_loop(&self, delay: Duration) {
        loop {
            let job = {
                let mut g = self.lock();
                loop {
                    if g.stop || g.error.is_some() {
                        return;
                    }
                    if let Some(job) = g.engine.next_decode_job() {
                        break job;
                    }
                    g = self.cv.wait(g).unwrap_or_else(|p| p.into_inner());
                }
            };
            let started = Instant::now();
            let epoch = job.epoch;
            let result = job.run();
            if !self.wait_preemptible(started + delay, epoch) {
                continue;
            }
            let elapsed = started.elapsed().as_secs_f64() * 1e3;
            let mut g = self.lock();
            let msgs = result.and_then(|(decoder, mut record, wire)| {
                record.decode_ms = elapsed;
                g.engine.commit_draft(epoch, decoder, record, wire)
            });
            self.dispatch(&mut g, msgs);
        }
    }

    /// Sleeps until `deadline`; false if the epoch moved on meanwhile.
    fn wait_preemptible(&self, deadline: Instant, epoch: u64) -> bool {
        const SLICE: Duration = Duration::from_millis(1);
        loop {
            if self.epoch.load(Ordering::Acquire) != epoch {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(SLICE));
        }
    }

    fn aggregate_loop(&self) {
        let mut g = self.lock();
        loop {
            if g.stop || g.error.is_some() {
                return;
            }
            let now = self.now();
            match g.engine.try_aggregate(now) {
                Ok(Some(msgs)) => self.dispatch(&mut g, Ok(msgs)),
                Ok(None) => {
                    g = self.cv.wait(g).unwrap_or_else(|p| p.into_inner());
                }
                Err(e) => {
                    self.dispatch(&mut g, Err(e));
                    return;
                }
            }
        }
    }

    fn read_loop(&self, stream: TcpStream) -> u64 {
        let mut reader = FrameReader::new(stream);
        let mut sent_mark = 0u64;
        let mut recv_mark = 0u64;
        let mut mark_time = self.now();
        let mut tokens_mark = 0usize;
        loop {
            let msg = reader.recv();
            let mut g = self.lock();
            match msg {
                Ok(Message::Bye) => {
                    let r = g.engine.on_message(Message::Bye, self.now());
                    self.dispatch(&mut g, r);
                    return reader.bytes_read();
                }
                Ok(m) => {
                    let now = self.now();
                    let r = g.engine.on_message(m, now);
                    self.dispatch(&mut g, r);
                    let tokens = g.engine.log().len();
                    if tokens >= tokens_mark + BANDWIDTH_INTERVAL as usize {
                        let sent = g.writer.as_ref().map_or(0, |w| w.bytes_written());
                        let recv = reader.bytes_read();
                        let span = (now - mark_time).as_secs_f64() * 1e3;
                        g.engine.observe_transfer((sent - sent_mark) as f64, (recv - recv_mark) as f64, span);
                        (sent_mark, recv_mark, mark_time, tokens_mark) = (sent, recv, now, tokens);
                    }
                    if g.error.is_some() || g.stop {
                        return reader.bytes_read();
                    }
                }
                Err(e) => {
                    if !g.stop && !g.engine.is_finished() {
                        let partial = g.engine.log().to_vec();
                        g.error.get_or_insert(RuntimeError::PeerDisconnected { partial, reason: e.to_string() }.into());
                    }
                    self.cv.notify_all();
                    return reader.bytes_read();
                }
            }
        }
    }
}

/// Exchanges hellos on a fresh connection.
fn handshake(stream: &TcpStream) -> Result<(), RuntimeError> {
    let mut w = stream.try_clone().map_err(TransportError::from)?;
    transport::send(&mut w, &Message::Hello, Codec::None)?;
    match FrameReader::new(stream).recv()? {
        Message::Hello => Ok(()),
        other => Err(RuntimeError::Desync(format!("expected hello, got {:?}", other.msg_type()))),
    }
}

/// Runs one side of a generation over an established connection.
pub fn run_node(cfg: &NodeConfig, stream: TcpStream) -> crate::Result<NodeReport> {
    stream.set_nodelay(true)?;
    handshake(&stream)?;
    let start = Instant::now();
    let decoder = cfg.setup.decoder(cfg.role, &cfg.corpus, cfg.half)?;
    let setup_done = start.elapsed();
    let mut engine = Engine::new(cfg.engine_config(), decoder)?;
    let writer = Writer::spawn(stream.try_clone()?, cfg.codec, cfg.link_delay);
    let initial = engine.start();
    let node = Arc::new(Node {
        state: Mutex::new(Shared { engine, writer: Some(writer), error: None, stop: false }),
        cv: Condvar::new(),
        epoch: AtomicU64::new(0),
        start,
    });
    {
        let mut g = node.lock();
        node.dispatch(&mut g, Ok(initial));
    }

    let read_stream = stream.try_clone()?;
    let reader = {
        let node = Arc::clone(&node);
        thread::Builder::new().name(format!("{}-reader", cfg.role)).spawn(move || node.read_loop(read_stream))?
    };
    let decoder = {
        let node = Arc::clone(&node);
        let delay = cfg.decode_delay;
        thread::Builder::new().name(format!("{}-decode", cfg.role)).spawn(move || node.decode_loop(delay))?
    };
    let aggregator = {
        let node = Arc::clone(&node);
        thread::Builder::new().name(format!("{}-aggregate", cfg.role)).spawn(move || node.aggregate_loop())?
    };

    let deadline = start + cfg.timeout;
    let mut g = node.lock();
    while !g.engine.is_finished() && g.error.is_none() {
        let now = Instant::now();
        if now >= deadline {
            g.error = Some(RuntimeError::Timeout(cfg.timeout).into());
            break;
        }
        g = node.cv.wait_timeout(g, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
    }
    g.stop = true;
    let failed = g.error.is_some();
    let writer = g.writer.take();
    node.cv.notify_all();
    drop(g);

    if failed {
        let _ = stream.shutdown(Shutdown::Both);
    }
    let flushed = writer.map(|w| {
        let bytes = w.byte_counter();
        (w.close(), bytes.load(Ordering::Relaxed))
    });
    let _ = stream.shutdown(Shutdown::Write);
    let bytes_received = reader.join().unwrap_or(0);
    let _ = decoder.join();
    let _ = aggregator.join();
    let total = start.elapsed();

    let mut g = node.lock();
    if let Some(err) = g.error.take() {
        warn!("{} aborted: {err}", cfg.role);
        return Err(err);
    }
    let bytes_sent = match flushed {
        Some((Err(e), _)) => return Err(RuntimeError::from(e).into()),
        Some((Ok(()), n)) => n,
        None => 0,
    };
    let engine = &g.engine;
    let times = engine.append_times();
    let metrics = engine
        .log()
        .iter()
        .zip(times)
        .zip(engine.aggregator_history())
        .enumerate()
        .map(|(i, ((r, t), agg))| {
            let prev = if i == 0 { Duration::ZERO } else { times[i - 1] };
            MetricRow {
                step: r.step,
                token: r.token,
                accept_l: r.accept_l,
                accept_r: r.accept_r,
                latency_ms: (*t - prev).as_secs_f64() * 1e3,
                aggregator: *agg,
            }
        })
        .collect();
    let ttft = times.first().copied().unwrap_or(setup_done);
    Ok(NodeReport {
        role: cfg.role,
        log: engine.log().to_vec(),
        metrics,
        ttft_ms: ttft.as_secs_f64() * 1e3,
        total_ms: total.as_secs_f64() * 1e3,
        stats: engine.stats().clone(),
        bytes_sent,
        bytes_received,
        profile: std::mem::take(&mut g.engine.profile),
    })
}

/// Runs both sides in this process over a loopback connection.
pub fn run_pair(device: &NodeConfig, cloud: &NodeConfig) -> crate::Result<(NodeReport, NodeReport)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let cloud_cfg = cloud.clone();
    let handle = thread::spawn(move || -> crate::Result<NodeReport> {
        let (s, _) = listener.accept()?;
        run_node(&cloud_cfg, s)
    });
    let stream = transport::connect_with_retry(addr, Duration::from_secs(10))?;
    let dev = run_node(device, stream);
    let cld = handle.join().map_err(|_| RuntimeError::Config("cloud thread panicked".into()))?;
    Ok((dev?, cld?))
}
