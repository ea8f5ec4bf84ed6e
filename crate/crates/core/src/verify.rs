//! Statistical and formula checks, runnable from the command line.

use std::fmt;
use std::str::FromStr;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregator::{aggregate_with_weights, expected_acceptance, AggregationDraws, DEFAULT_GAMMA};
use crate::dist::{lk_divergence, CompressedDist, LogDist, Vocab};
use crate::reference::{run_reference, GenerationSetup};
use crate::retrieval::{Corpus, Half};
use crate::scheduler::{delta_z, latency_per_token, AcceptanceEstimate, Aggregating, CostVector};
use crate::simulator::{self, AcceptanceTrace, NetModel, SimConfig, Strategy};
use crate::transport::{self, Codec, DraftMsg, Message, ProbeKind, ProbeMsg, SwitchMsg, TargetMsg};
use crate::Side;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Aggregation,
    Monotonicity,
    Scheduling,
    Pipelines,
    Speedup,
    Transport,
    Strategies,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Aggregation,
        Suite::Monotonicity,
        Suite::Scheduling,
        Suite::Pipelines,
        Suite::Speedup,
        Suite::Transport,
        Suite::Strategies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Aggregation => "aggregation",
            Suite::Monotonicity => "monotonicity",
            Suite::Scheduling => "scheduling",
            Suite::Pipelines => "pipelines",
            Suite::Speedup => "speedup",
            Suite::Transport => "transport",
            Suite::Strategies => "strategies",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (one of {})", Suite::ALL.map(Suite::name).join(", ")))
    }
}

/// One measured quantity against its bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(suite: Suite, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { suite: suite.name(), name: name.into(), value, bound, passed: value <= bound }
    }

    fn below(suite: Suite, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { suite: suite.name(), name: name.into(), value, bound, passed: value < bound }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { trials: 1_000_000, seed: 0 }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Vec<Check> {
    match suite {
        Suite::Aggregation => aggregation_suite(25, opts.trials, opts.seed),
        Suite::Monotonicity => monotonicity_suite(1000, opts.seed),
        Suite::Scheduling => scheduling_suite(),
        Suite::Pipelines => pipeline_suite(),
        Suite::Speedup => speedup_suite(10_000, opts.seed),
        Suite::Transport => transport_suite(10_000, opts.seed),
        Suite::Strategies => strategy_suite(50, opts.seed),
    }
}

/// A random distribution over `vocab` tokens with occasional zero entries.
pub fn random_dist(rng: &mut impl Rng, vocab: usize) -> LogDist {
    loop {
        let w: Vec<f64> = (0..vocab).map(|_| if rng.gen::<f64>() < 0.15 { 0.0 } else { rng.gen::<f64>().powi(2) }).collect();
        if let Ok(d) = LogDist::from_weights(&w) {
            return d;
        }
    }
}

/// A random `(p_l, p_r, eta_l)` triple with vocabulary of at most 8.
pub fn random_triple(rng: &mut impl Rng) -> (LogDist, LogDist, f64) {
    let v = rng.gen_range(2..=8);
    (random_dist(rng, v), random_dist(rng, v), rng.gen_range(0.05..0.95))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationStats {
    pub target_freq: Vec<f64>,
    pub accept_l: f64,
    pub accept_r: f64,
}

/// Monte-Carlo law of the aggregated token: drafts drawn from their own
/// distributions, fresh draws per trial.
pub fn empirical_aggregation(p_l: &LogDist, p_r: &LogDist, eta_l: f64, trials: usize, seed: u64) -> AggregationStats {
    let chunks = 16usize;
    let per = trials.div_ceil(chunks);
    let (le_l, le_r) = (eta_l.ln(), (1.0 - eta_l).ln());
    let parts: Vec<(Vec<u64>, u64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut counts = vec![0u64; p_l.len()];
            let (mut al, mut ar) = (0u64, 0u64);
            let n = per.min(trials.saturating_sub(c * per));
            for _ in 0..n {
                let xl = p_l.sample(rng.gen());
                let xr = p_r.sample(rng.gen());
                let draws = AggregationDraws::from_rng(&mut rng);
                let o = aggregate_with_weights((xl, p_l), (xr, p_r), le_l, le_r, 0, &draws).expect("valid triple");
                counts[o.target as usize] += 1;
                al += o.accept_l as u64;
                ar += o.accept_r as u64;
            }
            (counts, al, ar)
        })
        .collect();
    let mut counts = vec![0u64; p_l.len()];
    let (mut al, mut ar) = (0u64, 0u64);
    for (c, a, b) in parts {
        counts.iter_mut().zip(c).for_each(|(x, y)| *x += y);
        al += a;
        ar += b;
    }
    let n = trials.max(1) as f64;
    AggregationStats {
        target_freq: counts.iter().map(|&c| c as f64 / n).collect(),
        accept_l: al as f64 / n,
        accept_r: ar as f64 / n,
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn aggregation_suite(triples: usize, trials: usize, seed: u64) -> Vec<Check> {
    let s = Suite::Aggregation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_tv: f64 = 0.0;
    let mut worst_acc: f64 = 0.0;
    for i in 0..triples {
        let (pl, pr, eta_l) = random_triple(&mut rng);
        let stats = empirical_aggregation(&pl, &pr, eta_l, trials, seed.wrapping_add(i as u64 + 1));
        let mix: Vec<f64> = pl.probs().iter().zip(pr.probs()).map(|(a, b)| eta_l * a + (1.0 - eta_l) * b).collect();
        worst_tv = worst_tv.max(total_variation(&stats.target_freq, &mix));
        let want_l = expected_acceptance(&pl, &pr, 1.0 - eta_l, DEFAULT_GAMMA).expect("valid");
        let want_r = expected_acceptance(&pr, &pl, eta_l, 1.0 - DEFAULT_GAMMA).expect("valid");
        worst_acc = worst_acc.max((stats.accept_l - want_l).abs()).max((stats.accept_r - want_r).abs());
    }

    // Same distribution: the divergence term vanishes.
    let p = LogDist::from_weights(&[0.1, 0.2, 0.3, 0.4]).expect("valid");
    let eta_r = 0.4;
    let same = expected_acceptance(&p, &p, eta_r, DEFAULT_GAMMA).expect("valid") - (1.0 - DEFAULT_GAMMA) * cross(&p, &p, eta_r);
    // Disjoint supports: only the kept-and-selected path survives.
    let a = LogDist::from_weights(&[0.5, 0.5, 0.0, 0.0]).expect("valid");
    let b = LogDist::from_weights(&[0.0, 0.0, 0.3, 0.7]).expect("valid");
    let disjoint = expected_acceptance(&a, &b, eta_r, DEFAULT_GAMMA).expect("valid") - (1.0 - DEFAULT_GAMMA) * cross(&a, &b, eta_r);
    vec![
        Check::below(s, "max_tv_distance", worst_tv, 0.005),
        Check::at_most(s, "max_acceptance_error", worst_acc, 0.01),
        Check::at_most(s, "identical_first_term_error", (same - DEFAULT_GAMMA).abs(), 1e-12),
        Check::at_most(s, "disjoint_first_term_error", (disjoint - DEFAULT_GAMMA * (1.0 - eta_r)).abs(), 1e-12),
    ]
}

fn cross(p_l: &LogDist, p_r: &LogDist, eta_r: f64) -> f64 {
    p_l.probs().iter().zip(p_r.probs()).map(|(a, b)| a * ((1.0 - eta_r) * a + eta_r * b)).sum()
}

/// A pair is degenerate when the acceptance rate cannot move with `γ^l`.
fn non_degenerate(p_l: &LogDist, p_r: &LogDist, eta_r: f64) -> bool {
    let delta = lk_divergence(p_l, p_r).expect("same vocab");
    (1.0 - eta_r * delta) - cross(p_l, p_r, eta_r) > 1e-9
}

fn monotonicity_suite(instances: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6e6f);
    let mut violations = 0usize;
    let mut tested = 0usize;
    while tested < instances {
        let (pl, pr, eta_l) = random_triple(&mut rng);
        let eta_r = 1.0 - eta_l;
        if !non_degenerate(&pl, &pr, eta_r) {
            continue;
        }
        tested += 1;
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20 {
            let a = expected_acceptance(&pl, &pr, eta_r, k as f64 / 20.0).expect("valid");
            if a <= prev {
                violations += 1;
                break;
            }
            prev = a;
        }
    }
    vec![Check::at_most(Suite::Monotonicity, "non_increasing_instances", violations as f64, 0.0)]
}

/// The sweep used for the sign agreement check: 9^5 points.
pub fn scheduling_lattice() -> impl Iterator<Item = (CostVector, AcceptanceEstimate)> {
    let costs = [0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 13.0];
    let rtts = [0.0, 0.2, 0.5, 1.0, 2.0, 4.0, 7.0, 10.0, 20.0];
    let alphas = [0.0, 0.1, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0];
    costs.into_iter().flat_map(move |cl| {
        costs.into_iter().flat_map(move |cr| {
            rtts.into_iter().flat_map(move |rtt| {
                alphas.into_iter().flat_map(move |al| {
                    alphas.into_iter().map(move |ar| (CostVector::with_rtt(cl, cr, rtt), AcceptanceEstimate::new(al, ar)))
                })
            })
        })
    })
}

fn scheduling_suite() -> Vec<Check> {
    let s = Suite::Scheduling;
    let mut points = 0usize;
    let mut disagreements = 0usize;
    for (c, a) in scheduling_lattice() {
        points += 1;
        let dz = delta_z(&c, &a);
        let direct = latency_per_token(Aggregating::Local, &c, &a) - latency_per_token(Aggregating::Remote, &c, &a);
        if dz.abs() >= 1e-9 && dz.signum() != direct.signum() {
            disagreements += 1;
        }
    }
    vec![
        Check { suite: s.name(), name: "lattice_points".into(), value: points as f64, bound: 40_000.0, passed: points >= 40_000 },
        Check::at_most(s, "sign_disagreements", disagreements as f64, 0.0),
    ]
}

/// The four fixed-pattern pipelines with their steady-state latencies.
pub const PIPELINE_CASES: [((bool, bool), [f64; 4], f64); 4] = [
    ((false, true), [1.0, 1.5, 1.2, 1.8], 1.5),
    ((true, false), [2.0, 2.0, 1.5, 1.0], 4.5),
    ((true, true), [1.0, 1.5, 1.5, 1.8], 1.5),
    ((false, false), [2.0, 1.0, 1.5, 1.8], 4.3),
];

fn pipeline_suite() -> Vec<Check> {
    PIPELINE_CASES
        .iter()
        .enumerate()
        .map(|(i, &(pattern, c, want))| {
            let costs = CostVector::new(c[0], c[1], c[2], c[3]);
            let trace = AcceptanceTrace::repeat(pattern, 1000);
            let r = simulator::simulate(&trace, &costs, &NetModel::none(), Strategy::Device).expect("non-empty trace");
            let got = *r.per_token.last().expect("non-empty");
            Check::at_most(Suite::Pipelines, format!("case_{}_abs_error", i + 1), (got - want).abs(), 1e-6)
        })
        .collect()
}

/// `(c_dec_l, rtt, alpha_r)` grid with `c_dec_r = 1`, covering all three
/// closed-form regions.
pub fn speedup_grid() -> (Vec<CostVector>, Vec<f64>) {
    let cls = [0.3, 0.8, 1.5, 2.5, 6.0];
    let rtts = [0.25, 0.5, 1.0, 2.0, 4.0];
    let costs = cls.iter().flat_map(|&cl| rtts.iter().map(move |&rtt| CostVector::with_rtt(cl, 1.0, rtt))).collect();
    (costs, vec![0.0, 0.25, 0.5, 0.75, 0.95])
}

fn speedup_suite(tokens: usize, seed: u64) -> Vec<Check> {
    let s = Suite::Speedup;
    let (costs, alphas) = speedup_grid();
    let points = simulator::speedup_curve(&costs, &alphas, tokens, seed).expect("valid grid");
    let worst = points.iter().map(|p| (p.empirical / p.theoretical - 1.0).abs()).fold(0.0, f64::max);
    let flat = points
        .iter()
        .filter(|p| p.c_dec_l > p.c_dec_r + p.rtt)
        .map(|p| (p.empirical - 1.0).abs())
        .fold(0.0, f64::max);
    vec![Check::at_most(s, "max_relative_error", worst, 0.02), Check::at_most(s, "flat_region_error", flat, 1e-9)]
}

/// A random message of any type, for round-trip testing.
pub fn random_message(rng: &mut impl Rng) -> Message {
    let side = |rng: &mut dyn rand::RngCore| if rng.gen::<bool>() { Side::Device } else { Side::Cloud };
    match rng.gen_range(0..6) {
        0 => {
            let vocab_size = rng.gen_range(1..100_000u32);
            let n = rng.gen_range(0..80usize).min(vocab_size as usize);
            let mut ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..vocab_size)).collect();
            ids.sort_unstable();
            ids.dedup();
            let pairs = ids.into_iter().map(|id| (id, f16::from_bits(rng.gen_range(1..0x7c00)))).collect();
            Message::Draft(DraftMsg {
                step: rng.gen(),
                token: rng.gen(),
                h: rng.gen_range(-1e6..1e6),
                dist: CompressedDist { vocab_size, pairs },
                decode_ms: rng.gen_range(0.0..1e4),
            })
        }
        1 => Message::Target(TargetMsg {
            step: rng.gen(),
            target: rng.gen(),
            accept_l: rng.gen(),
            accept_r: rng.gen(),
            switch_to: if rng.gen() { Some(side(rng)) } else { None },
        }),
        2 => Message::Switch(SwitchMsg { step: rng.gen(), to: side(rng) }),
        3 => Message::Probe(ProbeMsg {
            seq: rng.gen(),
            kind: [ProbeKind::Ping, ProbeKind::Pong, ProbeKind::Ack][rng.gen_range(0..3)],
            stamp_us: rng.gen(),
        }),
        4 => Message::Hello,
        _ => Message::Bye,
    }
}

/// A draft whose distribution keeps 64 tokens of a 50,272-token vocabulary.
pub fn draft_with_64_tokens() -> DraftMsg {
    let pairs = (0..64u32).map(|i| (i * 781, f16::from_f64(1.0 / 64.0))).collect();
    DraftMsg { step: 1234, token: 0, h: -3.25, dist: CompressedDist { vocab_size: 50_272, pairs }, decode_ms: 12.5 }
}

fn transport_suite(messages: usize, seed: u64) -> Vec<Check> {
    let s = Suite::Transport;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616e);
    let mut failures = 0usize;
    for _ in 0..messages {
        let msg = random_message(&mut rng);
        let codec = if rng.gen() { Codec::Lz4 } else { Codec::None };
        let frame = transport::encode(&msg, codec);
        match transport::decode(&frame) {
            Ok(back) if back == msg && transport::encode(&back, codec) == frame => {}
            _ => failures += 1,
        }
    }
    let size = transport::encode(&Message::Draft(draft_with_64_tokens()), Codec::None).len();
    vec![Check::at_most(s, "round_trip_failures", failures as f64, 0.0), Check::below(s, "draft_64_bytes", size as f64, 450.0)]
}

/// Acceptance decisions recorded from reference generations, one per seed.
pub fn recorded_traces(count: usize, tokens: usize, seed: u64) -> Vec<AcceptanceTrace> {
    let vocab = Vocab::new(256).expect("non-zero");
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let corpus = Corpus::synthetic(vocab, 64, 8, 64, s);
            let prompt = corpus.docs()[i % corpus.len()].tokens()[..16].to_vec();
            let setup = GenerationSetup::new(vocab, prompt, tokens, s);
            let log = run_reference(&setup, (&corpus, Half::Second), (&corpus, Half::First)).expect("valid setup");
            AcceptanceTrace::from_log(&log)
        })
        .collect()
}

/// Default cost setting for strategy comparisons: a slow device, a fast
/// cloud and a 2 ms link.
pub fn strategy_config(strategy: Strategy, extra_latency: f64) -> SimConfig {
    let costs = CostVector::new(150.0, 40.0, 0.0, 0.0);
    SimConfig { net: NetModel { bandwidth: 1e4, ..NetModel::with_extra(2.0, extra_latency) }, ..SimConfig::new(&costs, NetModel::none(), strategy) }
}

pub const EXTRA_LATENCIES: [f64; 4] = [0.0, 100.0, 300.0, 500.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub extra_latency: f64,
    pub strategy: String,
    pub mean_total_ms: f64,
}

pub fn compare_strategies(traces: &[AcceptanceTrace], extra: &[f64], seed: u64) -> Vec<StrategyRow> {
    let strategies = [("device", Strategy::Device), ("cloud", Strategy::Cloud), ("random", Strategy::Random(seed)), ("dragon", Strategy::Dragon)];
    let mut rows = Vec::new();
    for &x in extra {
        for (name, strategy) in strategies {
            let totals: Vec<f64> = traces
                .par_iter()
                .enumerate()
                .map(|(i, t)| {
                    let strategy = match strategy {
                        Strategy::Random(s) => Strategy::Random(s.wrapping_add(i as u64)),
                        other => other,
                    };
                    simulator::simulate_with(t, &strategy_config(strategy, x)).expect("non-empty trace").total_time
                })
                .collect();
            rows.push(StrategyRow { extra_latency: x, strategy: name.into(), mean_total_ms: totals.iter().sum::<f64>() / totals.len().max(1) as f64 });
        }
    }
    rows
}

/// Lead of dragon over the best baseline at each latency level.
pub fn dragon_advantage(rows: &[StrategyRow]) -> Vec<(f64, f64)> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.extra_latency).collect();
    levels.dedup();
    levels
        .into_iter()
        .map(|x| {
            let at: Vec<&StrategyRow> = rows.iter().filter(|r| r.extra_latency == x).collect();
            let dragon = at.iter().find(|r| r.strategy == "dragon").map_or(f64::NAN, |r| r.mean_total_ms);
            let best = at.iter().filter(|r| r.strategy != "dragon").map(|r| r.mean_total_ms).fold(f64::INFINITY, f64::min);
            (x, best - dragon)
        })
        .collect()
}

fn strategy_suite(traces: usize, seed: u64) -> Vec<Check> {
    let s = Suite::Strategies;
    let traces = recorded_traces(traces, 100, seed);
    let rows = compare_strategies(&traces, &EXTRA_LATENCIES, seed);
    let mut worst: f64 = f64::NEG_INFINITY;
    for &x in &EXTRA_LATENCIES {
        let dragon = rows.iter().find(|r| r.extra_latency == x && r.strategy == "dragon").expect("present").mean_total_ms;
        for r in rows.iter().filter(|r| r.extra_latency == x && r.strategy != "dragon") {
            worst = worst.max(dragon / r.mean_total_ms - 1.0);
        }
    }
    let adv = dragon_advantage(&rows);
    let drops = adv.windows(2).filter(|w| w[1].1 < w[0].1).count();
    vec![
        Check::at_most(s, "dragon_excess_over_baseline", worst, 0.01),
        Check::at_most(s, "advantage_decreases", drops as f64, 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn small_aggregation_run_is_close() {
        let checks = aggregation_suite(2, 200_000, 5);
        assert!(checks[0].value < 0.01, "{checks:?}");
        assert!(checks[2].passed && checks[3].passed);
    }

    #[test]
    fn cheap_suites_pass() {
        for suite in [Suite::Monotonicity, Suite::Pipelines, Suite::Transport] {
            for c in run_suite(suite, &VerifyOptions::default()) {
                assert!(c.passed, "{c:?}");
            }
        }
    }

    #[test]
    fn lattice_is_large_enough() {
        assert!(scheduling_lattice().count() >= 40_000);
    }
}
