//! End-to-end acceptance checks, one line per criterion.

use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dragon::aggregator::{aggregate_with_weights, expected_acceptance, AggregationDraws};
use dragon::dist::{CompressedDist, LogDist, Vocab};
use dragon::reference::{run_reference, GenerationSetup, TargetRecord};
use dragon::retrieval::{Corpus, Half, DEFAULT_CHUNK_SIZE};
use dragon::runtime::{self, run_pair, NodeConfig};
use dragon::scheduler::{delta_z, AcceptanceEstimate, CostVector};
use dragon::simulator::{simulate, simulate_with, AcceptanceTrace, NetModel, Strategy};
use dragon::transport::{self, Codec, DraftMsg, Message, ProbeKind, ProbeMsg, SwitchMsg, TargetMsg};
use dragon::verify::{recorded_traces, strategy_config};
use dragon::Side;
use half::f16;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("aggregation law", c1_aggregation_law),
        ("acceptance rate", c2_acceptance_rate),
        ("monotone in gamma", c3_monotone),
        ("scheduling sign", c4_scheduling_sign),
        ("pipeline latencies", c5_pipelines),
        ("speedup closed form", c6_speedup),
        ("distributed equals sequential", c7_distributed),
        ("vanilla reduction", c8_vanilla),
        ("strategy comparison", c9_strategies),
        ("transport", c10_transport),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let res = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("{id} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
        std::io::stdout().flush().ok();
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Random triples over vocabularies of at most 8 tokens, with some zeros.

fn random_weights(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..v).map(|_| if rng.gen::<f64>() < 0.2 { 0.0 } else { rng.gen::<f64>() }).collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            return w.iter().map(|x| x / s).collect();
        }
    }
}

struct Triple {
    p_l: Vec<f64>,
    p_r: Vec<f64>,
    eta_l: f64,
}

fn triples(n: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = rng.gen_range(2..=8);
            Triple { p_l: random_weights(&mut rng, v), p_r: random_weights(&mut rng, v), eta_l: rng.gen_range(0.05..0.95) }
        })
        .collect()
}

fn draw(p: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            last = i;
            acc += x;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

struct Empirical {
    freq: Vec<f64>,
    accept_l: f64,
}

fn run_trials(t: &Triple, trials: usize, seed: u64) -> Empirical {
    let pl = LogDist::from_weights(&t.p_l).unwrap();
    let pr = LogDist::from_weights(&t.p_r).unwrap();
    let (ll, lr) = (t.eta_l.ln(), (1.0 - t.eta_l).ln());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; t.p_l.len()];
    let mut acc = 0u64;
    for _ in 0..trials {
        let xl = draw(&t.p_l, rng.gen());
        let xr = draw(&t.p_r, rng.gen());
        let d = AggregationDraws::from_rng(&mut rng);
        let o = aggregate_with_weights((xl, &pl), (xr, &pr), ll, lr, 0, &d).unwrap();
        counts[o.target as usize] += 1;
        acc += o.accept_l as u64;
    }
    Empirical { freq: counts.iter().map(|&c| c as f64 / trials as f64).collect(), accept_l: acc as f64 / trials as f64 }
}

fn shared_runs() -> &'static [(Triple, Empirical)] {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<(Triple, Empirical)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        triples(25, 2024)
            .into_par_iter()
            .enumerate()
            .map(|(i, t)| {
                let e = run_trials(&t, 1_000_000, 77 + i as u64);
                (t, e)
            })
            .collect()
    })
}

fn c1_aggregation_law() -> Outcome {
    let started = Instant::now();
    let runs = shared_runs();
    let elapsed = started.elapsed();
    let mut worst: f64 = 0.0;
    for (t, e) in runs {
        let tv: f64 = t
            .p_l
            .iter()
            .zip(&t.p_r)
            .zip(&e.freq)
            .map(|((a, b), f)| (t.eta_l * a + (1.0 - t.eta_l) * b - f).abs())
            .sum::<f64>()
            / 2.0;
        worst = worst.max(tv);
    }
    ensure(
        worst < 0.005 && elapsed < Duration::from_secs(120),
        format!("max TV {worst:.5} (< 0.005) over 25 triples x 10^6 trials in {:.1} s", elapsed.as_secs_f64()),
    )
}

/// Acceptance of side-l drafts written out term by term.
fn acceptance_oracle(p_l: &[f64], p_r: &[f64], eta_l: f64, gamma_l: f64) -> (f64, f64) {
    let eta_r = 1.0 - eta_l;
    let overlap: f64 = p_l.iter().zip(p_r).map(|(a, b)| a.min(*b)).sum();
    let first = gamma_l * (1.0 - eta_r * (1.0 - overlap));
    let second = (1.0 - gamma_l) * p_l.iter().zip(p_r).map(|(a, b)| a * (eta_l * a + eta_r * b)).sum::<f64>();
    (first, second)
}

fn c2_acceptance_rate() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut formula_gap: f64 = 0.0;
    for (t, e) in shared_runs() {
        let pl = LogDist::from_weights(&t.p_l).unwrap();
        let pr = LogDist::from_weights(&t.p_r).unwrap();
        let lib = expected_acceptance(&pl, &pr, 1.0 - t.eta_l, 0.5).unwrap();
        let (a, b) = acceptance_oracle(&t.p_l, &t.p_r, t.eta_l, 0.5);
        formula_gap = formula_gap.max((lib - a - b).abs());
        worst = worst.max((e.accept_l - lib).abs());
    }

    // Identical distributions: the first term is exactly γ^l.
    let p = vec![0.1, 0.25, 0.05, 0.6];
    let same = Triple { p_l: p.clone(), p_r: p.clone(), eta_l: 0.35 };
    let (first_same, second_same) = acceptance_oracle(&p, &p, 0.35, 0.5);
    let emp_same = run_trials(&same, 1_000_000, 5).accept_l;
    // Disjoint supports: the first term collapses to γ^l η^l.
    let disjoint = Triple { p_l: vec![0.3, 0.7, 0.0, 0.0], p_r: vec![0.0, 0.0, 0.4, 0.6], eta_l: 0.35 };
    let (first_dis, second_dis) = acceptance_oracle(&disjoint.p_l, &disjoint.p_r, 0.35, 0.5);
    let emp_dis = run_trials(&disjoint, 1_000_000, 6).accept_l;

    let extremes_ok = (first_same - 0.5).abs() < 1e-12
        && (first_dis - 0.5 * 0.35).abs() < 1e-12
        && (emp_same - first_same - second_same).abs() < 0.01
        && (emp_dis - first_dis - second_dis).abs() < 0.01;
    ensure(
        worst <= 0.01 && formula_gap < 1e-12 && extremes_ok,
        format!(
            "max |freq - expected| {worst:.5} (<= 0.01); identical: first term {first_same}, rate {emp_same:.4}; disjoint: first term {first_dis} = 0.5 eta_l, rate {emp_dis:.4}"
        ),
    )
}

fn c3_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut tested = 0;
    let mut bad = 0;
    while tested < 1000 {
        let v = rng.gen_range(2..=8);
        let (wl, wr) = (random_weights(&mut rng, v), random_weights(&mut rng, v));
        let eta_l = rng.gen_range(0.05..0.95);
        // Slope in γ^l is (1 - η^r δ) - Σ p_l p_t; zero slope is degenerate.
        let (f1, _) = acceptance_oracle(&wl, &wr, eta_l, 1.0);
        let (_, f0) = acceptance_oracle(&wl, &wr, eta_l, 0.0);
        if f1 - f0 < 1e-6 {
            continue;
        }
        tested += 1;
        let (pl, pr) = (LogDist::from_weights(&wl).unwrap(), LogDist::from_weights(&wr).unwrap());
        let values: Vec<f64> = (0..=50).map(|k| expected_acceptance(&pl, &pr, 1.0 - eta_l, k as f64 / 50.0).unwrap()).collect();
        if values.windows(2).any(|w| w[1] <= w[0]) {
            bad += 1;
        }
    }
    ensure(bad == 0, format!("{bad} of {tested} non-degenerate instances not strictly increasing over 51 gamma values"))
}

/// Expected per-token latency when `own` aggregates and the other side's
/// drafts are accepted with probability `alpha_other`.
fn z(own: f64, other: f64, rtt: f64, alpha_other: f64) -> f64 {
    alpha_other * own.max(other) + (1.0 - alpha_other) * own.max(other + rtt)
}

fn c4_scheduling_sign() -> Outcome {
    let decode = [0.05, 0.3, 0.7, 1.0, 1.4, 2.0, 3.5, 6.0, 10.0, 17.0];
    let rtts = [0.0, 0.1, 0.5, 1.0, 1.5, 3.0, 5.0, 9.0, 15.0, 30.0];
    let alphas = [0.0, 0.05, 0.2, 0.33, 0.5, 0.67, 0.8, 0.95, 1.0];
    let (mut points, mut bad) = (0usize, 0usize);
    for &cl in &decode {
        for &cr in &decode {
            for &rtt in &rtts {
                for &al in &alphas {
                    for &ar in &alphas {
                        points += 1;
                        let dz = delta_z(&CostVector::with_rtt(cl, cr, rtt), &AcceptanceEstimate::new(al, ar));
                        let direct = z(cl, cr, rtt, ar) - z(cr, cl, rtt, al);
                        if dz.abs() >= 1e-9 && dz.signum() != direct.signum() {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    ensure(points >= 40_000 && bad == 0, format!("{bad} disagreements over {points} lattice points"))
}

fn c5_pipelines() -> Outcome {
    // (pattern, c_dec_l, c_dec_r, c_trans_l, c_trans_r, expected)
    let cases = [
        ((false, true), 1.0, 1.5, 1.2, 1.8, 1.5),
        ((true, false), 2.0, 2.0, 1.5, 1.0, 4.5),
        ((true, true), 1.0, 1.5, 1.5, 1.8, 1.5),
        ((false, false), 2.0, 1.0, 1.5, 1.8, 4.3),
    ];
    let mut got = Vec::new();
    for (pattern, cl, cr, tl, tr, want) in cases {
        let trace = AcceptanceTrace::repeat(pattern, 1000);
        let r = simulate(&trace, &CostVector::new(cl, cr, tl, tr), &NetModel::none(), Strategy::Device).unwrap();
        let last = *r.per_token.last().unwrap();
        got.push((last, want));
    }
    let ok = got.iter().all(|(g, w)| (g - w).abs() <= 1e-6);
    ensure(ok, format!("steady state {:?}", got.iter().map(|(g, _)| format!("{g:.6}")).collect::<Vec<_>>()))
}

fn closed_form_speedup(cl: f64, cr: f64, rtt: f64, alpha: f64) -> f64 {
    let inv = if cl <= cr {
        1.0 - alpha * rtt / (rtt + cr)
    } else if cl <= cr + rtt {
        1.0 - (1.0 - cl / (cr + rtt)) * alpha
    } else {
        1.0
    };
    1.0 / inv
}

fn c6_speedup() -> Outcome {
    let cr = 1.0;
    let cls = [0.3, 0.8, 1.5, 2.5, 6.0];
    let rtts = [0.25, 0.5, 1.0, 2.0, 4.0];
    let alphas = [0.0, 0.25, 0.5, 0.75, 0.95];
    let mut grid = Vec::new();
    for &cl in &cls {
        for &rtt in &rtts {
            for &a in &alphas {
                grid.push((cl, rtt, a));
            }
        }
    }
    let results: Vec<(f64, f64, bool)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(cl, rtt, a))| {
            let costs = CostVector::with_rtt(cl, cr, rtt);
            let n = 10_000;
            let vanilla = simulate(&AcceptanceTrace::repeat((false, false), n), &costs, &NetModel::none(), Strategy::Device).unwrap();
            let trace = AcceptanceTrace::bernoulli(n, 0.0, a, 1000 + i as u64);
            let spec = simulate(&trace, &costs, &NetModel::none(), Strategy::Device).unwrap();
            let s = vanilla.total_time / spec.total_time;
            let want = closed_form_speedup(cl, cr, rtt, a);
            (s, want, cl > cr + rtt)
        })
        .collect();
    let worst = results.iter().map(|(s, w, _)| (s / w - 1.0).abs()).fold(0.0, f64::max);
    let flat = results.iter().filter(|r| r.2).map(|(s, _, _)| (s - 1.0).abs()).fold(0.0, f64::max);
    ensure(
        worst <= 0.02 && flat < 1e-9,
        format!("max relative error {worst:.4} (<= 0.02) over {} points; max |S-1| where c_l > c_r + rtt: {flat:.2e}", results.len()),
    )
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn read_log(p: &Path) -> Vec<TargetRecord> {
    runtime::read_log(std::fs::File::open(p).unwrap()).unwrap()
}

fn c7_distributed() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::new(256).unwrap();
    let corpus_path = dir.path().join("corpus.txt");
    Corpus::synthetic(vocab, 64, 8, DEFAULT_CHUNK_SIZE, 3).write_to(std::fs::File::create(&corpus_path).unwrap()).unwrap();
    let corpus = Corpus::load(&corpus_path, DEFAULT_CHUNK_SIZE, Some(vocab)).unwrap();
    let prompt = corpus.docs()[2].tokens()[..16].to_vec();
    let prompt_arg = prompt.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    let (seed, n) = (5u64, 100usize);

    let mut report = Vec::new();
    let mut ok = true;
    for policy in ["device", "auto"] {
        let addr = format!("127.0.0.1:{}", free_port());
        let node = |role: &str, flag: &str, log: &Path| {
            let mut cmd = Command::new(env!("CARGO_BIN_EXE_dragon"));
            cmd.args(["--seed", &seed.to_string(), "--csv", dir.path().join(format!("{role}.csv")).to_str().unwrap()])
                .args(["node", "--role", role, flag, &addr, "--vocab", "256", "--docs", "4"])
                .args(["--corpus", corpus_path.to_str().unwrap(), "--prompt", &prompt_arg])
                .args(["--max-new-tokens", &n.to_string(), "--static-side", policy, "--timeout-s", "60"])
                .args(["--log", log.to_str().unwrap()])
                .stdout(Stdio::null())
                .stderr(Stdio::piped());
            cmd.spawn().unwrap()
        };
        let (cloud_log, device_log) = (dir.path().join("cloud.log"), dir.path().join("device.log"));
        let cloud = node("cloud", "--listen", &cloud_log);
        let device = node("device", "--connect", &device_log);
        let (d, c) = (device.wait_with_output().unwrap(), cloud.wait_with_output().unwrap());
        if !d.status.success() || !c.status.success() {
            return Err(format!(
                "node failed: device {:?} {} / cloud {:?} {}",
                d.status,
                String::from_utf8_lossy(&d.stderr),
                c.status,
                String::from_utf8_lossy(&c.stderr)
            ));
        }
        let mut setup = GenerationSetup::new(vocab, prompt.clone(), n, seed);
        setup.k = 4;
        let want = run_reference(&setup, (&corpus, Half::Second), (&corpus, Half::First)).unwrap();
        let (dl, cl) = (read_log(&device_log), read_log(&cloud_log));
        let same = dl == want && cl == want && want.len() == n;
        ok &= same;
        let acc = want.iter().filter(|r| r.accept_r).count();
        report.push(format!("{policy}: {} tokens, identical {same}, cloud acceptance {acc}/{n}", dl.len()));
    }
    ensure(ok, report.join("; "))
}

fn c8_vanilla() -> Outcome {
    let vocab = Vocab::new(64).unwrap();
    let corpus = Arc::new(Corpus::synthetic(vocab, 32, 2, DEFAULT_CHUNK_SIZE, 3));
    let prompt = corpus.docs()[0].tokens()[..16].to_vec();
    let setup = GenerationSetup::new(vocab, prompt, 20, 0);
    let (c_l, c_r, one_way) = (30.0, 60.0, 100.0);
    let run = |vanilla: bool| {
        let mk = |role: Side, c: f64| NodeConfig {
            vanilla,
            decode_delay: Duration::from_secs_f64(c / 1e3),
            link_delay: Duration::from_secs_f64(one_way / 1e3),
            ..NodeConfig::new(role, setup.clone(), corpus.clone())
        };
        run_pair(&mk(Side::Device, c_l), &mk(Side::Cloud, c_r)).unwrap().0
    };
    let formula = f64::max(c_l, c_r + 2.0 * one_way);
    let van = run(true);
    let spec = run(false);
    let (v, s) = (van.steady_latency_ms().unwrap(), spec.steady_latency_ms().unwrap());
    let alpha = spec.acceptance(Side::Cloud);

    let costs = CostVector::new(c_l, c_r, one_way, one_way);
    let sim = simulate(&AcceptanceTrace::repeat((false, false), 200), &costs, &NetModel::none(), Strategy::Device).unwrap();
    let sim_tail = *sim.per_token.last().unwrap();

    ensure(
        (v / formula - 1.0).abs() <= 0.10 && (sim_tail - formula).abs() < 1e-9 && alpha > 0.5 && s < v,
        format!(
            "vanilla {v:.1} ms vs formula {formula:.1} ms ({:+.1}%), simulated {sim_tail:.1}; speculative {s:.1} ms at cloud acceptance {alpha:.2}",
            100.0 * (v / formula - 1.0)
        ),
    )
}

fn c9_strategies() -> Outcome {
    let traces = recorded_traces(50, 100, 9);
    let levels = [0.0, 100.0, 300.0, 500.0];
    let mut advantages = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut lines = Vec::new();
    for &x in &levels {
        let mean = |s: &dyn Fn(usize) -> Strategy| {
            traces.iter().enumerate().map(|(i, t)| simulate_with(t, &strategy_config(s(i), x)).unwrap().total_time).sum::<f64>()
                / traces.len() as f64
        };
        let device = mean(&|_| Strategy::Device);
        let cloud = mean(&|_| Strategy::Cloud);
        let random = mean(&|i| Strategy::Random(i as u64));
        let dragon = mean(&|_| Strategy::Dragon);
        let best = device.min(cloud).min(random);
        worst_ratio = worst_ratio.max(dragon / best);
        advantages.push(best - dragon);
        lines.push(format!("{x} ms: dragon {dragon:.0} device {device:.0} cloud {cloud:.0} random {random:.0}"));
    }
    let monotone = advantages.windows(2).all(|w| w[1] >= w[0]);
    ensure(worst_ratio <= 1.01 && monotone, format!("{}; lead {:?}", lines.join(", "), advantages.iter().map(|a| a.round()).collect::<Vec<_>>()))
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let side = if rng.gen() { Side::Device } else { Side::Cloud };
    match rng.gen_range(0..6) {
        0 => {
            let vocab_size: u32 = rng.gen_range(1..200_000);
            let mut ids: Vec<u32> = (0..rng.gen_range(0..100)).map(|_| rng.gen_range(0..vocab_size)).collect();
            ids.sort_unstable();
            ids.dedup();
            let pairs = ids.into_iter().map(|i| (i, f16::from_f32(rng.gen_range(1e-4..1.0)))).collect();
            Message::Draft(DraftMsg {
                step: rng.gen(),
                token: rng.gen(),
                h: rng.gen::<f64>() * 1e4 - 5e3,
                dist: CompressedDist { vocab_size, pairs },
                decode_ms: rng.gen(),
            })
        }
        1 => Message::Target(TargetMsg {
            step: rng.gen(),
            target: rng.gen(),
            accept_l: rng.gen(),
            accept_r: rng.gen(),
            switch_to: rng.gen::<bool>().then_some(side),
        }),
        2 => Message::Switch(SwitchMsg { step: rng.gen(), to: side }),
        3 => Message::Probe(ProbeMsg { seq: rng.gen(), kind: [ProbeKind::Ping, ProbeKind::Pong, ProbeKind::Ack][rng.gen_range(0..3)], stamp_us: rng.gen() }),
        4 => Message::Hello,
        _ => Message::Bye,
    }
}

fn c10_transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let codec = if i % 2 == 0 { Codec::None } else { Codec::Lz4 };
        let frame = transport::encode(&m, codec);
        let back = transport::decode(&frame);
        if !matches!(&back, Ok(b) if *b == m) || transport::encode(back.as_ref().unwrap(), codec) != frame {
            bad += 1;
        }
    }
    let pairs = (0..64u32).map(|i| (i * 700 + 3, f16::from_f32(0.0125))).collect();
    let draft = Message::Draft(DraftMsg { step: 9, token: 3, h: -1.5, dist: CompressedDist { vocab_size: 50_272, pairs }, decode_ms: 20.0 });
    let size = transport::encode(&draft, Codec::None).len();
    // Header, step, token, h, decode time, count and vocabulary, then 64 pairs.
    let layout = 6 + 4 + 4 + 8 + 4 + 8 + 64 * 6;
    ensure(bad == 0 && size < 450 && size == layout, format!("{bad} round-trip failures in 10000; 64-token draft is {size} bytes"))
}
