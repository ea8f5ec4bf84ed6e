use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dragon::decoder::DecoderState;
use dragon::profiler::{measure_decode, DecodeModel, ProfileRow};
use dragon::reference::GenerationSetup;
use dragon::retrieval::{retrieve, Corpus, Half};
use dragon::runtime::{self, Endpoint, NodeConfig, Policy};
use dragon::scheduler::CostVector;
use dragon::simulator::{self, AcceptanceTrace, NetModel, SimConfig, Strategy};
use dragon::transport::Codec;
use dragon::verify::{self, Suite, VerifyOptions};
use dragon::{Side, Vocab};

#[derive(Parser, Debug)]
#[command(name = "dragon", version, about = "Device-cloud distributed RAG toolkit")]
struct Cli {
    /// Seed shared by every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the command's CSV output here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one side of a live generation over TCP.
    Node(NodeArgs),
    /// Replay acceptance decisions under a latency model.
    Simulate(SimArgs),
    /// Run a statistical or formula check suite.
    Verify(VerifyArgs),
    /// Time both sides over loopback for each prompt in a file.
    Bench(BenchArgs),
    /// Fit a decode latency model from measurements.
    FitProfile(FitArgs),
    /// Write a synthetic corpus file.
    Corpus(CorpusArgs),
}

#[derive(Args, Debug, Clone)]
struct GenArgs {
    /// Corpus file: one record of whitespace-separated token ids per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    /// Documents per side.
    #[arg(long, default_value_t = 4)]
    docs: usize,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    /// Prompt token ids, comma or space separated.
    #[arg(long)]
    prompt: Option<String>,
    /// Seed of the synthetic corpus used when no corpus file is given.
    #[arg(long, default_value_t = 7)]
    corpus_seed: u64,
    /// Token-wise synchronized baseline (no drafting ahead).
    #[arg(long)]
    vanilla: bool,
    /// Aggregation placement: device, cloud, auto or alternate:N.
    #[arg(long, default_value = "device")]
    static_side: Policy,
    #[arg(long, default_value_t = runtime::DEFAULT_QUEUE_CAPACITY)]
    capacity: usize,
    /// Added to each local decode, ms.
    #[arg(long, default_value_t = 0.0)]
    decode_delay_ms: f64,
    /// Added to each outgoing message, ms.
    #[arg(long, default_value_t = 0.0)]
    link_delay_ms: f64,
    #[arg(long, default_value = "none")]
    codec: Codec,
    #[arg(long, default_value_t = 600.0)]
    timeout_s: f64,
}

#[derive(Args, Debug)]
struct NodeArgs {
    #[arg(long)]
    role: Side,
    /// Address to accept the peer on.
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    listen: Option<String>,
    /// Address of the listening peer.
    #[arg(long)]
    connect: Option<String>,
    /// Where to write the target log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Trace CSV with columns step,accept_l,accept_r.
    #[arg(long, conflicts_with = "bernoulli", required_unless_present = "bernoulli")]
    trace: Option<PathBuf>,
    /// Cloud acceptance probability of a synthetic trace.
    #[arg(long)]
    bernoulli: Option<f64>,
    /// Device acceptance probability (defaults to the cloud one).
    #[arg(long)]
    bernoulli_l: Option<f64>,
    /// device, cloud, random[:seed] or dragon.
    #[arg(long, default_value = "dragon")]
    strategy: Strategy,
    #[arg(long, default_value_t = 100)]
    tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    extra_latency: f64,
    #[arg(long, default_value_t = 0.0)]
    base_latency: f64,
    /// Jitter amplitude, ms. Defaults to a fifth of the total latency.
    #[arg(long)]
    jitter: Option<f64>,
    /// bytes per ms; unlimited when omitted.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    c_dec_l: f64,
    #[arg(long, default_value_t = 1.0)]
    c_dec_r: f64,
    #[arg(long, default_value_t = 0.0)]
    c_trans_l: f64,
    #[arg(long, default_value_t = 0.0)]
    c_trans_r: f64,
    /// Per-side queue bound; unbounded when omitted.
    #[arg(long)]
    capacity: Option<usize>,
    /// Decode-time model per side as k_a:k_b:k_c, overriding the constants.
    #[arg(long, num_args = 2, value_names = ["DEVICE", "CLOUD"])]
    decode_model: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Suite name or "all".
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 1_000_000)]
    trials: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// One prompt of token ids per line.
    #[arg(long)]
    prompts: PathBuf,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// CSV with columns t,c; the toy decoder is timed when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    steps: u32,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    docs: usize,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
}

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let res = match &cli.cmd {
        Cmd::Node(a) => node(&cli, a),
        Cmd::Simulate(a) => simulate(&cli, a),
        Cmd::Verify(a) => run_verify(&cli, a),
        Cmd::Bench(a) => bench(&cli, a),
        Cmd::FitProfile(a) => fit_profile(&cli, a),
        Cmd::Corpus(a) => write_corpus(&cli, a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> CliResult {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn parse_tokens(s: &str) -> CliResult<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|_| format!("bad token id '{t}'").into()))
        .collect()
}

fn load_corpus(g: &GenArgs, vocab: Vocab) -> CliResult<Corpus> {
    Ok(match &g.corpus {
        Some(p) => Corpus::load(p, dragon::retrieval::DEFAULT_CHUNK_SIZE, Some(vocab))?,
        None => Corpus::synthetic(vocab, 128, 8, dragon::retrieval::DEFAULT_CHUNK_SIZE, g.corpus_seed),
    })
}

/// Without an explicit prompt, the opening of a seed-chosen document.
fn default_prompt(corpus: &Corpus, seed: u64) -> Vec<u32> {
    let doc = &corpus.docs()[(seed % corpus.len() as u64) as usize];
    doc.tokens()[..doc.tokens().len().min(16)].to_vec()
}

fn node_config(role: Side, g: &GenArgs, corpus: Arc<Corpus>, vocab: Vocab, prompt: Vec<u32>, seed: u64) -> NodeConfig {
    let mut setup = GenerationSetup::new(vocab, prompt, g.max_new_tokens, seed);
    setup.k = g.docs;
    NodeConfig {
        policy: g.static_side,
        vanilla: g.vanilla,
        capacity: g.capacity,
        decode_delay: Duration::from_secs_f64(g.decode_delay_ms.max(0.0) / 1e3),
        link_delay: Duration::from_secs_f64(g.link_delay_ms.max(0.0) / 1e3),
        codec: g.codec,
        timeout: Duration::from_secs_f64(g.timeout_s.max(0.001)),
        ..NodeConfig::new(role, setup, corpus)
    }
}

fn node(cli: &Cli, a: &NodeArgs) -> CliResult<bool> {
    let vocab = Vocab::new(a.gen.vocab)?;
    let corpus = Arc::new(load_corpus(&a.gen, vocab)?);
    let prompt = match &a.gen.prompt {
        Some(p) => parse_tokens(p)?,
        None => default_prompt(&corpus, cli.seed),
    };
    let cfg = node_config(a.role, &a.gen, corpus, vocab, prompt, cli.seed);
    let endpoint = match (&a.listen, &a.connect) {
        (Some(l), _) => Endpoint::Listen(l.clone()),
        (None, Some(c)) => Endpoint::Connect(c.clone()),
        (None, None) => return Err("one of --listen or --connect is required".into()),
    };
    let stream = endpoint.open(cfg.timeout)?;
    let report = runtime::run_node(&cfg, stream)?;
    if let Some(p) = &a.log {
        runtime::write_log(File::create(p)?, &report.log)?;
    }
    runtime::write_metrics(output(&cli.csv)?, &report.metrics)?;
    eprintln!(
        "{}: {} tokens, ttft {:.2} ms, total {:.2} ms, acceptance device {:.3} cloud {:.3}, switches {}, rollbacks {}",
        report.role,
        report.log.len(),
        report.ttft_ms,
        report.total_ms,
        report.acceptance(Side::Device),
        report.acceptance(Side::Cloud),
        report.stats.switches,
        report.stats.rollbacks,
    );
    Ok(true)
}

fn parse_model(s: &str) -> CliResult<DecodeModel> {
    let parts: Vec<f64> = s.split(':').map(str::parse).collect::<Result<_, _>>().map_err(|_| format!("bad model '{s}'"))?;
    match parts[..] {
        [k_a, k_b, k_c] => Ok(DecodeModel { k_a, k_b, k_c }),
        _ => Err(format!("model '{s}' must be k_a:k_b:k_c").into()),
    }
}

#[derive(Serialize)]
struct SimSummary {
    strategy: String,
    tokens: usize,
    total_ms: f64,
    mean_per_token_ms: f64,
    switches: u32,
    acceptance_l: f64,
    acceptance_r: f64,
    vanilla_formula_ms: f64,
}

fn simulate(cli: &Cli, a: &SimArgs) -> CliResult<bool> {
    let trace = match (&a.trace, a.bernoulli) {
        (Some(p), _) => AcceptanceTrace::read_csv(File::open(p)?)?,
        (None, Some(r)) => {
            if !(0.0..=1.0).contains(&r) {
                return Err("--bernoulli must be in [0, 1]".into());
            }
            AcceptanceTrace::bernoulli(a.tokens, a.bernoulli_l.unwrap_or(r), r, cli.seed)
        }
        (None, None) => return Err("one of --trace or --bernoulli is required".into()),
    };
    let costs = CostVector::new(a.c_dec_l, a.c_dec_r, a.c_trans_l, a.c_trans_r);
    if !costs.is_valid() {
        return Err("costs must be finite and non-negative".into());
    }
    let mut net = NetModel::with_extra(a.base_latency, a.extra_latency);
    if let Some(j) = a.jitter {
        net.jitter_amplitude = j;
    }
    if let Some(b) = a.bandwidth {
        net.bandwidth = b;
    }
    let strategy = match a.strategy {
        Strategy::Random(0) => Strategy::Random(cli.seed),
        s => s,
    };
    let mut cfg = SimConfig { capacity: a.capacity, ..SimConfig::new(&costs, net, strategy) };
    if let Some(models) = &a.decode_model {
        for (i, m) in models.iter().enumerate() {
            cfg.decode[i] = simulator::DecodeTiming::Model { model: parse_model(m)?, offset: 0.0 };
        }
    }
    let res = simulator::simulate_with(&trace, &cfg)?;
    if cli.csv.is_some() {
        simulator::write_sim_csv(output(&cli.csv)?, &trace, &res)?;
    }
    let lat = a.base_latency + a.extra_latency;
    let rtt = a.c_trans_l + a.c_trans_r + 2.0 * lat;
    let summary = SimSummary {
        strategy: format!("{:?}", strategy).to_lowercase(),
        tokens: trace.len(),
        total_ms: res.total_time,
        mean_per_token_ms: res.total_time / trace.len() as f64,
        switches: res.switches,
        acceptance_l: trace.acceptance(Side::Device),
        acceptance_r: trace.acceptance(Side::Cloud),
        vanilla_formula_ms: a.c_dec_l.max(a.c_dec_r + rtt),
    };
    write_rows(io::stdout().lock(), &[summary])?;
    Ok(true)
}

fn run_verify(cli: &Cli, a: &VerifyArgs) -> CliResult<bool> {
    let suites: Vec<Suite> = if a.suite == "all" { Suite::ALL.to_vec() } else { vec![a.suite.parse()?] };
    let opts = VerifyOptions { trials: a.trials, seed: cli.seed };
    let mut checks = Vec::new();
    for s in suites {
        let started = Instant::now();
        let got = verify::run_suite(s, &opts);
        log::info!("{s} finished in {:.1} s", started.elapsed().as_secs_f64());
        checks.extend(got);
    }
    write_rows(output(&cli.csv)?, &checks)?;
    Ok(checks.iter().all(|c| c.passed))
}

#[derive(Serialize)]
struct BenchRow {
    prompt: usize,
    tokens: usize,
    ttft_ms: f64,
    per_token_ms: f64,
    total_ms: f64,
    acceptance_l: f64,
    acceptance_r: f64,
    switches: u32,
}

fn bench(cli: &Cli, a: &BenchArgs) -> CliResult<bool> {
    let vocab = Vocab::new(a.gen.vocab)?;
    let corpus = Arc::new(load_corpus(&a.gen, vocab)?);
    let prompts: Vec<Vec<u32>> = BufReader::new(File::open(&a.prompts)?)
        .lines()
        .map(|l| parse_tokens(&l?))
        .filter(|p| !matches!(p, Ok(v) if v.is_empty()))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.into_iter().enumerate() {
        let dev = node_config(Side::Device, &a.gen, corpus.clone(), vocab, prompt.clone(), cli.seed);
        let cld = node_config(Side::Cloud, &a.gen, corpus.clone(), vocab, prompt, cli.seed);
        let (d, _) = runtime::run_pair(&dev, &cld)?;
        rows.push(BenchRow {
            prompt: i,
            tokens: d.log.len(),
            ttft_ms: d.ttft_ms,
            per_token_ms: d.steady_latency_ms().unwrap_or(f64::NAN),
            total_ms: d.total_ms,
            acceptance_l: d.acceptance(Side::Device),
            acceptance_r: d.acceptance(Side::Cloud),
            switches: d.stats.switches,
        });
    }
    write_rows(output(&cli.csv)?, &rows)?;
    Ok(true)
}

#[derive(serde::Deserialize)]
struct Sample {
    t: f64,
    c: f64,
}

fn read_samples(p: &Path) -> CliResult<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(p)?.deserialize::<Sample>() {
        let s = row?;
        out.push((s.t, s.c));
    }
    Ok(out)
}

/// Times the toy decoder at growing context lengths.
fn time_decoder(vocab: Vocab, steps: u32, reps: usize, seed: u64) -> CliResult<Vec<(f64, f64)>> {
    let corpus = Corpus::synthetic(vocab, 64, 8, 64, seed);
    let prompt = default_prompt(&corpus, seed);
    let docs = retrieve(&corpus, &prompt, 4, Half::All)?;
    let max = prompt.len() + steps as usize + 1;
    let mut dec = DecoderState::new(Side::Device, vocab, prompt, docs, seed, max)?;
    let mut ok = Ok(());
    let samples = measure_decode(1..=steps, reps, |t| {
        while dec.step() + 1 < t {
            if let Err(e) = dec.decode_step(dec.draw_for(dec.step())) {
                ok = Err(e);
                return 0.0;
            }
        }
        let mut probe = dec.clone();
        let started = Instant::now();
        let _ = probe.decode_step(probe.draw_for(probe.step()));
        started.elapsed().as_secs_f64() * 1e3
    });
    ok?;
    Ok(samples)
}

fn fit_profile(cli: &Cli, a: &FitArgs) -> CliResult<bool> {
    let samples = match &a.input {
        Some(p) => read_samples(p)?,
        None => time_decoder(Vocab::new(a.vocab)?, a.steps, a.reps, cli.seed)?,
    };
    let model = DecodeModel::fit_offline(&samples)?;
    let rows: Vec<ProfileRow> = samples
        .iter()
        .map(|&(t, c)| ProfileRow { t: t as u32, c_dec_obs: c, c_dec_pred: model.predict(t), rtt_obs: None, bw_obs: None })
        .collect();
    dragon::profiler::write_profile(output(&cli.csv)?, &rows)?;
    eprintln!("k_a={} k_b={} k_c={}", model.k_a, model.k_b, model.k_c);
    Ok(true)
}

fn write_corpus(cli: &Cli, a: &CorpusArgs) -> CliResult<bool> {
    let corpus = Corpus::synthetic(Vocab::new(a.vocab)?, a.docs, a.topics, a.chunk, cli.seed);
    let mut f = io::BufWriter::new(File::create(&a.out)?);
    corpus.write_to(&mut f)?;
    f.flush()?;
    Ok(true)
}
