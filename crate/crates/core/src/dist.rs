//! Log-space token distributions.
//!
//! Everything here works with natural-log probabilities. Interpolation of the
//! two sides' distributions goes through log-sum-exp so that relevance scores
//! of any magnitude stay finite, and the top-p codec is the sparse form that
//! travels on the wire.

use half::f16;
use thiserror::Error;

/// Tolerance on `logsumexp(logp) == 0` accepted by [`LogDist::from_logp`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Slack applied to the cumulative-mass comparison in [`topp_encode`], so that
/// `0.5 + 0.3` still reaches a threshold of `0.8`.
const CUMULATIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("vocabulary must hold at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error("log-probabilities contain NaN at token {0}")]
    NaN(usize),
    #[error("distribution is not normalized: logsumexp = {0}")]
    NotNormalized(f64),
    #[error("non-finite corrected weight {0}")]
    NonFiniteWeight(f64),
    #[error("top-p threshold {0} outside (0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("distribution has no probability mass")]
    Empty,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("compressed distribution is malformed: {0}")]
    Malformed(&'static str),
}

/// Number of token ids; ids are dense in `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self, DistError> {
        if size < 2 {
            return Err(DistError::VocabTooSmall(size));
        }
        Ok(Vocab(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn contains(self, token: u32) -> bool {
        (token as usize) < self.0
    }

    pub fn check(self, token: u32) -> Result<(), DistError> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(DistError::TokenOutOfRange { token, vocab: self.0 })
        }
    }
}

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice
/// or when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// A normalized log-probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDist {
    logp: Vec<f64>,
}

impl LogDist {
    /// Validates and wraps a log-probability vector.
    pub fn from_logp(logp: Vec<f64>) -> Result<Self, DistError> {
        Vocab::new(logp.len())?;
        if let Some(i) = logp.iter().position(|x| x.is_nan()) {
            return Err(DistError::NaN(i));
        }
        let lse = logsumexp(&logp);
        if lse.is_nan() || lse.abs() > NORMALIZATION_TOLERANCE {
            return Err(DistError::NotNormalized(lse));
        }
        Ok(LogDist { logp })
    }

    /// Builds a distribution from non-negative weights, normalizing them.
    pub fn from_weights(weights: &[f64]) -> Result<Self, DistError> {
        Vocab::new(weights.len())?;
        let total: f64 = weights.iter().sum();
        if total.is_nan() || total <= 0.0 || !total.is_finite() {
            return Err(DistError::Empty);
        }
        let log_total = total.ln();
        let logp = weights
            .iter()
            .map(|&w| if w > 0.0 { w.ln() - log_total } else { f64::NEG_INFINITY })
            .collect();
        Ok(LogDist { logp })
    }

    /// Renormalizes arbitrary finite-or-`-inf` log weights.
    pub fn from_log_weights(mut logw: Vec<f64>) -> Result<Self, DistError> {
        Vocab::new(logw.len())?;
        if let Some(i) = logw.iter().position(|x| x.is_nan()) {
            return Err(DistError::NaN(i));
        }
        let lse = logsumexp(&logw);
        if !lse.is_finite() {
            return Err(DistError::Empty);
        }
        logw.iter_mut().for_each(|x| *x -= lse);
        Ok(LogDist { logp: logw })
    }

    pub fn one_hot(vocab: Vocab, token: u32) -> Result<Self, DistError> {
        vocab.check(token)?;
        let mut logp = vec![f64::NEG_INFINITY; vocab.size()];
        logp[token as usize] = 0.0;
        Ok(LogDist { logp })
    }

    pub fn uniform(vocab: Vocab) -> Self {
        let v = -(vocab.size() as f64).ln();
        LogDist { logp: vec![v; vocab.size()] }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab(self.logp.len())
    }

    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    pub fn log_prob(&self, token: u32) -> f64 {
        self.logp.get(token as usize).copied().unwrap_or(f64::NEG_INFINITY)
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.log_prob(token).exp()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|x| x.exp()).collect()
    }

    /// Inverse-CDF sampling over ascending token id with a single uniform draw.
    pub fn sample(&self, u: f64) -> u32 {
        inverse_cdf(self.logp.iter().map(|x| x.exp()), u)
    }

    fn same_vocab(&self, other: &LogDist) -> Result<(), DistError> {
        if self.len() != other.len() {
            return Err(DistError::VocabMismatch { left: self.len(), right: other.len() });
        }
        Ok(())
    }
}

/// Picks the first index whose cumulative weight exceeds `u * total`, scanning
/// ascending ids. Zero-weight entries are never returned; if rounding pushes
/// the target past the end, the last positive-weight index wins.
pub(crate) fn inverse_cdf(weights: impl Iterator<Item = f64> + Clone, u: f64) -> u32 {
    let total: f64 = weights.clone().sum();
    let target = u.clamp(0.0, 1.0) * total;
    let mut acc = 0.0;
    let mut last_positive = 0u32;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i as u32;
        if target < acc {
            return i as u32;
        }
    }
    last_positive
}

/// Log-sum-exp corrected document weight: `log Σ_d exp R(d, x_<t)` for one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedWeight(pub f64);

impl CorrectedWeight {
    pub fn from_scores(scores: &[f64]) -> Self {
        CorrectedWeight(logsumexp(scores))
    }

    pub fn hlog(self) -> f64 {
        self.0
    }
}

/// Log interpolation weights `(log η^l, log η^r)`, the log-softmax of the two
/// corrected weights.
pub fn eta_log_weights(h_l: CorrectedWeight, h_r: CorrectedWeight) -> Result<(f64, f64), DistError> {
    for h in [h_l.0, h_r.0] {
        if !h.is_finite() {
            return Err(DistError::NonFiniteWeight(h));
        }
    }
    let lse = log_add_exp(h_l.0, h_r.0);
    Ok((h_l.0 - lse, h_r.0 - lse))
}

/// The aggregated target distribution `η^l p^l + η^r p^r`, evaluated in log space.
pub fn interpolate_target(
    p_l: &LogDist,
    p_r: &LogDist,
    h_l: CorrectedWeight,
    h_r: CorrectedWeight,
) -> Result<LogDist, DistError> {
    p_l.same_vocab(p_r)?;
    let (le_l, le_r) = eta_log_weights(h_l, h_r)?;
    let mixed: Vec<f64> = p_l
        .logp
        .iter()
        .zip(&p_r.logp)
        .map(|(&a, &b)| log_add_exp(a + le_l, b + le_r))
        .collect();
    LogDist::from_log_weights(mixed)
}

/// `1 - Σ_x min(p_l(x), p_r(x))`, clamped to `[0, 1]`.
pub fn lk_divergence(p_l: &LogDist, p_r: &LogDist) -> Result<f64, DistError> {
    p_l.same_vocab(p_r)?;
    let overlap: f64 = p_l.logp.iter().zip(&p_r.logp).map(|(&a, &b)| a.min(b).exp()).sum();
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

/// Sparse top-p form of a distribution: kept token ids in ascending order with
/// half-precision probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDist {
    pub vocab_size: u32,
    pub pairs: Vec<(u32, f16)>,
}

impl CompressedDist {
    /// Size of the binary layout in bytes.
    pub fn encoded_len(&self) -> usize {
        8 + self.pairs.len() * 6
    }

    pub fn contains(&self, token: u32) -> bool {
        self.pairs.binary_search_by_key(&token, |&(id, _)| id).is_ok()
    }

    /// Appends `count:u32, vocab_size:u32, (token:u32, value:f16)*`, all little-endian.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        for &(id, v) in &self.pairs {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    /// Parses the binary layout, returning the value and the bytes consumed.
    pub fn read_from(buf: &[u8]) -> Result<(Self, usize), DistError> {
        if buf.len() < 8 {
            return Err(DistError::Malformed("truncated header"));
        }
        let count = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let vocab_size = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        let need = 8usize
            .checked_add(count.checked_mul(6).ok_or(DistError::Malformed("count overflow"))?)
            .ok_or(DistError::Malformed("count overflow"))?;
        if buf.len() < need {
            return Err(DistError::Malformed("truncated pairs"));
        }
        let pairs = buf[8..need]
            .chunks_exact(6)
            .map(|c| {
                let id = u32::from_le_bytes(c[0..4].try_into().unwrap());
                let v = f16::from_bits(u16::from_le_bytes(c[4..6].try_into().unwrap()));
                (id, v)
            })
            .collect();
        Ok((CompressedDist { vocab_size, pairs }, need))
    }
}

/// Keeps the smallest highest-probability set whose mass reaches
/// `p_threshold` (inclusive; ties broken by lower id), sorted by id and
/// quantized to binary16.
pub fn topp_encode(p: &LogDist, p_threshold: f64) -> Result<CompressedDist, DistError> {
    if !(p_threshold > 0.0 && p_threshold <= 1.0) {
        return Err(DistError::ThresholdOutOfRange(p_threshold));
    }
    let mut order: Vec<u32> = (0..p.len() as u32).filter(|&i| p.logp[i as usize] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return Err(DistError::Empty);
    }
    order.sort_by(|&a, &b| {
        p.logp[b as usize]
            .partial_cmp(&p.logp[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut cumulative = 0.0;
    for id in order {
        kept.push(id);
        cumulative += p.prob(id);
        if cumulative >= p_threshold - CUMULATIVE_SLACK {
            break;
        }
    }
    kept.sort_unstable();
    let smallest = f16::from_bits(1);
    let pairs = kept
        .into_iter()
        .map(|id| {
            let q = f16::from_f64(p.prob(id));
            (id, if q > f16::ZERO { q } else { smallest })
        })
        .collect();
    Ok(CompressedDist { vocab_size: p.len() as u32, pairs })
}

/// Expands a compressed distribution, renormalizing the kept mass to one and
/// assigning `-inf` to every dropped token.
pub fn topp_decode(c: &CompressedDist) -> Result<LogDist, DistError> {
    let vocab = Vocab::new(c.vocab_size as usize)?;
    if c.pairs.is_empty() {
        return Err(DistError::Empty);
    }
    let mut prev: Option<u32> = None;
    let mut total = 0.0f64;
    for &(id, v) in &c.pairs {
        vocab.check(id)?;
        if prev.is_some_and(|p| id <= p) {
            return Err(DistError::Malformed("token ids not strictly increasing"));
        }
        let v = v.to_f64();
        if !(v > 0.0 && v.is_finite()) {
            return Err(DistError::Malformed("non-positive probability"));
        }
        total += v;
        prev = Some(id);
    }
    let log_total = total.ln();
    let mut logp = vec![f64::NEG_INFINITY; vocab.size()];
    for &(id, v) in &c.pairs {
        logp[id as usize] = v.to_f64().ln() - log_total;
    }
    Ok(LogDist { logp })
}
