//! Single-process, step-by-step generation.
//!
//! Both decoders draft on the committed prefix, the drafts are aggregated
//! and the target is appended. The distributed runtime must reproduce this
//! sequence exactly; the recorded acceptance flags also serve as replay
//! traces for the simulator.

use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, AggregationDraws};
use crate::decoder::{DecoderError, DecoderState};
use crate::dist::Vocab;
use crate::retrieval::{retrieve, Corpus, Half, DEFAULT_CHUNK_SIZE};
use crate::{Result, Side};

/// Top-p threshold applied to every draft distribution.
pub const DEFAULT_TOP_P: f64 = 0.8;

/// One emitted token. `accept_l` is the device flag, `accept_r` the cloud flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub step: u32,
    pub token: u32,
    pub accept_l: bool,
    pub accept_r: bool,
}

impl TargetRecord {
    pub fn accepted(&self, side: Side) -> bool {
        match side {
            Side::Device => self.accept_l,
            Side::Cloud => self.accept_r,
        }
    }
}

/// Parameters both sides must agree on.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSetup {
    pub vocab: Vocab,
    pub prompt: Vec<u32>,
    /// Documents per side.
    pub k: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub max_context: usize,
    pub top_p: f64,
    pub window: usize,
}

impl GenerationSetup {
    pub fn new(vocab: Vocab, prompt: Vec<u32>, max_new_tokens: usize, seed: u64) -> Self {
        let max_context = prompt.len() + max_new_tokens;
        GenerationSetup {
            vocab,
            prompt,
            k: 4,
            seed,
            max_new_tokens,
            max_context,
            top_p: DEFAULT_TOP_P,
            window: DEFAULT_CHUNK_SIZE,
        }
    }

    /// Retrieves `side`'s documents and builds its decoder.
    pub fn decoder(&self, side: Side, corpus: &Corpus, half: Half) -> Result<DecoderState> {
        if self.prompt.len() + self.max_new_tokens > self.max_context {
            return Err(DecoderError::ContextExhausted {
                position: self.prompt.len() + self.max_new_tokens,
                max: self.max_context,
            }
            .into());
        }
        let docs = retrieve(corpus, &self.prompt, self.k, half)?;
        Ok(DecoderState::new(side, self.vocab, self.prompt.clone(), docs, self.seed, self.max_context)?
            .with_window(self.window)
            .with_top_p(Some(self.top_p)))
    }
}

/// Generates `setup.max_new_tokens` targets sequentially.
pub fn run_reference(setup: &GenerationSetup, device: (&Corpus, Half), cloud: (&Corpus, Half)) -> Result<Vec<TargetRecord>> {
    let mut dev = setup.decoder(Side::Device, device.0, device.1)?;
    let mut cld = setup.decoder(Side::Cloud, cloud.0, cloud.1)?;
    run_decoders(&mut dev, &mut cld, setup.seed, setup.max_new_tokens)
}

/// Sequential loop over two prepared decoders positioned on the same prefix.
pub fn run_decoders(dev: &mut DecoderState, cld: &mut DecoderState, seed: u64, n: usize) -> Result<Vec<TargetRecord>> {
    let mut log = Vec::with_capacity(n);
    for _ in 0..n {
        let step = dev.step();
        let dl = dev.decode_step(dev.draw_for(step))?;
        let dr = cld.decode_step(cld.draw_for(step))?;
        let o = aggregate(&dl, &dr, &AggregationDraws::for_step(seed, step))?;
        for d in [&mut *dev, &mut *cld] {
            let keep = d.position() - 1;
            let prefix = d.context()[..keep].to_vec();
            d.rollback(&prefix, o.target)?;
        }
        log.push(TargetRecord { step, token: o.target, accept_l: o.accept_l, accept_r: o.accept_r });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Document;

    fn setup(n: usize) -> (GenerationSetup, Corpus) {
        let vocab = Vocab::new(64).unwrap();
        let corpus = Corpus::synthetic(vocab, 32, 4, 32, 5);
        let prompt = corpus.docs()[0].tokens()[..8].to_vec();
        (GenerationSetup::new(vocab, prompt, n, 11), corpus)
    }

    #[test]
    fn deterministic_and_gap_free() {
        let (s, c) = setup(30);
        let a = run_reference(&s, (&c, Half::Second), (&c, Half::First)).unwrap();
        let b = run_reference(&s, (&c, Half::Second), (&c, Half::First)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, r)| r.step == i as u32));
    }

    #[test]
    fn identical_sides_accept_everything() {
        let (s, c) = setup(40);
        let log = run_reference(&s, (&c, Half::All), (&c, Half::All)).unwrap();
        assert!(log.iter().all(|r| r.accept_l && r.accept_r));
    }

    #[test]
    fn context_budget_enforced() {
        let (mut s, c) = setup(10);
        s.max_context = s.prompt.len() + 5;
        assert!(run_reference(&s, (&c, Half::All), (&c, Half::All)).is_err());
        let one = Corpus::new(vec![Document::new(0, vec![1, 2, 3]).unwrap()], 8).unwrap();
        s.max_context = 100;
        assert!(run_reference(&s, (&one, Half::Second), (&one, Half::First)).is_err());
    }
}
