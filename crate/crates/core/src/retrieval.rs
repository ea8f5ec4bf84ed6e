//! Toy lexical retrieval over token-id documents.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::dist::Vocab;
use crate::rng::{self, Domain};

/// Score assigned to a document that shares no token with the query window.
pub const SCORE_FLOOR: f64 = -20.0;

/// Default chunk length in tokens.
pub const DEFAULT_CHUNK_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("chunk size must be at least 1")]
    ZeroChunk,
    #[error("line {line}: bad token `{text}`")]
    BadToken { line: usize, text: String },
    #[error("line {line}: token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { line: usize, token: u32, vocab: usize },
    #[error("document {0} is empty")]
    EmptyDocument(u32),
    #[error("duplicate document id {0}")]
    DuplicateId(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A chunk of at most `chunk_size` tokens, with the statistics the toy
/// decoder and scorer need precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    id: u32,
    tokens: Vec<u32>,
    distinct: Vec<u32>,
    bigrams: BTreeMap<u32, Vec<(u32, u32)>>,
}

impl Document {
    pub fn new(id: u32, tokens: Vec<u32>) -> Result<Self, RetrievalError> {
        if tokens.is_empty() {
            return Err(RetrievalError::EmptyDocument(id));
        }
        let mut distinct = tokens.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for w in tokens.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
        let mut bigrams: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for ((prev, next), n) in counts {
            bigrams.entry(prev).or_default().push((next, n));
        }
        Ok(Document { id, tokens, distinct, bigrams })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Sorted distinct token ids.
    pub fn distinct(&self) -> &[u32] {
        &self.distinct
    }

    /// Successor counts of `prev`, sorted by successor id. Empty if `prev`
    /// never precedes another token in this document.
    pub fn successors(&self, prev: u32) -> &[(u32, u32)] {
        self.bigrams.get(&prev).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of distinct window tokens that also occur in the document.
    pub fn overlap(&self, window: &[u32]) -> usize {
        let mut w = window.to_vec();
        w.sort_unstable();
        w.dedup();
        w.iter().filter(|t| self.distinct.binary_search(t).is_ok()).count()
    }
}

/// `ln(1 + overlap)`, or [`SCORE_FLOOR`] when nothing overlaps.
pub fn relevance_score(window: &[u32], doc: &Document) -> f64 {
    match doc.overlap(window) {
        0 => SCORE_FLOOR,
        n => (1.0 + n as f64).ln(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Arc<Document>>,
    chunk_size: usize,
}

impl Corpus {
    pub fn new(docs: Vec<Document>, chunk_size: usize) -> Result<Self, RetrievalError> {
        if chunk_size == 0 {
            return Err(RetrievalError::ZeroChunk);
        }
        let mut ids: Vec<u32> = docs.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(RetrievalError::DuplicateId(w[0]));
        }
        Ok(Corpus { docs: docs.into_iter().map(Arc::new).collect(), chunk_size })
    }

    /// Parses newline-delimited records of whitespace-separated token ids.
    /// Each record is cut into chunks of `chunk_size` tokens; blank lines are
    /// skipped and chunks are numbered in file order.
    pub fn from_reader(reader: impl BufRead, chunk_size: usize, vocab: Option<Vocab>) -> Result<Self, RetrievalError> {
        if chunk_size == 0 {
            return Err(RetrievalError::ZeroChunk);
        }
        let mut docs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut tokens = Vec::new();
            for text in line.split_whitespace() {
                let token: u32 = text
                    .parse()
                    .map_err(|_| RetrievalError::BadToken { line: lineno + 1, text: text.to_string() })?;
                if let Some(v) = vocab {
                    if !v.contains(token) {
                        return Err(RetrievalError::TokenOutOfRange { line: lineno + 1, token, vocab: v.size() });
                    }
                }
                tokens.push(token);
            }
            for chunk in tokens.chunks(chunk_size) {
                docs.push(Document::new(docs.len() as u32, chunk.to_vec())?);
            }
        }
        Corpus::new(docs, chunk_size)
    }

    pub fn load(path: impl AsRef<Path>, chunk_size: usize, vocab: Option<Vocab>) -> Result<Self, RetrievalError> {
        let file = std::fs::File::open(path)?;
        Corpus::from_reader(std::io::BufReader::new(file), chunk_size, vocab)
    }

    /// Writes one document per line in the corpus file format.
    pub fn write_to(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        for d in &self.docs {
            let line: Vec<String> = d.tokens.iter().map(u32::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// A topical synthetic corpus: each document follows a noisy cycle over a
    /// topic-specific token subset, so documents on the same topic share
    /// bigrams and retrieval has something to find.
    pub fn synthetic(vocab: Vocab, docs: usize, topics: usize, chunk_size: usize, seed: u64) -> Self {
        let topics = topics.max(1);
        let mut rng = rng::stream(seed, Domain::Aux, 0x636f_7270);
        let subset_len = (vocab.size() / 4).clamp(2, vocab.size());
        let topic_tokens: Vec<Vec<u32>> = (0..topics)
            .map(|_| {
                let mut all: Vec<u32> = (0..vocab.size() as u32).collect();
                for i in (1..all.len()).rev() {
                    all.swap(i, rng.gen_range(0..=i));
                }
                all.truncate(subset_len);
                all
            })
            .collect();
        let out = (0..docs)
            .map(|id| {
                let topic = &topic_tokens[id % topics];
                let mut pos = rng.gen_range(0..topic.len());
                let tokens = (0..chunk_size)
                    .map(|_| {
                        let t = topic[pos];
                        pos = if rng.gen::<f64>() < 0.7 { (pos + 1) % topic.len() } else { rng.gen_range(0..topic.len()) };
                        t
                    })
                    .collect();
                Document::new(id as u32, tokens).expect("chunk_size > 0")
            })
            .collect();
        Corpus::new(out, chunk_size.max(1)).expect("synthetic ids are unique")
    }

    pub fn docs(&self) -> &[Arc<Document>] {
        &self.docs
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Which slice of the ranked list a side keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Half {
    /// Ranks `0..k` of the top-`2k` list.
    First,
    /// Ranks `k..2k` of the top-`2k` list.
    Second,
    /// The plain top-`k`.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc: Arc<Document>,
    pub score: f64,
}

/// Ranks documents by [`relevance_score`] against `query` (ties by lower id)
/// and returns the requested slice. May return fewer than `k` documents.
pub fn retrieve(corpus: &Corpus, query: &[u32], k: usize, half: Half) -> Result<Vec<ScoredDoc>, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let mut ranked: Vec<ScoredDoc> = corpus
        .docs
        .iter()
        .map(|d| ScoredDoc { doc: Arc::clone(d), score: relevance_score(query, d) })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.id.cmp(&b.doc.id)));
    let (from, to) = match half {
        Half::All => (0, k),
        Half::First => (0, k),
        Half::Second => (k, 2 * k),
    };
    let to = to.min(ranked.len());
    let from = from.min(to);
    Ok(ranked.drain(from..to).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: u32, tokens: &[u32]) -> Document {
        Document::new(id, tokens.to_vec()).unwrap()
    }

    #[test]
    fn single_document_corpus() {
        let c = Corpus::new(vec![doc(0, &[1, 2, 3])], 64).unwrap();
        let r = retrieve(&c, &[9], 1, Half::All).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].doc.id(), 0);
        assert_eq!(r[0].score, SCORE_FLOOR);
    }

    #[test]
    fn exact_match_ranks_first() {
        let c = Corpus::new(vec![doc(0, &[1, 2]), doc(1, &[5, 6, 7, 8]), doc(2, &[5, 9])], 64).unwrap();
        let r = retrieve(&c, &[5, 6, 7, 8], 3, Half::All).unwrap();
        assert_eq!(r[0].doc.id(), 1);
    }

    #[test]
    fn halves_split_top_2k() {
        // overlap counts 2, 5, 3, 4 with a ten-token query
        let query: Vec<u32> = (0..10).collect();
        let c = Corpus::new(
            vec![doc(0, &[0, 1, 50]), doc(1, &[0, 1, 2, 3, 4]), doc(2, &[5, 6, 7]), doc(3, &[6, 7, 8, 9, 60])],
            64,
        )
        .unwrap();
        // brute force over the scoring rule
        let mut brute: Vec<(f64, u32)> = c.docs().iter().map(|d| (relevance_score(&query, d), d.id())).collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        assert_eq!(brute.iter().map(|x| x.1).collect::<Vec<_>>(), vec![1, 3, 2, 0]);

        let first: Vec<u32> = retrieve(&c, &query, 2, Half::First).unwrap().iter().map(|s| s.doc.id()).collect();
        let second: Vec<u32> = retrieve(&c, &query, 2, Half::Second).unwrap().iter().map(|s| s.doc.id()).collect();
        assert_eq!(first, vec![1, 3]);
        assert_eq!(second, vec![2, 0]);
        assert!((retrieve(&c, &query, 2, Half::First).unwrap()[0].score - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let empty = Corpus::new(vec![], 64).unwrap();
        assert!(matches!(retrieve(&empty, &[1], 1, Half::All), Err(RetrievalError::EmptyCorpus)));
        let c = Corpus::new(vec![doc(0, &[1])], 64).unwrap();
        assert!(matches!(retrieve(&c, &[1], 0, Half::All), Err(RetrievalError::ZeroK)));
        assert!(Corpus::new(vec![doc(0, &[1]), doc(0, &[2])], 64).is_err());
        assert!(Document::new(3, vec![]).is_err());
    }

    #[test]
    fn parse_chunks_records() {
        let text = "1 2 3 4 5\n\n6 7\n";
        let c = Corpus::from_reader(text.as_bytes(), 2, None).unwrap();
        let docs: Vec<Vec<u32>> = c.docs().iter().map(|d| d.tokens().to_vec()).collect();
        assert_eq!(docs, vec![vec![1, 2], vec![3, 4], vec![5], vec![6, 7]]);
        assert!(Corpus::from_reader("1 x".as_bytes(), 2, None).is_err());
        let v = Vocab::new(4).unwrap();
        assert!(matches!(
            Corpus::from_reader("1 9".as_bytes(), 2, Some(v)),
            Err(RetrievalError::TokenOutOfRange { token: 9, .. })
        ));
    }

    #[test]
    fn bigram_table() {
        let d = doc(0, &[3, 4, 3, 4, 3, 5]);
        assert_eq!(d.successors(3), &[(4, 2), (5, 1)]);
        assert_eq!(d.successors(5), &[]);
        assert_eq!(d.distinct(), &[3, 4, 5]);
    }

    #[test]
    fn synthetic_is_deterministic_and_roundtrips() {
        let v = Vocab::new(64).unwrap();
        let a = Corpus::synthetic(v, 20, 4, 32, 9);
        assert_eq!(a, Corpus::synthetic(v, 20, 4, 32, 9));
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Corpus::from_reader(buf.as_slice(), 32, Some(v)).unwrap(), a);
    }
}
