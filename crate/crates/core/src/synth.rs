//! Seeded synthetic retrieval data.
//!
//! Documents are uniform random token sequences over an integer
//! vocabulary. Each query is a fresh random token sequence; its positive
//! documents embed the query verbatim (the needle) at a position drawn
//! from a configurable distribution over chunk indices, so relevance can
//! require evidence from any part of a long document. Negative documents
//! are checked to contain no query's needle. Everything is deterministic
//! in the seed.
//!
//! File formats: corpora and query files are one record per line,
//! `id<TAB>space-separated token ids`; qrels and runs use the
//! [`crate::eval`] formats; training groups use the [`crate::train`]
//! format.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::rng::Rng;
use crate::train::GroupRecord;

/// One tokenized record: a document or a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// Where needles land, as a distribution over chunk indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NeedlePlacement {
    /// Uniform over all chunks of the document.
    Uniform,
    /// Uniform over the given chunk indices (0-based).
    Chunks(Vec<usize>),
}

/// Generator settings.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub vocab_size: usize,
    /// Tokens per document.
    pub doc_len: usize,
    /// Chunk size the consumer will use; needles never straddle a chunk
    /// boundary of this size.
    pub chunk_size: usize,
    /// Tokens per query (equals the needle length).
    pub query_len: usize,
    pub placement: NeedlePlacement,
    pub queries: usize,
    /// Candidate pool size per query, positives included.
    pub candidates_per_query: usize,
    pub positives_per_query: usize,
    pub seed: u64,
}

impl SynthConfig {
    fn chunk_count(&self) -> usize {
        self.doc_len.div_ceil(self.chunk_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.doc_len < self.chunk_size {
            return Err(Error::Config(format!(
                "doc_len {} must be at least chunk_size {}",
                self.doc_len, self.chunk_size
            )));
        }
        if self.query_len == 0 || self.query_len > self.chunk_size {
            return Err(Error::Config(format!(
                "query_len {} must lie in 1..=chunk_size {}",
                self.query_len, self.chunk_size
            )));
        }
        if self.queries == 0 {
            return Err(Error::Config("queries must be at least 1".into()));
        }
        if self.positives_per_query == 0 || self.candidates_per_query <= self.positives_per_query {
            return Err(Error::Config(
                "candidates_per_query must exceed positives_per_query >= 1".into(),
            ));
        }
        // Needles must be (practically) unique across queries.
        let space = (self.vocab_size as f64).powi(self.query_len as i32);
        if space < 10.0 * self.queries as f64 {
            return Err(Error::Config(format!(
                "vocabulary of {} with query_len {} cannot guarantee {} unique needles",
                self.vocab_size, self.query_len, self.queries
            )));
        }
        let chunks = self.chunk_count();
        let indices: Vec<usize> = match &self.placement {
            NeedlePlacement::Uniform => (0..chunks).collect(),
            NeedlePlacement::Chunks(list) => {
                if list.is_empty() {
                    return Err(Error::Config("needle placement lists no chunks".into()));
                }
                list.clone()
            }
        };
        for &k in &indices {
            if k >= chunks {
                return Err(Error::Config(format!(
                    "needle chunk index {k} out of range for {chunks} chunks"
                )));
            }
            let chunk_end = ((k + 1) * self.chunk_size).min(self.doc_len);
            if chunk_end < k * self.chunk_size + self.query_len {
                return Err(Error::Config(format!(
                    "chunk {k} is too short to hold a {}-token needle",
                    self.query_len
                )));
            }
        }
        Ok(())
    }
}

/// A generated dataset: candidate corpus, queries, judgments, and training
/// groups (one per positive, carrying the query's negatives).
#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Vec<Document>,
    pub queries: Vec<Document>,
    pub qrels: Qrels,
    pub groups: Vec<GroupRecord>,
}

/// Generate a dataset. Background tokens are uniform over the vocabulary;
/// positives carry their query's needle at a placed offset; negatives are
/// re-drawn until they contain no needle of any query.
pub fn generate_corpus(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let vocab = config.vocab_size;

    // Queries first, so needle checks can cover the complete set.
    let mut needles: HashSet<Vec<u32>> = HashSet::new();
    let mut queries = Vec::with_capacity(config.queries);
    for q in 0..config.queries {
        let mut attempts = 0;
        let tokens = loop {
            let candidate: Vec<u32> = (0..config.query_len)
                .map(|_| rng.below(vocab) as u32)
                .collect();
            if needles.insert(candidate.clone()) {
                break candidate;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config(
                    "could not draw a unique needle; vocabulary too small".into(),
                ));
            }
        };
        queries.push(Document {
            id: format!("q{q}"),
            tokens,
        });
    }

    let chunk_indices: Vec<usize> = match &config.placement {
        NeedlePlacement::Uniform => (0..config.chunk_count()).collect(),
        NeedlePlacement::Chunks(list) => list.clone(),
    };

    let mut corpus = Vec::new();
    let mut qrels = Qrels::new();
    let mut groups = Vec::new();
    for query in &queries {
        let mut pos_ids = Vec::new();
        for p in 0..config.positives_per_query {
            let mut tokens: Vec<u32> = (0..config.doc_len).map(|_| rng.below(vocab) as u32).collect();
            let chunk = chunk_indices[rng.below(chunk_indices.len())];
            let lo = chunk * config.chunk_size;
            let hi = ((chunk + 1) * config.chunk_size).min(config.doc_len) - config.query_len;
            let offset = lo + rng.below(hi - lo + 1);
            tokens[offset..offset + config.query_len].copy_from_slice(&query.tokens);
            let id = format!("{}-p{p}", query.id);
            qrels.insert(&query.id, &id, 1);
            pos_ids.push(id.clone());
            corpus.push(Document { id, tokens });
        }
        let negatives = config.candidates_per_query - config.positives_per_query;
        let mut neg_ids = Vec::with_capacity(negatives);
        for n in 0..negatives {
            let mut attempts = 0;
            let tokens = loop {
                let candidate: Vec<u32> =
                    (0..config.doc_len).map(|_| rng.below(vocab) as u32).collect();
                if !contains_any_needle(&candidate, &needles, config.query_len) {
                    break candidate;
                }
                attempts += 1;
                if attempts > 100 {
                    return Err(Error::Config(
                        "could not draw a needle-free negative; vocabulary too small".into(),
                    ));
                }
            };
            let id = format!("{}-n{n}", query.id);
            neg_ids.push(id.clone());
            corpus.push(Document { id, tokens });
        }
        for pos_id in pos_ids {
            groups.push(GroupRecord {
                qid: query.id.clone(),
                query: query.tokens.clone(),
                pos_doc_id: pos_id,
                neg_doc_ids: neg_ids.clone(),
            });
        }
    }
    Ok(SynthData {
        corpus,
        queries,
        qrels,
        groups,
    })
}

/// True if any window of `len` tokens equals a needle.
pub fn contains_any_needle(tokens: &[u32], needles: &HashSet<Vec<u32>>, len: usize) -> bool {
    if tokens.len() < len {
        return false;
    }
    tokens.windows(len).any(|w| needles.contains(w))
}

/// Parse whitespace-separated integer-token text into ids, rejecting
/// tokens outside the vocabulary.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| {
            let id: u32 = t
                .parse()
                .map_err(|_| Error::InvalidInput(format!("token {t:?} is not an integer id")))?;
            if (id as usize) >= vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token {id} outside vocabulary of size {vocab_size}"
                )));
            }
            Ok(id)
        })
        .collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(ids: &[u32]) -> String {
    ids.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Read an `id<TAB>tokens` file (corpus or queries).
pub fn read_documents<R: BufRead>(r: R) -> Result<Vec<Document>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected id<TAB>tokens".into(),
        })?;
        let tokens = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad token id {t:?}"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        out.push(Document {
            id: id.to_string(),
            tokens,
        });
    }
    Ok(out)
}

/// Write an `id<TAB>tokens` file.
pub fn write_documents<W: Write>(w: &mut W, docs: &[Document]) -> Result<()> {
    for doc in docs {
        writeln!(w, "{}\t{}", doc.id, detokenize(&doc.tokens))?;
    }
    Ok(())
}

/// Index documents by id, rejecting duplicates.
pub fn corpus_map(docs: &[Document]) -> Result<HashMap<String, Vec<u32>>> {
    let mut map = HashMap::with_capacity(docs.len());
    for doc in docs {
        if map.insert(doc.id.clone(), doc.tokens.clone()).is_some() {
            return Err(Error::InvalidInput(format!("duplicate doc id {}", doc.id)));
        }
    }
    Ok(map)
}
