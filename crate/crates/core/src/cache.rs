//! Offline pre-computation of document representations.
//!
//! Chunk encodings never depend on the query, so they are computed once
//! per corpus and persisted. The cache is semantically transparent:
//! scoring against cached representations reproduces the fresh-path scores
//! bit for bit, and only the interaction work remains at query time.
//!
//! `MRSC1` layout (all integers little-endian, values f64 LE, lossless):
//!
//! ```text
//! magic "MRSC1"
//! fingerprint: 32 bytes          (SHA-256 of the producing model's MRSM1 bytes)
//! d_model: u32
//! doc_count: u64
//! index: doc_count entries of
//!     id_len: u32 | id: UTF-8 | offset: u64   (absolute file offset of the record)
//! records: doc_count entries of
//!     chunk_count: u32 | per chunk: rows: u32 | rows * d_model f64 LE
//! ```
//!
//! A cache refuses to load for a model whose fingerprint differs from the
//! one stamped in the header.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::ledger::OpLedger;
use crate::model::{EncodedDocument, MoresModel, ScoredDoc};
use crate::synth::Document;
use crate::tensor::Tensor;

pub const MRSC1_MAGIC: &[u8; 5] = b"MRSC1";

/// An in-memory representation cache, loadable from and writable to the
/// `MRSC1` container.
#[derive(Debug, Clone)]
pub struct ReprCache {
    fingerprint: [u8; 32],
    d_model: usize,
    /// Insertion order follows the corpus, keeping serialization
    /// deterministic.
    docs: Vec<EncodedDocument>,
    index: HashMap<String, usize>,
}

impl ReprCache {
    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().map(|d| d.doc_id.as_str())
    }

    /// Exact stored representation of one document.
    pub fn lookup(&self, doc_id: &str) -> Result<&EncodedDocument> {
        self.index
            .get(doc_id)
            .map(|&i| &self.docs[i])
            .ok_or_else(|| Error::NotFound(format!("document {doc_id} not in cache")))
    }

    /// Serialize to the `MRSC1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<Vec<u8>> = Vec::with_capacity(self.docs.len());
        for doc in &self.docs {
            let mut rec = Vec::new();
            rec.write_u32::<LittleEndian>(doc.chunks.len() as u32).expect("in-memory");
            for chunk in &doc.chunks {
                rec.write_u32::<LittleEndian>(chunk.rows() as u32).expect("in-memory");
                for v in chunk.data() {
                    rec.write_f64::<LittleEndian>(*v).expect("in-memory");
                }
            }
            records.push(rec);
        }
        let index_len: usize = self
            .docs
            .iter()
            .map(|d| 4 + d.doc_id.len() + 8)
            .sum();
        let header_len = 5 + 32 + 4 + 8;
        let mut offset = (header_len + index_len) as u64;

        let mut out = Vec::new();
        out.extend_from_slice(MRSC1_MAGIC);
        out.extend_from_slice(&self.fingerprint);
        out.write_u32::<LittleEndian>(self.d_model as u32).expect("in-memory");
        out.write_u64::<LittleEndian>(self.docs.len() as u64).expect("in-memory");
        for (doc, rec) in self.docs.iter().zip(&records) {
            out.write_u32::<LittleEndian>(doc.doc_id.len() as u32).expect("in-memory");
            out.extend_from_slice(doc.doc_id.as_bytes());
            out.write_u64::<LittleEndian>(offset).expect("in-memory");
            offset += rec.len() as u64;
        }
        for rec in &records {
            out.extend_from_slice(rec);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Parse a cache and verify it matches the expected model fingerprint.
    pub fn from_bytes(bytes: &[u8], expected_fingerprint: &[u8; 32]) -> Result<Self> {
        let malformed = |msg: String| Error::Malformed { container: "MRSC1", msg };
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MRSC1_MAGIC {
            return Err(malformed(format!("bad magic {magic:?}")));
        }
        let mut fingerprint = [0u8; 32];
        r.read_exact(&mut fingerprint)?;
        if &fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        let d_model = r.read_u32::<LittleEndian>()? as usize;
        let doc_count = r.read_u64::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let id_len = r.read_u32::<LittleEndian>()? as usize;
            if id_len > 4096 {
                return Err(malformed(format!("doc id length {id_len} is implausible")));
            }
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| malformed("doc id is not UTF-8".into()))?;
            let offset = r.read_u64::<LittleEndian>()? as usize;
            entries.push((id, offset));
        }
        let mut docs = Vec::with_capacity(doc_count);
        let mut index = HashMap::with_capacity(doc_count);
        for (id, offset) in entries {
            if offset > bytes.len() {
                return Err(malformed(format!("offset {offset} for {id} beyond file end")));
            }
            let mut rec = &bytes[offset..];
            let chunk_count = rec.read_u32::<LittleEndian>()? as usize;
            let mut chunks = Vec::with_capacity(chunk_count);
            let mut lengths = Vec::with_capacity(chunk_count);
            for _ in 0..chunk_count {
                let rows = rec.read_u32::<LittleEndian>()? as usize;
                let mut data = vec![0.0; rows * d_model];
                rec.read_f64_into::<LittleEndian>(&mut data)?;
                lengths.push(rows);
                chunks.push(Tensor::matrix(rows, d_model, data)?);
            }
            if index.insert(id.clone(), docs.len()).is_some() {
                return Err(malformed(format!("duplicate doc id {id}")));
            }
            docs.push(EncodedDocument {
                doc_id: id,
                chunks,
                lengths,
            });
        }
        Ok(ReprCache {
            fingerprint,
            d_model,
            docs,
            index,
        })
    }

    pub fn load(path: &Path, expected_fingerprint: &[u8; 32]) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_fingerprint)
    }

    /// Build a cache from already-encoded documents (corpus order).
    pub fn from_documents(model: &MoresModel, docs: Vec<EncodedDocument>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate doc id {}", doc.doc_id)));
            }
        }
        Ok(ReprCache {
            fingerprint: model.fingerprint(),
            d_model: model.config.d_model,
            docs,
            index,
        })
    }
}

/// Encode every corpus document and assemble a cache. Duplicate doc ids
/// are rejected; the ledger only accumulates query-independent MACs.
pub fn precompute(corpus: &[Document], model: &MoresModel, ledger: &mut OpLedger) -> Result<ReprCache> {
    let mut docs = Vec::with_capacity(corpus.len());
    for doc in corpus {
        docs.push(model.encode_document(&doc.id, &doc.tokens, ledger)?);
    }
    ReprCache::from_documents(model, docs)
}

/// Re-rank candidates by interaction score using cached representations,
/// optionally truncated to the first `max_chunks` chunks. Scores and
/// ordering match the fresh-encoding path exactly; only query-dependent
/// work is charged to the ledger.
pub fn rank_with_cache(
    query: &[u32],
    doc_ids: &[String],
    cache: &ReprCache,
    model: &MoresModel,
    max_chunks: Option<usize>,
    ledger: &mut OpLedger,
) -> Result<Vec<ScoredDoc>> {
    if doc_ids.is_empty() {
        return Err(Error::InvalidInput("rank_with_cache called with no candidates".into()));
    }
    let mut scored = Vec::with_capacity(doc_ids.len());
    for id in doc_ids {
        let doc = cache.lookup(id)?;
        let score = model.interact_prefix(query, doc, max_chunks, ledger)?;
        scored.push(ScoredDoc {
            doc_id: id.clone(),
            score,
        });
    }
    crate::model::sort_ranking(&mut scored);
    Ok(scored)
}
