//! The modular long-document re-ranker.
//!
//! A document is split into fixed-size chunks which are encoded
//! independently of the query (and of each other) by a shared encoder
//! stack. At query time the query is embedded (a single embedding layer,
//! no query encoder stack), prepended with a CLS row, and run through an
//! interaction stack that self-attends over the query state and
//! cross-attends from the query state to the concatenation of all chunk
//! representations in a single joint attention per layer. The final CLS
//! row is projected to a relevance score.
//!
//! Because chunk encodings never see the query, they can be computed once
//! per document and reused for every query (see [`crate::cache`]). A
//! score-pooling baseline that feeds `CLS;query;SEP;chunk` through the
//! encoder and takes the max over per-chunk scores is included for
//! comparison.
//!
//! Position embeddings restart at 0 inside every chunk, chunks carry no
//! CLS/SEP markers of their own, and only the query path prepends a CLS
//! token. Documents longer than `chunk_size * max_chunks` tokens are head
//! truncated.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ledger::{CostLabel, OpLedger, OpTag, Phase};
use crate::nn::{
    encoder_layer, interaction_layer, EncoderLayerVars, EncoderLayerWeights, InteractionLayerVars,
    InteractionLayerWeights,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Corpus vocabulary size; token ids must lie in `0..vocab_size`.
    /// The embedding table carries two extra reserved rows (CLS, SEP).
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub interaction_layers: usize,
    pub ffw_width: usize,
    /// Chunk size C in tokens.
    pub chunk_size: usize,
    /// Documents are truncated to this many chunks.
    pub max_chunks: usize,
    /// Maximum query length in tokens (excluding the CLS row).
    pub max_query_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be at least 1".into()));
        }
        if self.chunk_size == 0 || self.max_chunks == 0 {
            return Err(Error::Config("chunk_size and max_chunks must be at least 1".into()));
        }
        if self.head_count == 0 || self.d_model % self.head_count != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide model width {}",
                self.head_count, self.d_model
            )));
        }
        if self.encoder_layers == 0 || self.interaction_layers == 0 {
            return Err(Error::Config("layer counts must be at least 1".into()));
        }
        if self.max_query_len == 0 {
            return Err(Error::Config("max_query_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Reserved embedding row for the CLS token.
    pub fn cls_id(&self) -> usize {
        self.vocab_size
    }

    /// Reserved embedding row for the SEP token.
    pub fn sep_id(&self) -> usize {
        self.vocab_size + 1
    }

    /// Token embedding rows: vocabulary plus the two reserved ids.
    pub fn embed_rows(&self) -> usize {
        self.vocab_size + 2
    }

    /// Position table rows; covers a chunk, the CLS+query path, and the
    /// longest `CLS;query;SEP;chunk` baseline sequence.
    pub fn max_positions(&self) -> usize {
        self.chunk_size + self.max_query_len + 2
    }
}

/// A contiguous slice of a document, at most `chunk_size` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: Vec<u32>,
    /// Index of this chunk within its document.
    pub index: usize,
}

/// Split a document into consecutive non-overlapping chunks of exactly
/// `chunk_size` tokens (the last may be shorter), keeping at most
/// `max_chunks` chunks and dropping the tail beyond them.
pub fn chunk_document(tokens: &[u32], config: &ModelConfig) -> Result<Vec<Chunk>> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot chunk an empty document".into()));
    }
    let keep = tokens.len().min(config.chunk_size * config.max_chunks);
    Ok(tokens[..keep]
        .chunks(config.chunk_size)
        .enumerate()
        .map(|(index, slice)| Chunk {
            tokens: slice.to_vec(),
            index,
        })
        .collect())
}

/// Query-independent representation of one document: one `L_j x d_model`
/// matrix per chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument {
    pub doc_id: String,
    pub chunks: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl EncodedDocument {
    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }
}

/// Relevance projection: a bias-free dot product with the final CLS row.
#[derive(Debug, Clone)]
pub struct ScoringHead {
    /// `d_model x 1` projection vector.
    pub v_proj: Tensor,
}

impl ScoringHead {
    pub fn init(d_model: usize, rng: &mut Rng) -> Self {
        ScoringHead {
            v_proj: Tensor::uniform(d_model, 1, 1.0 / (d_model as f64).sqrt(), rng)
                .with_requires_grad(true),
        }
    }
}

/// One scored candidate in a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Full model: shared embeddings, document encoder stack, interaction
/// stack, scoring head.
#[derive(Debug, Clone)]
pub struct MoresModel {
    pub config: ModelConfig,
    /// `(vocab_size + 2) x d_model`; rows `vocab_size` and `vocab_size + 1`
    /// hold the CLS and SEP embeddings.
    pub token_embed: Tensor,
    /// `max_positions x d_model`.
    pub pos_embed: Tensor,
    pub encoder: Vec<EncoderLayerWeights>,
    pub interaction: Vec<InteractionLayerWeights>,
    pub scoring: ScoringHead,
}

/// Graph handles for every weight tensor of a [`MoresModel`], produced by
/// [`MoresModel::bind`]. Handle order matches [`MoresModel::params`].
pub struct ModelVars {
    pub token_embed: Var,
    pub pos_embed: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub interaction: Vec<InteractionLayerVars>,
    pub v_proj: Var,
}

impl ModelVars {
    /// All weight handles in the same order as [`MoresModel::params`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.token_embed, self.pos_embed];
        for layer in &self.encoder {
            out.extend(layer.self_attn.vars());
            out.push(layer.ffw.w1);
            out.push(layer.ffw.w2);
            out.push(layer.ln_attn.gain);
            out.push(layer.ln_attn.bias);
            out.push(layer.ln_ffw.gain);
            out.push(layer.ln_ffw.bias);
        }
        for layer in &self.interaction {
            out.extend(layer.self_attn.vars());
            out.extend(layer.cross_attn.vars());
            out.push(layer.ffw.w1);
            out.push(layer.ffw.w2);
            out.push(layer.ln_self.gain);
            out.push(layer.ln_self.bias);
            out.push(layer.ln_cross.gain);
            out.push(layer.ln_cross.bias);
            out.push(layer.ln_ffw.gain);
            out.push(layer.ln_ffw.bias);
        }
        out.push(self.v_proj);
        out
    }
}

impl MoresModel {
    /// Fresh random initialization; the draw order is fixed, so a seed
    /// fully determines the weights.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        // Token rows start at unit-ish scale so content dominates the raw
        // (un-normalized) query path and attention logits carry token
        // identity from the first step; positions stay a mild additive cue.
        let token_embed = Tensor::uniform(config.embed_rows(), d, 1.0, rng).with_requires_grad(true);
        let pos_embed = Tensor::uniform(config.max_positions(), d, 0.1, rng).with_requires_grad(true);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayerWeights::init(d, config.head_count, config.ffw_width, rng))
            .collect::<Result<Vec<_>>>()?;
        let interaction = (0..config.interaction_layers)
            .map(|_| InteractionLayerWeights::init(d, config.head_count, config.ffw_width, rng))
            .collect::<Result<Vec<_>>>()?;
        let scoring = ScoringHead::init(d, rng);
        Ok(MoresModel {
            config,
            token_embed,
            pos_embed,
            encoder,
            interaction,
            scoring,
        })
    }

    /// Bind every weight into `g` once.
    pub fn bind(&self, g: &mut Graph) -> Result<ModelVars> {
        Ok(ModelVars {
            token_embed: g.leaf(&self.token_embed)?,
            pos_embed: g.leaf(&self.pos_embed)?,
            encoder: self
                .encoder
                .iter()
                .map(|l| l.bind(g))
                .collect::<Result<Vec<_>>>()?,
            interaction: self
                .interaction
                .iter()
                .map(|l| l.bind(g))
                .collect::<Result<Vec<_>>>()?,
            v_proj: g.leaf(&self.scoring.v_proj)?,
        })
    }

    /// All weight tensors, in a fixed documented order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        for layer in &self.encoder {
            out.extend(layer.params());
        }
        for layer in &self.interaction {
            out.extend(layer.params());
        }
        out.push(&self.scoring.v_proj);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embed, &mut self.pos_embed];
        for layer in &mut self.encoder {
            out.extend(layer.params_mut());
        }
        for layer in &mut self.interaction {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.scoring.v_proj);
        out
    }

    /// Dotted names aligned with [`MoresModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["token_embed".to_string(), "pos_embed".to_string()];
        let attn = |prefix: &str| {
            ["wq", "wk", "wv", "wo"]
                .iter()
                .map(|w| format!("{prefix}.{w}"))
                .collect::<Vec<_>>()
        };
        let ln = |prefix: &str| vec![format!("{prefix}.gain"), format!("{prefix}.bias")];
        for i in 0..self.encoder.len() {
            let p = format!("encoder.{i}");
            out.extend(attn(&format!("{p}.self_attn")));
            out.push(format!("{p}.ffw.w1"));
            out.push(format!("{p}.ffw.w2"));
            out.extend(ln(&format!("{p}.ln_attn")));
            out.extend(ln(&format!("{p}.ln_ffw")));
        }
        for i in 0..self.interaction.len() {
            let p = format!("interaction.{i}");
            out.extend(attn(&format!("{p}.self_attn")));
            out.extend(attn(&format!("{p}.cross_attn")));
            out.push(format!("{p}.ffw.w1"));
            out.push(format!("{p}.ffw.w2"));
            out.extend(ln(&format!("{p}.ln_self")));
            out.extend(ln(&format!("{p}.ln_cross")));
            out.extend(ln(&format!("{p}.ln_ffw")));
        }
        out.push("scoring.v_proj".to_string());
        out
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings for a sequence of embedding-row ids.
    pub(crate) fn embed_sequence(&self, g: &mut Graph, vars: &ModelVars, row_ids: &[usize]) -> Result<Var> {
        let tok = g.gather_rows(vars.token_embed, row_ids)?;
        let positions: Vec<usize> = (0..row_ids.len()).collect();
        let pos = g.gather_rows(vars.pos_embed, &positions)?;
        g.add(tok, pos)
    }

    /// Run one chunk through embeddings and the full encoder stack.
    /// Positions restart at 0 for every chunk.
    pub fn encode_chunk_vars(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        chunk: &Chunk,
        phase: Phase,
    ) -> Result<Var> {
        if chunk.tokens.is_empty() {
            return Err(Error::Contract("empty chunk".into()));
        }
        if chunk.tokens.len() > self.config.chunk_size {
            return Err(Error::Contract(format!(
                "chunk of {} tokens exceeds chunk size {}",
                chunk.tokens.len(),
                self.config.chunk_size
            )));
        }
        self.check_tokens(&chunk.tokens)?;
        let row_ids: Vec<usize> = chunk.tokens.iter().map(|&t| t as usize).collect();
        let mut state = self.embed_sequence(g, vars, &row_ids)?;
        let mask = vec![true; row_ids.len()];
        for layer in &vars.encoder {
            state = encoder_layer(g, state, layer, &mask, phase)?;
        }
        Ok(state)
    }

    /// Chunk a document and encode every chunk inside `g`, returning the
    /// concatenated memory.
    pub fn document_memory_vars(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[u32],
        phase: Phase,
    ) -> Result<Var> {
        let chunks = chunk_document(tokens, &self.config)?;
        let encoded: Vec<Var> = chunks
            .iter()
            .map(|c| self.encode_chunk_vars(g, vars, c, phase))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&encoded)
    }

    fn check_query(&self, query: &[u32]) -> Result<()> {
        if query.is_empty() {
            return Err(Error::InvalidInput("empty query".into()));
        }
        if query.len() > self.config.max_query_len {
            return Err(Error::InvalidInput(format!(
                "query of {} tokens exceeds max query length {}",
                query.len(),
                self.config.max_query_len
            )));
        }
        self.check_tokens(query)
    }

    /// Embed `CLS;query`, run the interaction stack against `memory`, and
    /// project the final CLS row to a score.
    pub fn interact_vars(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        query: &[u32],
        memory: Var,
    ) -> Result<Var> {
        self.check_query(query)?;
        let (mem_rows, _) = g.shape(memory);
        let mut row_ids = vec![self.config.cls_id()];
        row_ids.extend(query.iter().map(|&t| t as usize));
        let mut state = self.embed_sequence(g, vars, &row_ids)?;
        let q_mask = vec![true; row_ids.len()];
        let mem_mask = vec![true; mem_rows];
        for layer in &vars.interaction {
            state = interaction_layer(g, state, memory, layer, &q_mask, &mem_mask)?;
        }
        let cls = g.row(state, 0)?;
        g.matmul(
            cls,
            vars.v_proj,
            CostLabel::new(Phase::QueryDependent, OpTag::Projection),
        )
    }

    /// Encode a document offline. The returned representations are a
    /// function of the document tokens and the weights only; all MACs are
    /// logged query-independent.
    pub fn encode_document(
        &self,
        doc_id: &str,
        tokens: &[u32],
        ledger: &mut OpLedger,
    ) -> Result<EncodedDocument> {
        let chunks = chunk_document(tokens, &self.config)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let mut mats = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let out = self.encode_chunk_vars(&mut g, &vars, chunk, Phase::QueryIndependent)?;
            mats.push(g.to_tensor(out));
        }
        ledger.merge(g.ledger());
        Ok(EncodedDocument {
            doc_id: doc_id.to_string(),
            lengths: chunks.iter().map(|c| c.tokens.len()).collect(),
            chunks: mats,
        })
    }

    /// Score a query against a pre-encoded document using all chunks.
    pub fn interact(
        &self,
        query: &[u32],
        doc: &EncodedDocument,
        ledger: &mut OpLedger,
    ) -> Result<f64> {
        self.interact_prefix(query, doc, None, ledger)
    }

    /// Score a query against the first `max_chunks` chunks of a
    /// pre-encoded document (all chunks when `None`). Because chunks are
    /// encoded independently, truncating the representation equals
    /// re-encoding the truncated document.
    pub fn interact_prefix(
        &self,
        query: &[u32],
        doc: &EncodedDocument,
        max_chunks: Option<usize>,
        ledger: &mut OpLedger,
    ) -> Result<f64> {
        if doc.chunks.is_empty() {
            return Err(Error::InvalidInput(format!(
                "document {} has no encoded chunks",
                doc.doc_id
            )));
        }
        let take = max_chunks.unwrap_or(doc.chunks.len()).max(1).min(doc.chunks.len());
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let parts: Vec<Var> = doc.chunks[..take]
            .iter()
            .map(|t| g.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let memory = g.concat_rows(&parts)?;
        let score = self.interact_vars(&mut g, &vars, query, memory)?;
        let value = g.scalar_value(score);
        ledger.merge(g.ledger());
        Ok(value)
    }

    /// The single-sequence scoring path: the whole document (at most one
    /// chunk long) is encoded as one sequence and handed to the interaction
    /// stack directly, with no chunking or concatenation involved.
    pub fn score_single_chunk(
        &self,
        query: &[u32],
        doc_tokens: &[u32],
        ledger: &mut OpLedger,
    ) -> Result<f64> {
        if doc_tokens.is_empty() {
            return Err(Error::InvalidInput("empty document".into()));
        }
        if doc_tokens.len() > self.config.chunk_size {
            return Err(Error::Contract(format!(
                "single-sequence path requires at most {} tokens, got {}",
                self.config.chunk_size,
                doc_tokens.len()
            )));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let chunk = Chunk {
            tokens: doc_tokens.to_vec(),
            index: 0,
        };
        let memory = self.encode_chunk_vars(&mut g, &vars, &chunk, Phase::QueryIndependent)?;
        let score = self.interact_vars(&mut g, &vars, query, memory)?;
        let value = g.scalar_value(score);
        ledger.merge(g.ledger());
        Ok(value)
    }

    /// Score-pooling baseline: each chunk is scored from a
    /// `CLS;query;SEP;chunk` sequence through the encoder stack and the
    /// scoring head; the document score is the max over chunk scores. All
    /// MACs are query-dependent.
    pub fn score_maxp(
        &self,
        query: &[u32],
        doc_tokens: &[u32],
        ledger: &mut OpLedger,
    ) -> Result<f64> {
        let scores = self.maxp_chunk_scores(query, doc_tokens, ledger)?;
        Ok(scores.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Per-chunk scores of the score-pooling baseline, in chunk order.
    pub fn maxp_chunk_scores(
        &self,
        query: &[u32],
        doc_tokens: &[u32],
        ledger: &mut OpLedger,
    ) -> Result<Vec<f64>> {
        self.check_query(query)?;
        let chunks = chunk_document(doc_tokens, &self.config)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g)?;
        let mut scores = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            self.check_tokens(&chunk.tokens)?;
            let mut row_ids = vec![self.config.cls_id()];
            row_ids.extend(query.iter().map(|&t| t as usize));
            row_ids.push(self.config.sep_id());
            row_ids.extend(chunk.tokens.iter().map(|&t| t as usize));
            let mut state = self.embed_sequence(&mut g, &vars, &row_ids)?;
            let mask = vec![true; row_ids.len()];
            for layer in &vars.encoder {
                state = encoder_layer(&mut g, state, layer, &mask, Phase::QueryDependent)?;
            }
            let cls = g.row(state, 0)?;
            let score = g.matmul(
                cls,
                vars.v_proj,
                CostLabel::new(Phase::QueryDependent, OpTag::Projection),
            )?;
            scores.push(g.scalar_value(score));
        }
        ledger.merge(g.ledger());
        Ok(scores)
    }

    /// Re-rank candidates by descending interaction score; ties break by
    /// ascending doc id.
    pub fn rank(
        &self,
        query: &[u32],
        candidates: &[EncodedDocument],
        max_chunks: Option<usize>,
        ledger: &mut OpLedger,
    ) -> Result<Vec<ScoredDoc>> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("rank called with no candidates".into()));
        }
        let mut scored = Vec::with_capacity(candidates.len());
        for doc in candidates {
            let score = self.interact_prefix(query, doc, max_chunks, ledger)?;
            scored.push(ScoredDoc {
                doc_id: doc.doc_id.clone(),
                score,
            });
        }
        sort_ranking(&mut scored);
        Ok(scored)
    }
}

/// Descending score, ties by ascending doc id.
pub fn sort_ranking(scored: &mut [ScoredDoc]) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
}
