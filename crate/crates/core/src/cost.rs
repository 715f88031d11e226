//! Analytic attention-cost model, verified against the instrumented ledger.
//!
//! For a document of `D` tokens, chunks of `C` tokens (so `ceil(D/C)`
//! chunks), and a query side of `Q` rows, the model predicts the exact
//! self- and cross-attention MAC counts of three systems and checks them
//! against real instrumented forward passes. `Q` counts interaction-side
//! rows including the CLS row, so a measurement run uses `Q - 1` query
//! tokens. Only attention-tagged MACs (score product plus weighted value
//! sum, `2 * rows * keys * d_model` per layer) are modeled; projections and
//! feed-forward work scale linearly with input length on every system and
//! are excluded.
//!
//! Per system, with chunk lengths `l_1..l_n` summing to `D`:
//!
//! * `maxp`: every chunk forms a `CLS;query;SEP;chunk` sequence, so each of
//!   the `E` encoder layers charges `2 * (Q + 1 + l_j)^2 * d` per chunk,
//!   all query-dependent.
//! * `parade`: `maxp` plus `A` aggregator layers of self-attention over the
//!   `n` per-chunk CLS vectors, `2 * n^2 * d` each, query-dependent.
//! * `mores_plus`: the encoder charges `2 * l_j^2 * d` per chunk per layer,
//!   query-independent; each of the `I` interaction layers charges
//!   `2 * Q^2 * d` (query self-attention) plus `2 * Q * D * d` (joint
//!   cross attention over all chunks), query-dependent.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ledger::{CostLabel, OpLedger, OpTag, Phase};
use crate::model::{chunk_document, ModelConfig, MoresModel};
use crate::nn::{encoder_layer, EncoderLayerWeights};
use crate::rng::Rng;

/// The systems Table-style analysis covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Maxp,
    Parade,
    MoresPlus,
}

impl System {
    pub const ALL: [System; 3] = [System::Maxp, System::Parade, System::MoresPlus];
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxp" => Ok(System::Maxp),
            "parade" => Ok(System::Parade),
            "mores_plus" => Ok(System::MoresPlus),
            other => Err(Error::InvalidInput(format!("unknown system {other:?}"))),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            System::Maxp => "maxp",
            System::Parade => "parade",
            System::MoresPlus => "mores_plus",
        };
        write!(f, "{name}")
    }
}

/// One cost-model query point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostQuery {
    pub system: System,
    /// Document length D in tokens.
    pub doc_len: usize,
    /// Query-side rows Q, including the CLS row.
    pub query_rows: usize,
    /// Chunk size C.
    pub chunk_size: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub interaction_layers: usize,
    pub aggregator_layers: usize,
}

impl CostQuery {
    pub fn validate(&self) -> Result<()> {
        if self.doc_len == 0 || self.query_rows == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidInput(
                "cost query needs D, Q, C all at least 1".into(),
            ));
        }
        if self.d_model == 0 || self.head_count == 0 || self.d_model % self.head_count != 0 {
            return Err(Error::InvalidInput(format!(
                "head count {} must divide model width {}",
                self.head_count, self.d_model
            )));
        }
        if self.encoder_layers == 0 || self.interaction_layers == 0 {
            return Err(Error::InvalidInput("layer counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Chunk lengths of a `D`-token document cut into `C`-token chunks.
pub fn chunk_lengths(doc_len: usize, chunk_size: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(doc_len.div_ceil(chunk_size));
    let mut remaining = doc_len;
    while remaining > 0 {
        let l = remaining.min(chunk_size);
        out.push(l);
        remaining -= l;
    }
    out
}

/// Attention MACs split by phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MacBreakdown {
    pub query_dependent: u64,
    pub query_independent: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.query_dependent + self.query_independent
    }
}

/// Exact attention MAC counts for one query point.
pub fn predict_macs(cq: &CostQuery) -> Result<MacBreakdown> {
    cq.validate()?;
    let d = cq.d_model as u64;
    let q = cq.query_rows as u64;
    let lens = chunk_lengths(cq.doc_len, cq.chunk_size);
    let n = lens.len() as u64;
    let self_attn = |rows: u64| 2 * rows * rows * d;

    let maxp_qd = |enc_layers: u64| -> u64 {
        enc_layers
            * lens
                .iter()
                .map(|&l| self_attn(q + 1 + l as u64))
                .sum::<u64>()
    };

    Ok(match cq.system {
        System::Maxp => MacBreakdown {
            query_dependent: maxp_qd(cq.encoder_layers as u64),
            query_independent: 0,
        },
        System::Parade => MacBreakdown {
            query_dependent: maxp_qd(cq.encoder_layers as u64)
                + cq.aggregator_layers as u64 * self_attn(n),
            query_independent: 0,
        },
        System::MoresPlus => {
            let encoder = cq.encoder_layers as u64
                * lens.iter().map(|&l| self_attn(l as u64)).sum::<u64>();
            let interaction = cq.interaction_layers as u64
                * (self_attn(q) + 2 * q * cq.doc_len as u64 * d);
            MacBreakdown {
                query_dependent: interaction,
                query_independent: encoder,
            }
        }
    })
}

fn bench_model_config(cq: &CostQuery) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: cq.d_model,
        head_count: cq.head_count,
        encoder_layers: cq.encoder_layers,
        interaction_layers: cq.interaction_layers,
        ffw_width: 2 * cq.d_model,
        chunk_size: cq.chunk_size,
        max_chunks: cq.doc_len.div_ceil(cq.chunk_size),
        max_query_len: cq.query_rows - 1,
    }
}

/// Attention MACs read off a real instrumented forward pass of the system
/// named by `cq`, on seeded random weights and tokens.
pub fn measure_macs(cq: &CostQuery, seed: u64) -> Result<MacBreakdown> {
    cq.validate()?;
    if cq.query_rows < 2 {
        return Err(Error::InvalidInput(
            "measurement needs at least one query token besides CLS".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let config = bench_model_config(cq);
    let model = MoresModel::init(config.clone(), &mut rng)?;
    let doc: Vec<u32> = (0..cq.doc_len).map(|_| rng.below(config.vocab_size) as u32).collect();
    let query: Vec<u32> = (0..cq.query_rows - 1)
        .map(|_| rng.below(config.vocab_size) as u32)
        .collect();

    let mut ledger = OpLedger::new();
    match cq.system {
        System::MoresPlus => {
            let encoded = model.encode_document("bench", &doc, &mut ledger)?;
            model.interact(&query, &encoded, &mut ledger)?;
        }
        System::Maxp => {
            model.score_maxp(&query, &doc, &mut ledger)?;
        }
        System::Parade => {
            let aggregator: Vec<EncoderLayerWeights> = (0..cq.aggregator_layers)
                .map(|_| {
                    EncoderLayerWeights::init(cq.d_model, cq.head_count, config.ffw_width, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            parade_forward(&model, &aggregator, &query, &doc, &mut ledger)?;
        }
    }
    Ok(MacBreakdown {
        query_dependent: ledger.attention_macs(Phase::QueryDependent),
        query_independent: ledger.attention_macs(Phase::QueryIndependent),
    })
}

/// Representation-aggregation forward: run every `CLS;query;SEP;chunk`
/// sequence through the encoder stack (as the score-pooling baseline
/// does), stack the per-chunk CLS rows, and run them through the
/// aggregator layers. Returns the aggregated relevance score.
pub fn parade_forward(
    model: &MoresModel,
    aggregator: &[EncoderLayerWeights],
    query: &[u32],
    doc_tokens: &[u32],
    ledger: &mut OpLedger,
) -> Result<f64> {
    let chunks = chunk_document(doc_tokens, &model.config)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g)?;
    let mut cls_rows = Vec::with_capacity(chunks.len());
    for chunk in &chunks {
        let mut row_ids = vec![model.config.cls_id()];
        row_ids.extend(query.iter().map(|&t| t as usize));
        row_ids.push(model.config.sep_id());
        row_ids.extend(chunk.tokens.iter().map(|&t| t as usize));
        let mut state = model.embed_sequence(&mut g, &vars, &row_ids)?;
        let mask = vec![true; row_ids.len()];
        for layer in &vars.encoder {
            state = encoder_layer(&mut g, state, layer, &mask, Phase::QueryDependent)?;
        }
        cls_rows.push(g.row(state, 0)?);
    }
    let mut state = g.concat_rows(&cls_rows)?;
    let mask = vec![true; cls_rows.len()];
    for layer in aggregator {
        let layer_vars = layer.bind(&mut g)?;
        state = encoder_layer(&mut g, state, &layer_vars, &mask, Phase::QueryDependent)?;
    }
    let pooled = g.row(state, 0)?;
    let score = g.matmul(
        pooled,
        vars.v_proj,
        CostLabel::new(Phase::QueryDependent, OpTag::Projection),
    )?;
    let value = g.scalar_value(score);
    ledger.merge(g.ledger());
    Ok(value)
}

/// One verification row: predicted vs measured, per phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub system: System,
    pub doc_len: usize,
    pub query_rows: usize,
    pub chunk_size: usize,
    pub predicted: MacBreakdown,
    pub measured: MacBreakdown,
}

impl CostRow {
    /// Absolute prediction error summed over phases; 0 means exact.
    pub fn delta(&self) -> u64 {
        self.predicted.query_dependent.abs_diff(self.measured.query_dependent)
            + self.predicted.query_independent.abs_diff(self.measured.query_independent)
    }
}

/// Predict and measure one query point.
pub fn verify_against_ledger(cq: &CostQuery, seed: u64) -> Result<CostRow> {
    Ok(CostRow {
        system: cq.system,
        doc_len: cq.doc_len,
        query_rows: cq.query_rows,
        chunk_size: cq.chunk_size,
        predicted: predict_macs(cq)?,
        measured: measure_macs(cq, seed)?,
    })
}

/// A sweep over (system, C, Q, D) combinations with shared model dims.
#[derive(Debug, Clone)]
pub struct GridConfig {
    pub systems: Vec<System>,
    pub chunk_sizes: Vec<usize>,
    pub query_rows: Vec<usize>,
    /// Document lengths as multiples of the chunk size.
    pub doc_multipliers: Vec<usize>,
    pub d_model: usize,
    pub head_count: usize,
    pub encoder_layers: usize,
    pub interaction_layers: usize,
    pub aggregator_layers: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            systems: System::ALL.to_vec(),
            chunk_sizes: vec![16, 32],
            query_rows: vec![4, 16],
            doc_multipliers: vec![1, 2, 4, 8],
            d_model: 16,
            head_count: 2,
            encoder_layers: 2,
            interaction_layers: 2,
            aggregator_layers: 1,
            seed: 0,
        }
    }
}

/// Verify every grid point.
pub fn run_grid(grid: &GridConfig) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for &system in &grid.systems {
        for &chunk_size in &grid.chunk_sizes {
            for &query_rows in &grid.query_rows {
                for &mult in &grid.doc_multipliers {
                    let cq = CostQuery {
                        system,
                        doc_len: mult * chunk_size,
                        query_rows,
                        chunk_size,
                        d_model: grid.d_model,
                        head_count: grid.head_count,
                        encoder_layers: grid.encoder_layers,
                        interaction_layers: grid.interaction_layers,
                        aggregator_layers: grid.aggregator_layers,
                    };
                    rows.push(verify_against_ledger(&cq, grid.seed)?);
                }
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "system,D,Q,C,predicted_qd,measured_qd,predicted_qi,measured_qi,delta";

/// Emit the verification report as CSV.
pub fn write_csv<W: Write>(w: &mut W, rows: &[CostRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.system,
            r.doc_len,
            r.query_rows,
            r.chunk_size,
            r.predicted.query_dependent,
            r.measured.query_dependent,
            r.predicted.query_independent,
            r.measured.query_independent,
            r.delta()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(system: System, doc_len: usize, query_rows: usize, chunk_size: usize) -> CostQuery {
        CostQuery {
            system,
            doc_len,
            query_rows,
            chunk_size,
            d_model: 8,
            head_count: 1,
            encoder_layers: 1,
            interaction_layers: 1,
            aggregator_layers: 1,
        }
    }

    #[test]
    fn single_chunk_example_matches_instrumented_ledger() {
        // Q=4, D=16, C=16, d=8, one head, 1 encoder + 1 interaction layer:
        // cross attention 2*Q*D*d = 1024, query self-attention 2*Q^2*d = 256.
        let cq = point(System::MoresPlus, 16, 4, 16);
        let mut rng = Rng::new(3);
        let config = bench_model_config(&cq);
        let model = MoresModel::init(config.clone(), &mut rng).unwrap();
        let doc: Vec<u32> = (0..16).map(|_| rng.below(16) as u32).collect();
        let query: Vec<u32> = (0..3).map(|_| rng.below(16) as u32).collect();
        let mut ledger = OpLedger::new();
        let encoded = model.encode_document("d", &doc, &mut ledger).unwrap();
        model.interact(&query, &encoded, &mut ledger).unwrap();
        assert_eq!(ledger.get(Phase::QueryDependent, OpTag::CrossAttention), 1024);
        assert_eq!(ledger.get(Phase::QueryDependent, OpTag::SelfAttention), 256);

        let predicted = predict_macs(&cq).unwrap();
        assert_eq!(predicted.query_dependent, 1024 + 256);
        assert_eq!(
            predicted.query_independent,
            ledger.attention_macs(Phase::QueryIndependent)
        );
    }

    #[test]
    fn query_independent_cost_is_linear_in_chunks() {
        let one = predict_macs(&point(System::MoresPlus, 16, 4, 16)).unwrap();
        let two = predict_macs(&point(System::MoresPlus, 32, 4, 16)).unwrap();
        assert_eq!(two.query_independent, 2 * one.query_independent);
    }

    #[test]
    fn maxp_has_no_query_independent_work() {
        for d in [16, 32, 64] {
            let p = predict_macs(&point(System::Maxp, d, 4, 16)).unwrap();
            assert_eq!(p.query_independent, 0);
        }
        let m = measure_macs(&point(System::Maxp, 32, 4, 16), 5).unwrap();
        assert_eq!(m.query_independent, 0);
    }

    #[test]
    fn doubling_doc_len_doubles_cross_attention_only() {
        let short = point(System::MoresPlus, 32, 4, 16);
        let long = point(System::MoresPlus, 64, 4, 16);
        let d = 8u64;
        let q = 4u64;
        let cross = |cq: &CostQuery| predict_macs(cq).unwrap().query_dependent - 2 * q * q * d;
        assert_eq!(cross(&long), 2 * cross(&short));
        // The Q^2 self-attention term is unchanged by construction.
        assert_eq!(
            predict_macs(&short).unwrap().query_dependent - cross(&short),
            predict_macs(&long).unwrap().query_dependent - cross(&long)
        );
    }

    #[test]
    fn verification_deltas_are_zero() {
        for system in System::ALL {
            for (d_mult, q) in [(1usize, 4usize), (2, 4), (4, 16)] {
                let cq = CostQuery {
                    d_model: 16,
                    head_count: 2,
                    encoder_layers: 2,
                    interaction_layers: 2,
                    ..point(system, d_mult * 16, q, 16)
                };
                let row = verify_against_ledger(&cq, 11).unwrap();
                assert_eq!(row.delta(), 0, "{system} D={} Q={q}", cq.doc_len);
            }
        }
    }

    #[test]
    fn asymptotic_ordering_holds_for_long_docs() {
        // D >= 4C and Q <= C/8: the joint-attention system's query-dependent
        // work stays below the score-pooling system's total.
        for (c, q) in [(32usize, 4usize), (64, 4), (64, 8)] {
            for mult in [4usize, 8, 16] {
                let mores = predict_macs(&point(System::MoresPlus, mult * c, q, c)).unwrap();
                let maxp = predict_macs(&point(System::Maxp, mult * c, q, c)).unwrap();
                assert!(
                    mores.query_dependent < maxp.total(),
                    "C={c} Q={q} D={}",
                    mult * c
                );
            }
        }
    }

    #[test]
    fn unknown_system_name_is_an_input_error() {
        assert!("bert".parse::<System>().is_err());
        assert_eq!("mores_plus".parse::<System>().unwrap(), System::MoresPlus);
    }

    #[test]
    fn csv_columns_match_header() {
        let row = verify_against_ledger(&point(System::MoresPlus, 16, 4, 16), 1).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
    }
}
