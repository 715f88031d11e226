//! Modular long-document re-ranking, desk scale.
//!
//! The model encodes document chunks independently of the query, caches
//! those representations offline, and scores query-document pairs with an
//! interaction stack that cross-attends from the query to all chunks at
//! once. Everything runs on a small f64 autodiff engine whose forward
//! passes double as an exact attention-operation counter, so the analytic
//! cost model can be checked against measured counts rather than argued.
//!
//! Module map:
//!
//! * [`tensor`], [`graph`], [`ledger`], [`rng`] — numeric substrate:
//!   tensors, reverse-mode differentiation, MAC accounting, seeded
//!   randomness.
//! * [`nn`] — attention, encoder and interaction layers.
//! * [`model`] — chunking, the re-ranker, the score-pooling baseline,
//!   ranking.
//! * [`checkpoint`] — binary weight containers and encoder-decoder import.
//! * [`train`] — group-contrastive loss, Adam, the training loop, gradient
//!   checking.
//! * [`cache`] — offline representation pre-computation and lookup.
//! * [`cost`] — analytic attention-cost formulas and ledger verification.
//! * [`eval`] — nDCG/MRR and TREC run/qrels I/O.
//! * [`synth`] — seeded needle-placement data generation.

pub mod cache;
pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ledger;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use ledger::{CostLabel, OpLedger, OpTag, Phase};
pub use model::{chunk_document, EncodedDocument, ModelConfig, MoresModel, ScoredDoc};
pub use rng::Rng;
pub use tensor::Tensor;
