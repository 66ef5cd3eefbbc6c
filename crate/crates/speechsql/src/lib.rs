//! End-to-end speech-to-SQL at desk scale.
//!
//! The crate turns a spoken question plus a database schema directly into a
//! SQL query: a log-mel frontend and CNN speech encoder, a graph encoder over
//! the schema, cosine schema linking plus a cross-modal transformer to fuse
//! the two streams, and a grammar-constrained LSTM decoder that emits a typed
//! action sequence which deterministically prints as SQL. Training (two
//! pre-training objectives and end-to-end fine-tuning), evaluation
//! (query-match accuracy, WER, timing) and a deterministic pseudo-speech
//! synthesizer make the whole pipeline reproducible on a laptop CPU.

pub mod corpus;
pub mod dataset;
pub mod decoder;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod pretrain;
pub mod speech_encoder;
pub mod schema;
pub mod schema_encoder;
pub mod semql;
pub mod tensor;
pub mod train;
