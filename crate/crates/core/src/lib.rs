//! Relational consistency pre-training for visually-rich documents: a small
//! autodiff engine, a synthetic document corpus, a multi-modal transformer
//! encoder, local/global relational consistency objectives, pairwise
//! relation heads and the decoders that turn relation matrices into tables,
//! key-value links and reading orders.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod doc;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rcm;
pub mod relhead;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
