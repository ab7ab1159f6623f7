//! Gloss attention for gloss-free sequence translation: a differentiable
//! local attention whose window shifts by learned, query-dependent offsets,
//! a small encoder-decoder translator built on it, the sentence-similarity
//! knowledge-transfer loss, and attention/similarity diagnostics.

pub mod attention;
pub mod data;
pub mod harness;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
