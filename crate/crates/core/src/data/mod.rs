//! Synthetic segmented-feature corpora, tokenization, batching, the
//! bag-of-words similarity oracle, and on-disk corpus layout.

mod corpus;
mod features;
mod vocab;

pub use corpus::{
    batch_and_mask, compute_similarity_oracle, generate_corpus, read_corpus, read_split, similarity_path,
    write_corpus, Batch, Corpus, GoldSegmentation, Sample, Segment, Split, SyntheticSpec, SPEC_KEYS,
};
pub use features::{read_features, write_features, FeatureError, FeatureSequence};
pub use vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("config: {0}")]
    Config(String),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
