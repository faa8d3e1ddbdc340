//! Feature bundles, text processing and corpora.

pub mod bundle;
pub mod corpus;
pub mod synthetic;
pub mod text;

pub use bundle::{read_bundle, write_bundle, CorpusHeader, FeatureBundle};
pub use corpus::{load_corpus, roi_window_count, split_indices, write_corpus, Corpus, Split};
pub use synthetic::{gen_synthetic_corpus, SyntheticSpec};
pub use text::{tokenize, TokenSeq, Vocabulary, BOS, EOS, NUM_SPECIALS, PAD, UNK};
