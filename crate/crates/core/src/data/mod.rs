//! Corpus files, multivariate flattening and synthetic series.

mod corpus;
pub mod kernel_synth;
mod s3;

pub use corpus::{load_corpus, parse_corpus, save_corpus, SeriesRecord};
pub use kernel_synth::{kernel_synth, synth_corpus, Kernel};
pub use s3::s3_flatten;
