//! Corpus items, synthetic generation, line-delimited IO, and batching.

mod corpus;
mod io;
mod synth;

pub use corpus::{build_vocab, make_batches, BatchEntry, CorpusItem};
pub use io::{corpus_hash, load_corpus, parse_corpus, read_corpus_str, write_corpus, write_corpus_string, SCHEMA_VERSION};
pub use synth::{generate_corpus, synth_word, CorpusSpec};
