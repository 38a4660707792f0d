//! Multi-view prompting for aspect-based sentiment extraction.
//!
//! Each sentence is decoded once per ordering of its sentiment elements under
//! a grammar that only admits well-formed tuple lists over the sentence's own
//! phrases. Views are ranked by mean token entropy, the most confident ones
//! vote, and the result is scored by exact-match tuple F1.

pub mod backend;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod lexicon;
pub mod multiview;
pub mod prompt;
pub mod runner;
pub mod scheduler;
pub mod trie;
pub mod types;
pub mod vocab;

pub use error::{Error, Result};
