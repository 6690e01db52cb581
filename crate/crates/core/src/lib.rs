pub mod classifier;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod gaussian;
pub mod gmm;
pub mod hmm;
pub mod lm;
pub mod rng;
pub mod system;
pub mod tying;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/gmm-hmm.md")]
    mod gmm_hmm {}
    #[doc = include_str!("../../../book/src/tying.md")]
    mod tying {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    mod classifier {}
    #[doc = include_str!("../../../book/src/language-models.md")]
    mod language_models {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
