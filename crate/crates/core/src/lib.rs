//! Head importance, attention-pattern relevance and pattern injection for a
//! miniature extractive summarizer.

pub mod config;
pub mod corpus;
pub mod error;
pub mod importance;
pub mod inference;
pub mod model;
pub mod pal;
pub mod patterns;
pub mod rouge;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Canonical JSON text of a report: pretty-printed, no trailing newline. The
/// CLI and the service both emit exactly this text.
pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/importance.md")]
    mod importance {}
    #[doc = include_str!("../../../book/src/patterns.md")]
    mod patterns {}
    #[doc = include_str!("../../../book/src/injection.md")]
    mod injection {}
    #[doc = include_str!("../../../book/src/pal.md")]
    mod pal {}
    #[doc = include_str!("../../../book/src/summarization.md")]
    mod summarization {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
