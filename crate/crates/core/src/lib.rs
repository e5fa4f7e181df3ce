//! Open-domain suggestion mining.
//!
//! A two-phase pipeline over product and service reviews:
//!
//! 1. **Oversampling.** Minority-class (suggestion) reviews are expanded by
//!    splitting them at discourse markers (`and`, `but`, `because`) and adding
//!    the swapped and cropped variants that a baseline classifier still labels
//!    as suggestions. A SMOTE comparator is provided alongside.
//! 2. **Classification.** A transformer encoder with bottleneck adapters
//!    predicts whether a review is a suggestion and, if so, its domain.
//!
//! The [`explain`] module exports attention saliency and SAGE discriminating
//! tokens for qualitative analysis.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod explain;
pub mod hashing;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod textprep;
pub mod xformer;

pub use augment::{BaselineClassifier, DiscourseSplit, FeatureExample};
pub use config::RunConfig;
pub use corpus::{BalanceStats, Dataset, Domain, Label, Provenance, Review, Split};
pub use embed::{EmbeddingMatrix, Vocabulary};
pub use error::{Error, Result};
pub use explain::{SageEntry, TokenSaliency};
pub use pipeline::{Artifacts, F1Report, TwoTierPrediction};
pub use textprep::{Lexicon, TokenSeq};
pub use xformer::{AttentionMap, TransformerConfig, TransformerModel};
