//! Priority sampling: deterministic decoding that returns unique samples from
//! a next-token model, ordered by expansion priority, with optional
//! regex-constrained generation.
//!
//! - [`vocab`]: tokens, vocabularies and whitespace tokenization.
//! - [`model`]: the [`model::SequenceModel`] contract, table and n-gram models.
//! - [`guide`]: regex → DFA → per-state token masks.
//! - [`sampler`]: priority sampling itself.
//! - [`baselines`]: greedy, nucleus, top-k and random flag sampling.
//! - [`bench`]: a synthetic pass-ordering benchmark with best-of-n curves.

pub mod baselines;
pub mod bench;
pub mod guide;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod vocab;

pub use guide::{compile_guide, Guide, GuideError, GuideState};
pub use model::{ModelError, NGramModel, SequenceModel, TableModel};
pub use rng::RngStream;
pub use sampler::{
    choose_best_tokens, count_inferences, priority_sample, InvalidPolicy, PriorityMetric,
    SampleError, SampleRecord, SampleSet, SamplerConfig,
};
pub use vocab::{Token, VocabError, Vocabulary};
