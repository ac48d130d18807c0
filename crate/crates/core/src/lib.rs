//! Semi-supervised text-based person search on a synthetic attribute
//! corpus.
//!
//! The pipeline is generation-then-retrieval: a small caption model is
//! finetuned on the labeled pairs and pseudo-labels every unlabeled image,
//! then a dual-encoder retrieval model trains on the union. Two mechanisms
//! make the retrieval stage robust to pseudo-text noise: hybrid
//! patch/channel masking ([`masking`]) and a noise-guided progressive
//! training schedule ([`curriculum`]). Because the corpus is synthetic,
//! every caption carries an oracle corruption rate that the noise
//! measurers can be validated against.

pub mod captioner;
pub mod checkpoint;
pub mod corpus;
pub mod curriculum;
pub mod encoder;
pub mod evalkit;
pub mod masking;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod trainer;
