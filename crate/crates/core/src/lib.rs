//! Cross-lingual sequence-to-sequence pre-training and fine-tuning on
//! synthetic twin languages.

pub mod autograd;
pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod generation;
pub mod model;
pub mod noising;
pub mod rng;
pub mod training;
pub mod vocab;
