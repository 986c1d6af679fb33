//! Semantic parsing of geographical questions with counterfactual learning
//! from logged bandit feedback.

pub mod corpus;
pub mod geo;
pub mod mrl;
pub mod policy;
pub mod vocab;
pub mod cflearn;
pub mod eval;
pub mod train;
pub mod bandit;
pub mod feedback;
pub mod experiment;
