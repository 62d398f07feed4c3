//! Distillation of structured-reasoning training data from a small labeled
//! seed set, and the three-agent inference cascade the data trains.
//!
//! Stages: [`induction`] picks task prompts, [`synthesis`] annotates pool
//! questions with retrieved demonstrations ([`retrieval`]), [`filtering`]
//! prunes by structure and reward, [`corpus`] exports training files,
//! [`cascade`] runs the Parser/Decomposer/Verifier agents and
//! [`evalharness`] scores predictions.

pub mod backends;
pub mod cascade;
pub mod corpus;
pub mod evalharness;
pub mod filtering;
pub mod induction;
pub mod jsonscan;
pub mod prompts;
pub mod retrieval;
pub mod synthesis;
pub mod util;
