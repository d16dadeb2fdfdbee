//! Retrieval-augmented multiple-choice reasoning with a small policy trained
//! by group-relative policy optimization.

pub mod corpus;
pub mod grpo;
pub mod inference;
pub mod pipeline;
pub mod policy;
pub mod protocol;
pub mod retrieval;
pub mod rewards;
pub mod synthetic;
pub mod vocab;

