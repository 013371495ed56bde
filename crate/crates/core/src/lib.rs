//! Wait-or-answer turn-taking for dialogue agents.
//!
//! After every user utterance an agent has to choose between waiting for a
//! further user sub-turn and answering now. This crate implements the
//! predict-then-decide approach to that choice: two sequence-to-sequence
//! models simulate the user's next supplement and the agent's next reply,
//! and a convolutional classifier decides between the two simulated
//! dialogue paths.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, checkpoints,
//! orchestration and the command line live in the companion `ptd` crate.

#![no_std]

extern crate alloc;

pub mod baselines;
pub mod corpus;
pub mod decision;
mod error;
pub mod metrics;
pub mod numerics;
pub mod seq2seq;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
