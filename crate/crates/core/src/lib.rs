//! Contextualized knowledge distillation for conversational recommendation.
//!
//! A recommendation teacher (graph encoders over an item graph and a word
//! graph) and a dialogue teacher (an encoder-decoder language model over the
//! joint word/item vocabulary) are distilled into one student language model.
//! At every target position a gate derived from the dialogue teacher's
//! probability mass on item tokens decides which teacher the student follows.

pub mod checkpoint;
pub mod classifier;
pub mod conkd;
pub mod config;
pub mod data;
pub mod dialogue;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod recommender;
pub mod train;

pub use error::{Error, Result};
