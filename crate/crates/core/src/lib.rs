//! Scriptorium: forge template document pages with exact word-level ground
//! truth, train a recognizer-constrained CycleGAN that restyles them into a
//! target handwriting domain, and measure how much the synthetic pages help
//! a downstream text recognizer.
//!
//! The crate is organised bottom-up:
//!
//! * [`forge`] typesets tokens into grayscale template pages and writes manifests.
//! * [`corpus`] turns manifests into normalized patches, word crops and noise.
//! * [`ctc`] holds the alignment loss, best-path decoding and CER/WER.
//! * [`nets`] defines the generators, patch discriminators and recognizers.
//! * [`losses`], [`optim`] and [`trainer`] implement the joint training loop.
//! * [`synthesize`] restyles full pages by overlapping tiles and exports word sets.
//! * [`eval`] runs the pretrain / fine-tune CER protocol and reports it.
//! * [`cli`] wires everything into the `scriptorium` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod forge;
pub mod losses;
pub mod manifest;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod synthesize;
pub mod trainer;

pub use error::{Error, Result};
