//! Multi-agent frame sampling over feature sequences.
//!
//! Untrimmed sequences carry their class signal in a few frames; the rest is
//! background or actively misleading. This crate trains a small team of
//! agents to walk along a sequence and stop on informative frames, using
//! REINFORCE with an entropy bonus plus a cross-entropy term on the
//! classifier that consumes the chosen frames. Everything underneath is
//! self-contained: a reverse-mode tape, a GRU context cell, Adam, a portable
//! PRNG, and binary dataset/checkpoint formats, so runs reproduce bit-for-bit
//! across platforms.
//!
//! Modules:
//! - [`envdata`]: sequence data model, synthetic generator, on-disk format.
//! - [`numerics`]: matrices, autodiff tape, Adam, gradient checking.
//! - [`rng`]: xoshiro256++ generator with substreams.

pub mod bench;
pub mod checkpoint;
pub mod classify;
pub mod config;
pub mod envdata;
pub mod learn;
pub mod numerics;
pub mod rng;
pub mod runtime;
pub mod sampler;
