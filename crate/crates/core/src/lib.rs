//! Desk-scale zero-shot distillation laboratory.
//!
//! The crate trains a CLIP-style teacher on procedurally rendered shape
//! images, distils smaller image encoders from it under several objectives,
//! and measures how each objective copes with spurious features, the
//! synthetic/natural domain gap, corruptions and sketches.
//!
//! | module | contents |
//! |---|---|
//! | [`tensor`] | tape-based autodiff, AdamW, finite-difference checker |
//! | [`losses`] | feature ℒ₂, CLIP, multi-positive, contrastive-image, CE, Hinton KD |
//! | [`prompts`] | contextual dimensions, covering arrays, weighted prompts |
//! | [`shapes`] | procedural renderer, spurious features, corruptions, sketches |
//! | [`model`] | image encoders, projection head, text tower, checkpoints |
//! | [`eval`] | zero-shot classification, top-k, linear probe, sweeps |
//! | [`pipeline`] | configuration, staged training with caching, reports |

pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod shapes;
pub mod tensor;
