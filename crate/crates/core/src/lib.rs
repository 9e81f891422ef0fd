//! Unified image/video self-supervised representation learning for person
//! re-identification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference
//!   checker.
//! * [`lse`]: keypoint-prompted local semantic extraction and the synthetic
//!   scene generator.
//! * [`encoder`]: the shared patch-token transformer for images and clips.
//! * [`ufla`]: resampler, projection heads, the four self-supervised losses,
//!   EMA teacher and the pre-training step.
//! * [`eval`]: inference embeddings, fine-tuning and retrieval metrics.
//! * [`io`] and [`cli`]: configuration, binary containers, datasets and the
//!   command implementations behind the `unireid` binary.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod exec;
pub mod image;
pub mod io;
pub mod lse;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod ufla;
