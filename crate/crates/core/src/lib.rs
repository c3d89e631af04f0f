//! Bilevel fast scene adaptation for low-light image enhancement.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! system: a dense tensor type with a reverse-mode tape, the Retinex-style
//! encoder/decoder with its residual denoiser, the training objectives, the
//! one-step bilevel hypergradients with their phase drivers, full- and
//! no-reference quality metrics, and a deterministic synthetic scene
//! generator. File formats, image codecs and the command line live in the
//! `bladapt` companion crate.
//!
//! Parameter sets are plain name → tensor maps ([`ParamSet`]). A forward pass
//! copies the parameters it needs onto a fresh [`Graph`], so the tape never
//! outlives one evaluation and perturbed evaluations (as needed by the
//! finite-difference hypergradient) are just calls with a different map.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bilevel;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod params;
pub mod phase;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
