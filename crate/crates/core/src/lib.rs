//! Dual-pathway deformable spatio-temporal adapters for few-shot video
//! classification, built on a small self-contained tensor and autograd core.

pub mod adapter;
pub mod adsta;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod backbone;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod synthvid;
pub mod tensor;
pub mod viz;

pub use autograd::{Primitive, Tape, Var};
pub use error::{Error, Result};
pub use params::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use rng::SeededRng;
pub use tensor::{Real, Tensor};
