//! Semantic-structural contrastive refinement for unpaired domain translation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors with a reverse-mode differentiation tape.
//! - [`nets`]: generator, projection heads and patch discriminator.
//! - [`patches`]: patch sampling and query/positive/negative alignment.
//! - [`losses`]: relation consistency, hard-negative decoupled contrastive,
//!   adversarial terms and their weighted composition.
//! - [`rsmi`]: relative squared-loss mutual information between input and
//!   output pixels via least-squares relative density-ratio fitting.
//! - [`dataeval`]: procedural two-domain scenes, image I/O, the palette
//!   oracle segmenter and segmentation scores.
//! - [`harness`]: training loop and run logs, with [`optim`] and
//!   [`checkpoint`].

pub mod checkpoint;
pub mod dataeval;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod patches;
pub mod plot;
pub mod rsmi;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Group, ParamId, ParamStore};
pub use tensor::{Gradients, Graph, Tensor, Var};
pub use harness::{TrainConfig, TrainData, Trainer};
pub use nets::{Model, ModelConfig};
