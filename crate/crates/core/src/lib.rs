//! Dual-branch prototype classifiers: one branch learns *support* prototypes
//! pulled toward the inter-class boundary, the other learns *trivial*
//! prototypes pushed away from it. The crate bundles the differentiable
//! substrate, the network and losses, the three-stage training schedule,
//! deterministic dataset generators, and a saliency/interpretability
//! measurement suite (CH, OIRR, IoU, DAUC, AIPD/AIFD, pruning).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
