//! Two-stage change detection on bi-temporal imagery.
//!
//! A block-level reasoner predicts which cells of a coarse grid changed and
//! is trained first by supervised fitting and then by group-relative policy
//! optimization against verifiable rewards. A mask-guided encoder-decoder
//! then refines the resulting coarse mask into a pixel-level change map.

pub mod grid;
pub mod grpo;
pub mod loss;
pub mod metrics;
pub mod mgd;
pub mod pipeline;
pub mod policy;
pub mod pnm;
pub mod reward;
pub mod scene;
pub mod tensor;
