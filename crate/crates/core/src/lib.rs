//! Decoder-only transformer inference with layer-wise attention sharing.
//!
//! Layers whose attention distributions barely change from their predecessor
//! are grouped into lazy blocks: the first layer of a block (the anchor)
//! computes attention normally, and the remaining layers reuse its queries and
//! keys (GLA) or, for visual tokens only, its queries and keys while keeping
//! their own text keys (VLA).

pub mod efficiency;
pub mod error;
pub mod fsutil;
pub mod lazy;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod profiler;
pub mod rng;
pub mod session;
pub mod tensor;
pub mod verify;

pub use error::{Error, PlanError, Result};
pub use model::{
    init_synthetic_model, load_checkpoint, save_checkpoint, Modality, ModelConfig, ModelWeights, TokenSequence,
};
pub use tensor::Matrix;
