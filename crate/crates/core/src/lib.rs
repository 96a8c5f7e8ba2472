//! Dense one-stage detection head with decoupled prediction collection.
//!
//! Every grid location predicts a coarse box, from which two sets of learnable
//! points are derived: one boundary point per box side (sliding along the
//! coarse edge) and a grid of semantic points inside the box. Each side's
//! regression offset is bilinearly sampled at its boundary point, optionally
//! blended across adjacent pyramid levels with per-grid softmax weights, and
//! the class logits are summed over the semantic points before a sigmoid.
//!
//! The crate is self-contained and desk-scale: a tiny convolutional pyramid,
//! hand-written gradients for every kernel, synthetic scenes, focal and GIoU
//! losses, NMS, COCO-style average precision and diagnostic analyses.

pub mod analysis;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use model::{Detector, Mode, ModelConfig};
pub use tensor::{Param, Tensor};
