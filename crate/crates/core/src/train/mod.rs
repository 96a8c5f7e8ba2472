//! Sample assignment, losses, synthetic scenes and the optimization loop.

pub mod assign;
pub mod config;
pub mod loss;
pub mod scene;
pub mod trainer;

pub use assign::{assign_samples, Assignment, GroundTruth, POSITIVE_IOU};
pub use config::TrainConfig;
pub use loss::{detection_loss, focal_loss, total_loss, LossConfig, LossTerms};
pub use scene::{generate_scene, Scene, SceneConfig};
pub use trainer::{train, train_with, LogRecord, TrainOutcome};
