//! Desk-scale anchor-free detector and the experiment harness around it.

pub mod assign;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod eval;
pub mod flops;
pub mod model;
pub mod train;

pub use assign::{assign, LevelGrid, PositiveCell};
pub use data::{generate_scene, Dataset, GroundTruth, Image, SceneSpec, NUM_CLASSES};
pub use decode::{decode_and_nms, nms, DetectionRecord};
pub use eval::{evaluate, Evaluation};
pub use flops::{count_flops, FlopReport};
pub use model::{Activation, Detector, HeadKind, ModelConfig};
pub use train::{train, train_step, EpochMetrics, Sgd, TrainConfig};

#[cfg(test)]
mod tests;
