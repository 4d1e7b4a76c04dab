//! Synthetic benchmark harness: scene generation, the five-variant ablation models,
//! training, test-time augmentation, metrics and significance tests.

pub mod augment;
pub mod dataset;
pub mod evaluate;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod stats;
pub mod train;

pub use augment::{augment, AugmentOp, AugmentationSpec, Augmented};
pub use dataset::{derive_seed, DatasetConfig};
pub use evaluate::{evaluate, EvalOptions};
pub use experiment::{run_experiment, ExperimentPlan, ExperimentResults};
pub use metrics::{compute_map, confusion_matrix, Detector, MetricsReport};
pub use model::{Model, ModelConfig, Variant};
pub use scene::{gen_scene, Scene, SceneSpec, ShapeClass, NUM_CLASSES};
pub use stats::{paired_t_test, TTest};
pub use train::{fit_steps, train, RunRecord, TrainConfig};
