//! Toy-scale training, evaluation, persistence and benchmarking.

pub mod checkpoint;
pub mod checks;
pub mod bench;
pub mod dataset;
pub mod train;

pub use bench::{bench_throughput, catm_scaling, msa_kernel_scaling, BenchReport, ScalingReport};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{generate_shapes_dataset, knn_accuracy, Dataset};
pub use train::{evaluate, train, AdamW, EpochMetrics, EvalMetrics, TrainConfig};
