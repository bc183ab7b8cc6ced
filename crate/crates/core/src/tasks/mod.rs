//! The synthetic recall task and its training machinery: instance
//! generation, a durable dataset format, the optimizer, and the training
//! loop.

pub mod dataset;
pub mod mqar;
pub mod optim;
pub mod train;

pub use dataset::Dataset;
pub use mqar::{generate_instance, MqarConfig, MqarInstance, PAD, QUERY};
pub use optim::{AdamW, OptimConfig};
pub use train::{
    data_seed, effective_mode, evaluate, train, StepMetrics, TrainConfig, TrainEvent,
    TrainOutcome, EVAL_INDEX_BASE,
};
