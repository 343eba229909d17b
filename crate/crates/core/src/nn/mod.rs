//! Convolution kernels, the separable first-layer pipelines, the two
//! baselines, a small frozen backbone, and Adam training.

pub mod conv;
pub mod first;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pool;
pub mod train;

pub use conv::{conv2d_forward, ConvSpec};
pub use first::{
    build_reduce, build_scratch, cp_pipeline_forward, pipeline_forward, reduce_hidden_width,
    tucker_pipeline_forward, FirstLayer, Geometry, Method, ReduceInit,
};
pub use model::{count_trainable, evaluate, forward_backward, Backbone, Model, StepOutput};
pub use optim::{learning_rate, Adam};
pub use pool::adaptive_avg_pool;
pub use train::{log_csv, train, EpochLog, Samples, TrainConfig};
