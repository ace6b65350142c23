//! Rectified-flow training: linear interpolant, masked velocity loss, Adam,
//! image-then-video stage scheduling, the trainer loop and an Euler sampler.

mod flow;
mod optim;
mod sampler;
mod schedule;
mod trainer;

pub use flow::{fm_loss, make_flow_sample, standard_normal, FlowSample, TimeDist};
pub use optim::{Adam, AdamConfig};
pub use sampler::{euler, sample, sample_from, GenerationCond, ModelField, SamplerConfig, VelocityField};
pub use schedule::{Position, Stage, StagePlan, StageScheduler, REFERENCE_IMAGE_ITERS, REFERENCE_VIDEO_ITERS};
pub use trainer::{optimizer_path, MetricsLog, StepMetrics, TrainConfig, TrainExample, Trainer};
