//! Teacher pretraining, the distillation training loop, the optimizer and
//! the ablation grids.

pub mod ablation;
pub mod config;
pub mod optim;
pub mod teacher;
pub mod trainer;

pub use config::{RunConfig, TrainConfig};
pub use optim::{AdamW, AdamWConfig};
pub use teacher::{pool_to_dim, pretrain_teacher, PretrainConfig, TeacherConfig, TeacherModel};
pub use trainer::{train, TrainLog, TrainOutcome, Trainer};
