//! Logit-only forward-KL distillation with AdamW and a cosine schedule,
//! plus the next-token trainer used to produce teachers.

mod config;
mod optim;
mod telemetry;
mod train;

pub use config::*;
pub use optim::*;
pub use telemetry::*;
pub use train::*;
