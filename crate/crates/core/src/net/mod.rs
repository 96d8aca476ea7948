//! Conditional velocity network.

mod config;
mod model;

pub use config::VelocityNetConfig;
pub use model::{param_count, ForwardMode, ParamSpec, Params, VelocityNet};
