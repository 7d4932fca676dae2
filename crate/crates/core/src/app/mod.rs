//! Configuration, image I/O, synthetic data, probing, visualization and the
//! command entry points behind the `cim` binary.

pub mod ppm;
pub mod synthetic;
pub mod config;
pub mod probe;
pub mod visualize;
pub mod commands;

pub use commands::{cmd_gen_data, cmd_gradcheck, cmd_pretrain, cmd_probe, cmd_visualize, AppError};
pub use config::{AppConfig, ConfigError};
