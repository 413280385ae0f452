pub mod bench;
pub mod cli;
pub mod config;
pub mod editor;
pub mod error;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scenario;
pub mod schedule;

pub use error::{Error, Result};
pub use latent::Latent;
pub use model::{Condition, MixtureModel};
pub use schedule::{NoiseSchedule, ScheduleConfig, ScheduleKind};

/// Identifier embedded in every report row and printed by `--version`.
pub fn build_id() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), "+gen1")
}
