pub mod cluster;
pub mod error;
pub mod io;
pub mod manifold;
pub mod mlp;
pub mod ode;
pub mod params;
pub mod pathprob;
pub mod purestate;
pub mod sde;

pub use error::{Error, Result};
pub use params::{bloch_norm, convert_config, BlochState, PhysParams, RunConfig, TimeGrid};
