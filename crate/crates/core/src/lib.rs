//! Energy-aware computation offloading for a client device and a fleet of
//! helper servers.

pub mod client_sched;
pub(crate) mod codec;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod protocol;
pub mod profiler;
pub mod server_sched;
pub mod sim;
pub mod tasklib;

pub use error::{Error, Result};
pub use model::*;
