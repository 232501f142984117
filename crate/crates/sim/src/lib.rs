//! Deterministic discrete-event simulator: the real display, control and
//! source state machines wired together over a modelled network.

pub mod net;
pub mod scenario;
pub mod stitch;
pub mod world;

use tilewall::geometry::{GeometryError, TileId};

pub use net::{Latency, NetModel};
pub use scenario::{run, stitch_dir, Report, Scenario};
pub use stitch::{stitch, StitchMode};
pub use world::{Sim, SimConfig};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("missing tiles: {}", .0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", "))]
    MissingTiles(Vec<TileId>),
    #[error("stitch: {0}")]
    Stitch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(String),
}
