//! Core of a tiled display wall: wall geometry, the replicated scene model,
//! gigapixel image pyramids, the wire protocol, and the sans-IO state
//! machines for the control service, display nodes and content sources.

pub mod control;
pub mod display;
pub mod geometry;
pub mod protocol;
pub mod pyramid;
pub mod raster;
pub mod scene;
pub mod source;
