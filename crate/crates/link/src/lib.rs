//! Drone-to-ground link for bandwidth-budgeted RoI streaming.
//!
//! The drone sends, per frame, a downscaled grayscale base layer plus the
//! selected regions at full quality. The ground station composites them,
//! runs an optional detector plugin on each region and publishes the result
//! to sinks such as the WebSocket bridge or a recording directory. Operator
//! requests travel back upstream on the same connection.

pub mod bridge;
pub mod drone;
mod error;
pub mod ground;
pub mod imaging;
pub mod loopback;
pub mod plugin;
pub mod protocol;
pub mod transport;

pub use bridge::WsBridge;
pub use drone::{drone_step, run_drone, DroneConfig, DroneSession, FrameSource, LinkOptions, OperatorBudget, SourceFrame};
pub use error::LinkError;
pub use ground::{GroundConfig, GroundFrame, GroundSession, GroundSink, Recorder, Upstream};
pub use imaging::composite;
pub use loopback::run_loopback;
pub use plugin::{run_detector_plugin, PluginCommand};
pub use protocol::{decode, encode, ProtocolError, WireMessage};
pub use transport::{mem_duplex, Transport};
