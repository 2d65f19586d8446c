//! Drone and ground sessions wired together in one process.

use crate::drone::{run_drone, DroneSession, DroneStats, FrameSource, LinkOptions};
use crate::error::LinkError;
use crate::ground::{GroundSession, GroundSink, GroundStats};
use crate::transport::mem_duplex;

/// Runs `drone` on a background thread and `ground` on the current one over
/// an in-memory pipe, until the source is exhausted.
pub fn run_loopback<S: FrameSource + Send + 'static>(
    drone: DroneSession,
    mut source: S,
    ground: GroundSession,
    sinks: &mut [&mut dyn GroundSink],
    opts: &LinkOptions,
) -> Result<(DroneStats, GroundStats), LinkError> {
    let (drone_end, ground_end) = mem_duplex();
    let opts_drone = opts.clone();
    let sender = std::thread::spawn(move || run_drone(drone_end, drone, &mut source, &opts_drone));
    let received = ground.run(ground_end, sinks);
    let sent = sender.join().map_err(|_| LinkError::Session("drone thread panicked".into()))?;
    Ok((sent?, received?))
}
