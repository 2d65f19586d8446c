use crate::protocol::ProtocolError;
use roilink_core::{FrameDims, RectPx};

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Core(#[from] roilink_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("frame is {got}, session expects {expected}")]
    FrameSize { expected: FrameDims, got: FrameDims },
    #[error("tile {0:?} lies outside the frame")]
    TileOutOfBounds(RectPx),
    #[error("tile {rect:?} carries {got} bytes, expected {expected}")]
    TileSize { rect: RectPx, got: usize, expected: usize },
    #[error("base layer is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    BaseLayerSize { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("downscale factor must be at least 1")]
    ZeroDownscale,
    #[error("session: {0}")]
    Session(String),
}
