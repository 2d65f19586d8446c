//! Grayscale base layer, tile cropping and compositing.

use crate::error::LinkError;
use crate::protocol::{BaseLayer, RoiTile};
use image::{GrayImage, RgbImage};
use roilink_core::{FrameDims, RectPx};

/// Integer BT.601 luma, rounded half up.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

pub fn frame_dims(frame: &RgbImage) -> Result<FrameDims, LinkError> {
    Ok(FrameDims::new(frame.width(), frame.height())?)
}

/// Base layer size for `dims` at `factor`. A partial block at the right or
/// bottom edge still gets its own base pixel.
pub fn base_dims(dims: FrameDims, factor: u16) -> (u32, u32) {
    let f = factor.max(1) as u32;
    (dims.width.div_ceil(f), dims.height.div_ceil(f))
}

/// Luma of `frame` averaged over `factor x factor` blocks, rounded half up.
/// Edge blocks average only the pixels inside the frame.
pub fn downscale_luma(frame: &RgbImage, factor: u16) -> Result<GrayImage, LinkError> {
    if factor == 0 {
        return Err(LinkError::ZeroDownscale);
    }
    let dims = frame_dims(frame)?;
    let f = factor as u32;
    let (bw, bh) = base_dims(dims, factor);
    let mut sums = vec![0u64; (bw * bh) as usize];
    let mut counts = vec![0u64; (bw * bh) as usize];
    for (x, y, px) in frame.enumerate_pixels() {
        let i = ((y / f) * bw + x / f) as usize;
        sums[i] += luma(px[0], px[1], px[2]) as u64;
        counts[i] += 1;
    }
    let data = sums.iter().zip(&counts).map(|(s, n)| ((2 * s + n) / (2 * n)) as u8).collect();
    Ok(GrayImage::from_raw(bw, bh, data).expect("buffer sized to base dims"))
}

/// Interleaved RGB bytes of `rect`, which must lie inside `frame`.
pub fn crop(frame: &RgbImage, rect: &RectPx) -> Result<Vec<u8>, LinkError> {
    let dims = frame_dims(frame)?;
    if !dims.contains(rect) {
        return Err(LinkError::TileOutOfBounds(*rect));
    }
    let stride = frame.width() as usize * 3;
    let raw = frame.as_raw();
    let mut out = Vec::with_capacity(rect.area() as usize * 3);
    for y in rect.y..rect.bottom() {
        let start = y as usize * stride + rect.x as usize * 3;
        out.extend_from_slice(&raw[start..start + rect.w as usize * 3]);
    }
    Ok(out)
}

/// Operator view of a frame: the base layer upscaled by nearest neighbour
/// and replicated to three channels, with tile pixels pasted verbatim in
/// order.
pub fn composite(
    base: &BaseLayer,
    downscale: u16,
    tiles: &[RoiTile],
    dims: FrameDims,
) -> Result<RgbImage, LinkError> {
    if downscale == 0 {
        return Err(LinkError::ZeroDownscale);
    }
    let (bw, bh) = base_dims(dims, downscale);
    if base.width != bw || base.height != bh || base.luma.len() != (bw * bh) as usize {
        return Err(LinkError::BaseLayerSize { got_w: base.width, got_h: base.height, want_w: bw, want_h: bh });
    }
    let f = downscale as u32;
    let mut out = RgbImage::from_fn(dims.width, dims.height, |x, y| {
        let v = base.luma[((y / f) * bw + x / f) as usize];
        image::Rgb([v, v, v])
    });
    let stride = dims.width as usize * 3;
    for tile in tiles {
        if !dims.contains(&tile.rect) {
            return Err(LinkError::TileOutOfBounds(tile.rect));
        }
        let row = tile.rect.w as usize * 3;
        let expected = row * tile.rect.h as usize;
        if tile.pixels.len() != expected {
            return Err(LinkError::TileSize { rect: tile.rect, got: tile.pixels.len(), expected });
        }
        let buf: &mut [u8] = &mut out;
        for (i, src) in tile.pixels.chunks_exact(row.max(1)).enumerate() {
            let start = (tile.rect.y as usize + i) * stride + tile.rect.x as usize * 3;
            buf[start..start + row].copy_from_slice(src);
        }
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, LinkError> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
