//! Integer pixel rectangles.
//!
//! A [`RectPx`] covers exactly `w * h` pixels, so every ratio computed here is
//! a ratio of pixel counts and can be checked against a rasterizing oracle.

use crate::scalar::Scalar;
use crate::Error;
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in pixel coordinates: left `x`, top `y`, width `w`, height `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct RectPx {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

/// Size of a frame in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameDims {
    pub width: u32,
    pub height: u32,
}

impl FrameDims {
    pub fn new(width: u32, height: u32) -> Result<Self, Error> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDims { width, height });
        }
        Ok(FrameDims { width, height })
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn full_rect(&self) -> RectPx {
        RectPx::new(0, 0, self.width as i64, self.height as i64)
    }

    pub fn contains(&self, r: &RectPx) -> bool {
        r.w >= 0
            && r.h >= 0
            && r.x >= 0
            && r.y >= 0
            && r.x + r.w <= self.width as i64
            && r.y + r.h <= self.height as i64
    }

    /// Clips `r` to the frame. The result may be empty.
    pub fn clamp(&self, r: &RectPx) -> RectPx {
        r.intersect(&self.full_rect())
    }
}

impl std::fmt::Display for FrameDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for FrameDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Parse(format!("expected WIDTHxHEIGHT, got {s:?}"));
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let w = w.trim().parse().map_err(|_| bad())?;
        let h = h.trim().parse().map_err(|_| bad())?;
        FrameDims::new(w, h)
    }
}

impl RectPx {
    /// The canonical empty rectangle.
    pub const EMPTY: RectPx = RectPx { x: 0, y: 0, w: 0, h: 0 };

    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        RectPx { x, y, w, h }
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn area(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            self.w as u64 * self.h as u64
        }
    }

    /// Largest rectangle contained in both, or [`RectPx::EMPTY`] when they do not overlap.
    pub fn intersect(&self, other: &RectPx) -> RectPx {
        if self.is_empty() || other.is_empty() {
            return RectPx::EMPTY;
        }
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            RectPx::EMPTY
        } else {
            RectPx::new(x0, y0, x1 - x0, y1 - y0)
        }
    }

    /// True when every pixel of `other` is covered by `self`. Empty rects are
    /// contained in everything.
    pub fn contains(&self, other: &RectPx) -> bool {
        other.is_empty()
            || (!self.is_empty()
                && other.x >= self.x
                && other.y >= self.y
                && other.right() <= self.right()
                && other.bottom() <= self.bottom())
    }

    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        px >= self.x && py >= self.y && px < self.right() && py < self.bottom()
    }

    /// Integer center pixel, `(x + w/2, y + h/2)`.
    pub fn center(&self) -> (i64, i64) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn translate(&self, dx: i64, dy: i64) -> RectPx {
        RectPx::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

pub fn intersect(a: &RectPx, b: &RectPx) -> RectPx {
    a.intersect(b)
}

/// Intersection over union. Two empty boxes give zero.
pub fn iou<T: Scalar>(a: &RectPx, b: &RectPx) -> T {
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    if union == 0 {
        T::zero()
    } else {
        T::from_counts(inter, union)
    }
}

/// Intersection over ground truth, `area(p ∩ g) / area(g)`.
pub fn iogt<T: Scalar>(p: &RectPx, g: &RectPx) -> Result<T, Error> {
    let denom = g.area();
    if denom == 0 {
        return Err(Error::DegenerateGroundTruth(*g));
    }
    Ok(T::from_counts(p.intersect(g).area(), denom))
}

/// Exact pixel area of the union of `boxes`.
///
/// Sweeps vertical slabs between consecutive distinct x edges and merges the
/// y intervals of the boxes active in each slab.
pub fn union_area(boxes: &[RectPx]) -> u64 {
    let boxes: Vec<&RectPx> = boxes.iter().filter(|b| !b.is_empty()).collect();
    match boxes.len() {
        0 => return 0,
        1 => return boxes[0].area(),
        _ => {}
    }
    let mut xs: Vec<i64> = boxes.iter().flat_map(|b| [b.x, b.right()]).collect();
    xs.sort_unstable();
    xs.dedup();

    let mut by_left = boxes.clone();
    by_left.sort_unstable_by_key(|b| b.x);

    let mut total = 0u64;
    let mut intervals: Vec<(i64, i64)> = Vec::with_capacity(boxes.len());
    for slab in xs.windows(2) {
        let (x0, x1) = (slab[0], slab[1]);
        intervals.clear();
        for b in by_left.iter().take_while(|b| b.x <= x0) {
            if b.right() >= x1 {
                intervals.push((b.y, b.bottom()));
            }
        }
        if intervals.is_empty() {
            continue;
        }
        intervals.sort_unstable();
        let mut covered = 0i64;
        let (mut lo, mut hi) = intervals[0];
        for &(a, b) in &intervals[1..] {
            if a > hi {
                covered += hi - lo;
                lo = a;
                hi = b;
            } else if b > hi {
                hi = b;
            }
        }
        covered += hi - lo;
        total += (covered as u64) * ((x1 - x0) as u64);
    }
    total
}

/// Largest rectangle with the same center and aspect ratio as `src` whose
/// area does not exceed `max_area`.
///
/// Dimensions are `floor(w * s)` and `floor(h * s)` with
/// `s = sqrt(max_area / area(src))`, evaluated in integers. When the size
/// difference along an axis is odd the result sits one pixel toward the
/// top-left. Returns `src` unchanged when it already fits and
/// [`RectPx::EMPTY`] when a dimension floors to zero.
pub fn concentric_fit(src: &RectPx, max_area: u64) -> RectPx {
    if src.is_empty() {
        return RectPx::EMPTY;
    }
    if max_area >= src.area() {
        return *src;
    }
    let (w, h) = (src.w as u128, src.h as u128);
    let m = max_area as u128;
    // floor(w * sqrt(m / (w h))) = floor(sqrt(m w / h)) = isqrt(floor(m w / h))
    let fw = ((m * w) / h).isqrt().min(w) as i64;
    let fh = ((m * h) / w).isqrt().min(h) as i64;
    if fw == 0 || fh == 0 {
        return RectPx::EMPTY;
    }
    RectPx::new(
        src.x + (src.w - fw) / 2,
        src.y + (src.h - fh) / 2,
        fw,
        fh,
    )
}
