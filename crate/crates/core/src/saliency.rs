//! Saliency heatmap post-processing: threshold to a binary map, label
//! connected components, and fit one tight box per component.

use crate::geometry::{FrameDims, RectPx};
use crate::scalar::Scalar;
use crate::select::{ProposalSet, ScoredBox};
use crate::Error;
use num_traits::Float;

/// Per-pixel saliency in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    dims: FrameDims,
    values: Vec<T>,
}

impl<T: Float> Heatmap<T> {
    pub fn new(dims: FrameDims, values: Vec<T>) -> Result<Self, Error> {
        let expected = dims.area() as usize;
        if values.len() != expected {
            return Err(Error::HeatmapSize { got: values.len(), expected });
        }
        if let Some(v) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Config(format!(
                "heatmap value {:?} outside [0, 1]",
                v.to_f64()
            )));
        }
        Ok(Heatmap { dims, values })
    }

    /// Like [`Heatmap::new`] but clamps values into `[0, 1]`; NaN becomes 0.
    pub fn clamped(dims: FrameDims, mut values: Vec<T>) -> Result<Self, Error> {
        for v in &mut values {
            *v = if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) };
        }
        Heatmap::new(dims, values)
    }

    pub fn filled(dims: FrameDims, value: T) -> Result<Self, Error> {
        Heatmap::new(dims, vec![value; dims.area() as usize])
    }

    pub fn dims(&self) -> FrameDims {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> T {
        self.values[(y * self.dims.width + x) as usize]
    }
}

/// Row-major map of 0/1 pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    dims: FrameDims,
    bits: Vec<u8>,
}

impl BinaryMap {
    pub fn new(dims: FrameDims, bits: Vec<u8>) -> Result<Self, Error> {
        let expected = dims.area() as usize;
        if bits.len() != expected {
            return Err(Error::HeatmapSize { got: bits.len(), expected });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Config("binary map values must be 0 or 1".into()));
        }
        Ok(BinaryMap { dims, bits })
    }

    pub fn zeros(dims: FrameDims) -> Self {
        BinaryMap { dims, bits: vec![0; dims.area() as usize] }
    }

    pub fn dims(&self) -> FrameDims {
        self.dims
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.dims.width + x) as usize] == 1
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        self.bits[(y * self.dims.width + x) as usize] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Pixel adjacency used when labelling components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" | "four" => Ok(Connectivity::Four),
            "8" | "eight" => Ok(Connectivity::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got {other:?}"))),
        }
    }
}

/// Pixels at or above `threshold` become 1.
pub fn binarize<T: Float>(heatmap: &Heatmap<T>, threshold: T) -> Result<BinaryMap, Error> {
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(Error::Config(format!(
            "threshold {:?} outside [0, 1]",
            threshold.to_f64()
        )));
    }
    let bits = heatmap.values.iter().map(|&v| (v >= threshold) as u8).collect();
    Ok(BinaryMap { dims: heatmap.dims, bits })
}

struct DisjointSets {
    parent: Vec<u32>,
}

impl DisjointSets {
    fn new() -> Self {
        DisjointSets { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// One tight bounding box per connected component of 1-pixels, sorted by
/// area descending and then by `(y, x, w, h)`.
///
/// Two-pass labelling: the first pass assigns provisional labels from the
/// already visited neighbours and records equivalences, the second resolves
/// each label to its root while growing that root's box.
pub fn component_boxes(map: &BinaryMap, connectivity: Connectivity) -> Vec<RectPx> {
    let (w, h) = (map.dims.width as usize, map.dims.height as usize);
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; w * h];
    let mut sets = DisjointSets::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if map.bits[i] == 0 {
                continue;
            }
            let mut neighbours = [NONE; 4];
            if x > 0 {
                neighbours[0] = labels[i - 1];
            }
            if y > 0 {
                neighbours[1] = labels[i - w];
                if connectivity == Connectivity::Eight {
                    if x > 0 {
                        neighbours[2] = labels[i - w - 1];
                    }
                    if x + 1 < w {
                        neighbours[3] = labels[i - w + 1];
                    }
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                if label == NONE {
                    label = n;
                } else {
                    sets.union(label, n);
                }
            }
            labels[i] = if label == NONE { sets.make() } else { label };
        }
    }

    // (x0, y0, x1, y1) inclusive bounds per root label
    let mut bounds: Vec<Option<(usize, usize, usize, usize)>> = vec![None; sets.parent.len()];
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == NONE {
                continue;
            }
            let root = sets.find(l) as usize;
            bounds[root] = Some(match bounds[root] {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }

    let mut boxes: Vec<RectPx> = bounds
        .into_iter()
        .flatten()
        .map(|(x0, y0, x1, y1)| {
            RectPx::new(x0 as i64, y0 as i64, (x1 - x0 + 1) as i64, (y1 - y0 + 1) as i64)
        })
        .collect();
    sort_by_area_desc(&mut boxes);
    boxes
}

/// Area descending, ties by `(y, x, w, h)` ascending.
pub(crate) fn sort_by_area_desc(boxes: &mut [RectPx]) {
    boxes.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then_with(|| (a.y, a.x, a.w, a.h).cmp(&(b.y, b.x, b.w, b.h)))
    });
}

/// Settings for turning a heatmap into proposals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposeConfig<T> {
    pub threshold: T,
    pub connectivity: Connectivity,
    /// Components with fewer pixels in their bounding box are dropped.
    pub min_area: u64,
}

impl<T: Float> Default for ProposeConfig<T> {
    fn default() -> Self {
        ProposeConfig {
            threshold: T::from(0.5).unwrap(),
            connectivity: Connectivity::Eight,
            min_area: 0,
        }
    }
}

/// Class-agnostic proposals: binarize then box every component. The boxes
/// carry no confidence.
pub fn propose_from_heatmap<T: Float, S: Scalar>(
    heatmap: &Heatmap<T>,
    cfg: &ProposeConfig<T>,
) -> Result<ProposalSet<S>, Error> {
    let map = binarize(heatmap, cfg.threshold)?;
    let boxes = component_boxes(&map, cfg.connectivity)
        .into_iter()
        .filter(|b| b.area() >= cfg.min_area)
        .map(ScoredBox::unscored)
        .collect();
    ProposalSet::new(heatmap.dims, boxes)
}
