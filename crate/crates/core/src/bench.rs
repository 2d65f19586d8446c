//! Stage throughput measurement and composition.

use crate::geometry::FrameDims;
use crate::saliency::{binarize, component_boxes, BinaryMap, Connectivity, Heatmap};
use crate::select::{select, BudgetPortion, ProposalSet, ScoredBox, SelectionPolicy};
use crate::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::{Duration, Instant};

/// Mean frames per second of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub name: String,
    pub fps: f64,
}

impl StageTiming {
    pub fn new(name: impl Into<String>, fps: f64) -> Self {
        StageTiming { name: name.into(), fps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// Stages run one after another on the same unit.
    Serial,
    /// Stages are pipelined across separate units.
    Parallel,
}

/// Throughput of a pipeline built from `stages`: `1 / sum(1 / fps)` in
/// series, the slowest stage when pipelined.
pub fn compose_throughput(stages: &[StageTiming], mode: Composition) -> Result<f64, Error> {
    if stages.is_empty() {
        return Err(Error::NoStages);
    }
    if let Some(s) = stages.iter().find(|s| !(s.fps > 0.0 && s.fps.is_finite())) {
        return Err(Error::InvalidRate { name: s.name.clone(), fps: s.fps });
    }
    Ok(match mode {
        Composition::Serial => 1.0 / stages.iter().map(|s| 1.0 / s.fps).sum::<f64>(),
        Composition::Parallel => stages.iter().map(|s| s.fps).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Binarize,
    Components,
    Select,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Binarize => "binarize",
            Stage::Components => "components",
            Stage::Select => "select",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "binarize" => Ok(Stage::Binarize),
            "components" => Ok(Stage::Components),
            "select" => Ok(Stage::Select),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub dims: String,
    pub frames: usize,
    pub stages: Vec<StageTiming>,
    pub serial_fps: f64,
    pub parallel_fps: f64,
    /// Frames per second of the listed stages run back to back, measured.
    pub measured_serial_fps: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dims: FrameDims,
    pub frames: usize,
    pub warmup: usize,
    pub seed: u64,
    pub budget: f64,
}

impl BenchConfig {
    pub fn new(dims: FrameDims, frames: usize) -> Self {
        BenchConfig { dims, frames, warmup: 2, seed: 0, budget: 0.2 }
    }
}

/// Heatmap with a few soft elliptical hot spots on a dim, noisy background.
pub fn synthetic_heatmap(dims: FrameDims, rng: &mut impl Rng) -> Heatmap<f32> {
    let (w, h) = (dims.width as usize, dims.height as usize);
    let mut values: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..0.3)).collect();
    let blobs = rng.random_range(3..12);
    for _ in 0..blobs {
        let cx = rng.random_range(0..w) as f32;
        let cy = rng.random_range(0..h) as f32;
        let rx = rng.random_range(2.0..(w as f32 / 16.0).max(3.0));
        let ry = rng.random_range(2.0..(h as f32 / 16.0).max(3.0));
        let (x0, x1) = ((cx - rx).max(0.0) as usize, ((cx + rx) as usize).min(w - 1));
        let (y0, y1) = ((cy - ry).max(0.0) as usize, ((cy + ry) as usize).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ((x as f32 - cx) / rx).powi(2) + ((y as f32 - cy) / ry).powi(2);
                if d <= 1.0 {
                    let v = &mut values[y * w + x];
                    *v = v.max(1.0 - 0.5 * d);
                }
            }
        }
    }
    Heatmap::new(dims, values).expect("values within [0, 1]")
}

struct FrameState<'a> {
    heatmap: &'a Heatmap<f32>,
    map: Option<BinaryMap>,
    boxes: Option<Vec<crate::geometry::RectPx>>,
}

impl FrameState<'_> {
    fn ensure_map(&mut self) {
        if self.map.is_none() {
            self.map = Some(binarize(self.heatmap, 0.5).expect("valid threshold"));
        }
    }

    fn ensure_boxes(&mut self) {
        self.ensure_map();
        if self.boxes.is_none() {
            self.boxes = Some(component_boxes(self.map.as_ref().unwrap(), Connectivity::Eight));
        }
    }

    // Prerequisites are prepared untimed; only the stage itself is timed.
    fn run(&mut self, stage: Stage, budget: f64) -> Duration {
        match stage {
            Stage::Binarize => {
                let t = Instant::now();
                let map = binarize(self.heatmap, 0.5).expect("valid threshold");
                let elapsed = t.elapsed();
                self.map = Some(map);
                elapsed
            }
            Stage::Components => {
                self.ensure_map();
                let map = self.map.as_ref().unwrap();
                let t = Instant::now();
                let boxes = component_boxes(map, Connectivity::Eight);
                let elapsed = t.elapsed();
                self.boxes = Some(boxes);
                elapsed
            }
            Stage::Select => {
                self.ensure_boxes();
                let dims = self.heatmap.dims();
                let props = ProposalSet::<f64>::new(
                    dims,
                    self.boxes.as_ref().unwrap().iter().map(|r| ScoredBox::unscored(*r)).collect(),
                )
                .expect("boxes come from the frame");
                let t = Instant::now();
                let sel = select(&props, BudgetPortion::new(budget).expect("valid budget"), &SelectionPolicy::default());
                let elapsed = t.elapsed();
                std::hint::black_box(sel.ok());
                elapsed
            }
        }
    }
}

/// Times each stage over `cfg.frames` synthetic frames after `cfg.warmup`
/// discarded ones. Stages run interleaved on every frame.
pub fn bench(stages: &[Stage], cfg: &BenchConfig) -> Result<BenchReport, Error> {
    if cfg.frames == 0 {
        return Err(Error::NoFrames);
    }
    if stages.is_empty() {
        return Err(Error::NoStages);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool: Vec<Heatmap<f32>> =
        (0..cfg.frames.min(4)).map(|_| synthetic_heatmap(cfg.dims, &mut rng)).collect();

    let mut totals = vec![Duration::ZERO; stages.len()];
    for i in 0..cfg.warmup + cfg.frames {
        let mut state = FrameState { heatmap: &pool[i % pool.len()], map: None, boxes: None };
        for (stage, total) in stages.iter().zip(&mut totals) {
            let elapsed = state.run(*stage, cfg.budget);
            if i >= cfg.warmup {
                *total += elapsed;
            }
        }
    }

    let fps = |d: Duration| cfg.frames as f64 / d.as_secs_f64().max(1e-9);
    let timings: Vec<StageTiming> =
        stages.iter().zip(&totals).map(|(s, d)| StageTiming::new(s.name(), fps(*d))).collect();
    Ok(BenchReport {
        dims: cfg.dims.to_string(),
        frames: cfg.frames,
        serial_fps: compose_throughput(&timings, Composition::Serial)?,
        parallel_fps: compose_throughput(&timings, Composition::Parallel)?,
        measured_serial_fps: fps(totals.iter().sum()),
        stages: timings,
    })
}
