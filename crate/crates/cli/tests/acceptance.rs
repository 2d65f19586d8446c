//! Acceptance checks. Each criterion prints one PASS or FAIL line; the
//! process exits nonzero if any fails.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roilink_core::bench::{compose_throughput, Composition, StageTiming};
use roilink_core::dataset::{expand_min_size, ImageRecord};
use roilink_core::matching::AnnotationSet;
use roilink_core::select::accounted_area;
use roilink_core::sweep::{sweep, write_sweep_outputs, Grid};
use roilink_core::*;
use roilink_link::drone::VecSource;
use roilink_link::ground::{Collector, FnSink};
use roilink_link::protocol::*;
use roilink_link::{
    run_loopback, DroneConfig, DroneSession, GroundConfig, GroundFrame, GroundSession, LinkOptions, PluginCommand,
    Recorder, SourceFrame, Upstream,
};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

const SEED: u64 = 0x5EED;

// Tolerances.
const METRIC_LIMIT_MAX_SECONDS: f64 = 1.0;
const SERIAL_FPS_EXPECTED: f64 = 18.93;
const SERIAL_FPS_TOL: f64 = 0.01;
const PARALLEL_FPS_EXPECTED: f64 = 30.1;

// Sizes.
const ORACLE_SCENES: usize = 1000;
const EXACT_INSTANCES: usize = 500;
const EXACT_N: usize = 12;
const BUDGET_FUZZ_CASES: usize = 100_000;
const MONOTONE_DATASETS: usize = 100;
const EXPANSION_DATASETS: usize = 100;
const SALIENCY_MAPS: usize = 1000;
const ROUND_TRIPS_PER_TYPE: usize = 100_000;
const FUZZ_INPUTS: usize = 1_000_000;
const LOOPBACK_FRAMES: usize = 100;
const E2E_FRAMES: usize = 10;
const E2E_R: f64 = 0.2;
const E2E_REQUEST_FRAME: u64 = 3;
const E2E_LATEST_TILE_FRAME: u64 = 4;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(SEED);
    r.set_stream(stream);
    r
}

fn random_dims(rng: &mut impl Rng, max_w: u32, max_h: u32) -> FrameDims {
    FrameDims::new(rng.random_range(1..=max_w), rng.random_range(1..=max_h)).unwrap()
}

fn random_rect_in(rng: &mut impl Rng, dims: FrameDims) -> RectPx {
    let x0 = rng.random_range(0..dims.width as i64);
    let y0 = rng.random_range(0..dims.height as i64);
    let x1 = rng.random_range(x0 + 1..=dims.width as i64);
    let y1 = rng.random_range(y0 + 1..=dims.height as i64);
    RectPx::new(x0, y0, x1 - x0, y1 - y0)
}

// ---- rasterization oracle --------------------------------------------------

fn raster(r: &RectPx, dims: FrameDims) -> Vec<bool> {
    let mut m = vec![false; dims.area() as usize];
    for y in 0..dims.height as i64 {
        for x in 0..dims.width as i64 {
            if x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h {
                m[(y * dims.width as i64 + x) as usize] = true;
            }
        }
    }
    m
}

fn count(m: &[bool]) -> i64 {
    m.iter().filter(|b| **b).count() as i64
}

fn and(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x && *y).collect()
}

fn or(a: &[bool], b: &[bool]) -> Vec<bool> {
    a.iter().zip(b).map(|(x, y)| *x || *y).collect()
}

// ---- criteria ---------------------------------------------------------------

fn metric_limit() -> Check {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut total_gt = 0;
    for _ in 0..200 {
        let dims = random_dims(&mut rng, 3840, 2160);
        let gts: Vec<RectPx> = (0..rng.random_range(1..=40)).map(|_| random_rect_in(&mut rng, dims)).collect();
        total_gt += gts.len();
        let preds = [dims.full_rect()];
        let m = match_boxes(&preds, &gts, &ExactMatchConfig::default()).map_err(|e| e.to_string())?;
        let point = MatchCounts::from_result(&m, 1, gts.len()).point(Rational64::from_integer(1));
        ensure(point.recall == Rational64::from_integer(1), || format!("recall {} in {dims}", point.recall))?;
        ensure(point.precision == Rational64::from_integer(1), || format!("precision {}", point.precision))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < METRIC_LIMIT_MAX_SECONDS, || format!("took {secs:.3} s"))?;
    Ok(format!("200 scenes, {total_gt} GT boxes, recall = 1 exactly, {secs:.3} s"))
}

fn throughput() -> Check {
    let stages = [StageTiming::new("heatmap", 51.0), StageTiming::new("postproc", 30.1)];
    let serial = compose_throughput(&stages, Composition::Serial).map_err(|e| e.to_string())?;
    let parallel = compose_throughput(&stages, Composition::Parallel).map_err(|e| e.to_string())?;
    ensure((serial - SERIAL_FPS_EXPECTED).abs() <= SERIAL_FPS_TOL, || format!("serial {serial}"))?;
    ensure(parallel == PARALLEL_FPS_EXPECTED, || format!("parallel {parallel}"))?;
    Ok(format!("serial {serial:.4} ({serial:.1}) fps, parallel {parallel} fps"))
}

fn oracle_equivalence() -> Check {
    let mut rng = rng(2);
    let half = Rational64::new(1, 2);
    let mut pairs = 0;
    for scene in 0..ORACLE_SCENES {
        let dims = random_dims(&mut rng, 64, 64);
        let preds: Vec<RectPx> = (0..rng.random_range(0..=8)).map(|_| random_rect_in(&mut rng, dims)).collect();
        let gts: Vec<RectPx> = (0..rng.random_range(0..=8)).map(|_| random_rect_in(&mut rng, dims)).collect();
        let pm: Vec<Vec<bool>> = preds.iter().map(|r| raster(r, dims)).collect();
        let gm: Vec<Vec<bool>> = gts.iter().map(|r| raster(r, dims)).collect();

        let mut scored = Vec::new();
        for (j, p) in preds.iter().enumerate() {
            for (k, g) in gts.iter().enumerate() {
                pairs += 1;
                let inter = count(&and(&pm[j], &gm[k]));
                let uni = count(&or(&pm[j], &gm[k]));
                let want_iou = Rational64::new(inter, uni);
                let want_iogt = Rational64::new(inter, count(&gm[k]));
                let got_iou: Rational64 = iou(p, g);
                let got_iogt: Rational64 = iogt(p, g).map_err(|e| e.to_string())?;
                ensure(got_iou == want_iou, || format!("scene {scene}: iou {p:?} {g:?} = {got_iou}, oracle {want_iou}"))?;
                ensure(got_iogt == want_iogt, || format!("scene {scene}: iogt = {got_iogt}, oracle {want_iogt}"))?;
                scored.push((want_iogt, j, k));
            }
        }
        let want_union = pm.iter().fold(vec![false; dims.area() as usize], |acc, m| or(&acc, m));
        ensure(union_area(&preds) == count(&want_union) as u64, || format!("scene {scene}: union area"))?;

        // Repeatedly take the best remaining pair over all boxes, matched or
        // not, while it clears the threshold.
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        let (mut want_gt, mut want_pred) = (BTreeSet::new(), BTreeSet::new());
        for (score, j, k) in &scored {
            if *score < half || *score == Rational64::from_integer(0) {
                break;
            }
            want_pred.insert(*j);
            want_gt.insert(*k);
        }
        let got = match_iogt(&preds, &gts, half).map_err(|e| e.to_string())?;
        ensure(got.matched_gt == want_gt && got.matched_pred == want_pred, || {
            format!("scene {scene}: matched {:?}/{:?}, oracle {want_gt:?}/{want_pred:?}", got.matched_gt, got.matched_pred)
        })?;
    }
    Ok(format!("{ORACLE_SCENES} scenes, {pairs} pairs, 0 mismatches"))
}

// Bitset rows for frames up to 64 wide.
fn rows(r: &RectPx, h: usize) -> Vec<u64> {
    let mask = if r.w >= 64 { u64::MAX } else { ((1u64 << r.w) - 1) << r.x };
    (0..h).map(|y| if (y as i64) >= r.y && (y as i64) < r.y + r.h { mask } else { 0 }).collect()
}

fn best_union(masks: &[Vec<u64>], i: usize, acc: &mut Vec<u64>, budget: u64, best: &mut u64) {
    let area: u64 = acc.iter().map(|r| r.count_ones() as u64).sum();
    if area > budget {
        return;
    }
    *best = (*best).max(area);
    if i == masks.len() {
        return;
    }
    best_union(masks, i + 1, acc, budget, best);
    let saved = acc.clone();
    for (a, m) in acc.iter_mut().zip(&masks[i]) {
        *a |= m;
    }
    best_union(masks, i + 1, acc, budget, best);
    *acc = saved;
}

fn best_sum(areas: &[u64], budget: u64) -> u64 {
    (0u32..1 << areas.len())
        .map(|s| areas.iter().enumerate().filter(|(i, _)| s >> i & 1 == 1).map(|(_, a)| *a).sum::<u64>())
        .filter(|a| *a <= budget)
        .max()
        .unwrap_or(0)
}

fn selection() -> Check {
    let mut rng = rng(3);
    for inst in 0..EXACT_INSTANCES {
        let dims = random_dims(&mut rng, 64, 64);
        let n = rng.random_range(1..=EXACT_N);
        let boxes: Vec<RectPx> = (0..n).map(|_| random_rect_in(&mut rng, dims)).collect();
        let r = rng.random_range(0.0..1.0);
        let props = ProposalSet::new(dims, boxes.iter().map(|b| ScoredBox::unscored(*b)).collect()).unwrap();
        let budget = BudgetPortion::new(r).unwrap();
        let px = budget.pixels(dims);
        for accounting in [Accounting::UnionPixels, Accounting::SumOfCropAreas] {
            let policy = SelectionPolicy::new(SelectionMode::AreaGreedy, accounting).with_exact_small_n(EXACT_N).unwrap();
            let sel = select(&props, budget, &policy).map_err(|e| e.to_string())?;
            let want = match accounting {
                Accounting::UnionPixels => {
                    let masks: Vec<Vec<u64>> = boxes.iter().map(|b| rows(b, dims.height as usize)).collect();
                    let mut best = 0;
                    best_union(&masks, 0, &mut vec![0; dims.height as usize], px, &mut best);
                    best
                }
                Accounting::SumOfCropAreas => best_sum(&boxes.iter().map(RectPx::area).collect::<Vec<_>>(), px),
            };
            let got = accounted_area(&sel.full, accounting);
            ensure(got == want, || format!("instance {inst} ({accounting}): selected {got}, optimum {want}"))?;
        }
    }

    let mut violations = 0;
    for _ in 0..BUDGET_FUZZ_CASES {
        let dims = random_dims(&mut rng, 256, 256);
        let n = rng.random_range(0..=30);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox::scored(random_rect_in(&mut rng, dims), rng.random_range(0.0..=1.0)))
            .collect();
        let props = ProposalSet::new(dims, boxes).unwrap();
        let budget = BudgetPortion::new(rng.random_range(0.0..=1.0)).unwrap();
        let mode = if rng.random() { SelectionMode::AreaGreedy } else { SelectionMode::ConfidencePrefix };
        let accounting = if rng.random() { Accounting::UnionPixels } else { Accounting::SumOfCropAreas };
        let sel = select(&props, budget, &SelectionPolicy::new(mode, accounting)).map_err(|e| e.to_string())?;
        if accounted_area(&sel.rects(), accounting) > budget.pixels(dims) {
            violations += 1;
        }
    }
    ensure(violations == 0, || format!("{violations} budget violations"))?;
    Ok(format!(
        "{EXACT_INSTANCES} instances (n <= {EXACT_N}) optimal under union and sum; {BUDGET_FUZZ_CASES} fuzz cases, 0 violations"
    ))
}

fn random_eval_dataset(rng: &mut impl Rng) -> (Dataset, BTreeMap<u64, ProposalSet>) {
    let mut ds = Dataset { images: Vec::new(), annotations: BTreeMap::new(), detections: None, clamped: 0 };
    let mut props = BTreeMap::new();
    for id in 1..=rng.random_range(1..=6u64) {
        let dims = random_dims(rng, 400, 300);
        ds.images.push(ImageRecord { id, file_name: format!("{id}.png"), width: dims.width, height: dims.height });
        let gts = (0..rng.random_range(0..=8)).map(|_| random_rect_in(rng, dims)).collect();
        ds.annotations.insert(id, AnnotationSet { frame: dims, boxes: gts });
        let preds = (0..rng.random_range(0..=12))
            .map(|_| ScoredBox::scored(random_rect_in(rng, dims), rng.random_range(0.0..=1.0)))
            .collect();
        props.insert(id, ProposalSet::new(dims, preds).unwrap());
    }
    (ds, props)
}

fn monotone_recall() -> Check {
    let mut rng = rng(4);
    let grid = Grid::default_log();
    let cfg = SweepConfig::new(
        grid.to_scalars().unwrap(),
        SelectionPolicy::new(SelectionMode::ConfidencePrefix, Accounting::UnionPixels),
    );
    for d in 0..MONOTONE_DATASETS {
        let (ds, props) = random_eval_dataset(&mut rng);
        let points = sweep(&ds, &props, &cfg).map_err(|e| e.to_string())?;
        ensure(points.len() == grid.len(), || format!("dataset {d}: {} rows", points.len()))?;
        for w in points.windows(2) {
            ensure(w[1].recall >= w[0].recall, || {
                format!("dataset {d}: recall {} at r={} then {} at r={}", w[0].recall, w[0].r, w[1].recall, w[1].r)
            })?;
        }
    }
    Ok(format!("{MONOTONE_DATASETS} datasets x {} grid points, 0 violations", grid.len()))
}

fn expansion() -> Check {
    let mut rng = rng(5);
    let dims = FrameDims::new(3840, 2160).unwrap();
    let mut boxes = 0;
    for d in 0..EXPANSION_DATASETS {
        let mut ds = Dataset { images: Vec::new(), annotations: BTreeMap::new(), detections: None, clamped: 0 };
        for id in 1..=rng.random_range(1..=5u64) {
            ds.images.push(ImageRecord { id, file_name: format!("{id}.png"), width: 3840, height: 2160 });
            let gts = (0..rng.random_range(0..=15))
                .map(|_| {
                    if rng.random_bool(0.8) {
                        // small objects, as in aerial imagery
                        let (w, h) = (rng.random_range(1..=120), rng.random_range(1..=120));
                        RectPx::new(rng.random_range(0..=3840 - w), rng.random_range(0..=2160 - h), w, h)
                    } else {
                        random_rect_in(&mut rng, dims)
                    }
                })
                .collect();
            ds.annotations.insert(id, AnnotationSet { frame: dims, boxes: gts });
        }
        let once = expand_min_size(&ds, 500, 500).map_err(|e| e.to_string())?;
        let twice = expand_min_size(&once, 500, 500).map_err(|e| e.to_string())?;
        ensure(once == twice, || format!("dataset {d}: not idempotent"))?;
        for (id, set) in &ds.annotations {
            for (src, out) in set.boxes.iter().zip(&once.annotations[id].boxes) {
                boxes += 1;
                let (cx, cy) = src.center();
                ensure(out.w >= 500 && out.h >= 500, || format!("{src:?} -> {out:?} too small"))?;
                ensure(dims.contains(out), || format!("{src:?} -> {out:?} leaves the frame"))?;
                ensure(out.contains_point(cx, cy), || format!("{src:?} -> {out:?} lost its center"))?;
            }
        }
    }
    Ok(format!("{EXPANSION_DATASETS} datasets, {boxes} boxes, idempotent"))
}

fn flood_fill_boxes(map: &BinaryMap, eight: bool) -> Vec<RectPx> {
    let d = map.dims();
    let (w, h) = (d.width as i64, d.height as i64);
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !map.get(sx as u32, sy as u32) || seen[(sy * w + sx) as usize] {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            let mut q = VecDeque::from([(sx, sy)]);
            seen[(sy * w + sx) as usize] = true;
            while let Some((x, y)) = q.pop_front() {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let i = (ny * w + nx) as usize;
                        if map.get(nx as u32, ny as u32) && !seen[i] {
                            seen[i] = true;
                            q.push_back((nx, ny));
                        }
                    }
                }
            }
            out.push(RectPx::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1));
        }
    }
    out
}

fn saliency() -> Check {
    let mut rng = rng(6);
    let mut comps = 0;
    for i in 0..SALIENCY_MAPS {
        let dims = random_dims(&mut rng, 32, 32);
        let density = rng.random_range(0.05..0.7);
        let bits: Vec<u8> = (0..dims.area()).map(|_| rng.random_bool(density) as u8).collect();
        let map = BinaryMap::new(dims, bits).unwrap();
        for (conn, eight) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let mut got = component_boxes(&map, conn);
            let mut want = flood_fill_boxes(&map, eight);
            ensure(got.len() == want.len(), || format!("map {i} ({conn:?}): {} boxes, oracle {}", got.len(), want.len()))?;
            comps += want.len();
            let key = |r: &RectPx| (r.x, r.y, r.w, r.h);
            got.sort_by_key(key);
            want.sort_by_key(key);
            ensure(got == want, || format!("map {i} ({conn:?}): boxes differ from oracle"))?;
            for y in 0..dims.height {
                for x in 0..dims.width {
                    if map.get(x, y) {
                        ensure(got.iter().any(|b| b.contains_point(x as i64, y as i64)), || {
                            format!("map {i}: pixel ({x},{y}) uncovered")
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!("{SALIENCY_MAPS} maps, 4- and 8-connectivity, {comps} components, 0 mismatches"))
}

fn random_message(rng: &mut impl Rng, kind: u8) -> WireMessage {
    let dims = random_dims(rng, 8192, 8192);
    let rect = |rng: &mut dyn rand::RngCore, max: i64| {
        RectPx::new(rng.random_range(0..max), rng.random_range(0..max), rng.random_range(0..max), rng.random_range(0..max))
    };
    let origin = |b: bool| if b { Origin::Algorithmic } else { Origin::OperatorRequested };
    match kind {
        1 => WireMessage::Hello(Hello {
            dims,
            downscale: rng.random_range(1..=u16::MAX),
            accounting: if rng.random() { Accounting::UnionPixels } else { Accounting::SumOfCropAreas },
            operator_overrides_budget: rng.random(),
        }),
        2 => WireMessage::FrameMeta(FrameMeta {
            frame_id: rng.random(),
            timestamp_us: rng.random(),
            dims,
            downscale: rng.random_range(1..=u16::MAX),
            budget_r_micro: rng.random_range(0..=1_000_000),
        }),
        3 => {
            let (w, h) = (rng.random_range(0..16), rng.random_range(0..16));
            WireMessage::BaseLayer(BaseLayer {
                frame_id: rng.random(),
                width: w,
                height: h,
                luma: (0..w * h).map(|_| rng.random()).collect(),
            })
        }
        4 => WireMessage::RoiList(RoiList {
            frame_id: rng.random(),
            entries: (0..rng.random_range(0..8))
                .map(|_| RoiEntry { rect: rect(rng, 1 << 31), origin: origin(rng.random()), request_id: rng.random() })
                .collect(),
        }),
        5 => {
            let r = rect(rng, 10);
            WireMessage::RoiTile(RoiTile {
                frame_id: rng.random(),
                rect: r,
                origin: origin(rng.random()),
                pixels: (0..3 * r.w * r.h).map(|_| rng.random()).collect(),
            })
        }
        6 => WireMessage::CustomRoiRequest(CustomRoiRequest {
            request_id: rng.random(),
            rect: rect(rng, 1 << 31),
            persistent: rng.random(),
        }),
        7 => {
            let codes = [
                AckCode::Accepted,
                AckCode::OutOfBounds,
                AckCode::OverBudget,
                AckCode::Cancelled,
                AckCode::FrameDone,
                AckCode::UnknownRequest,
            ];
            WireMessage::Ack(Ack { request_id: rng.random(), code: codes[rng.random_range(0..codes.len())] })
        }
        _ => WireMessage::Bye,
    }
}

// Independent reference: per pixel, the source pixel under a tile, else the
// rounded mean of integer luma over the pixel's (edge-clipped) block.
fn reference_composite(src: &RgbImage, rois: &[RectPx], f: u32) -> RgbImage {
    let (w, h) = src.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        if rois.iter().any(|r| r.contains_point(x as i64, y as i64)) {
            return *src.get_pixel(x, y);
        }
        let (bx, by) = (x / f * f, y / f * f);
        let (mut sum, mut n) = (0u32, 0u32);
        for yy in by..(by + f).min(h) {
            for xx in bx..(bx + f).min(w) {
                let p = src.get_pixel(xx, yy);
                sum += (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000;
                n += 1;
            }
        }
        let v = (sum as f64 / n as f64 + 0.5).floor() as u8;
        image::Rgb([v, v, v])
    })
}

fn protocol() -> Check {
    let mut rng = rng(7);
    for kind in 1..=8u8 {
        for _ in 0..ROUND_TRIPS_PER_TYPE {
            let msg = random_message(&mut rng, kind);
            let bytes = encode(&msg);
            match decode(&bytes) {
                Ok((back, used)) if back == msg && used == bytes.len() => {}
                other => return Err(format!("round trip of {msg:?} gave {other:?}")),
            }
        }
    }

    let mut crashes = 0;
    let mut decoded = 0;
    for i in 0..FUZZ_INPUTS {
        let input: Vec<u8> = if i % 2 == 0 {
            (0..rng.random_range(0..96)).map(|_| rng.random()).collect()
        } else {
            // valid message with a few random byte changes or a cut
            let kind = rng.random_range(1..=8);
            let mut b = encode(&random_message(&mut rng, kind));
            for _ in 0..rng.random_range(0..4) {
                let j = rng.random_range(0..b.len());
                b[j] = rng.random();
            }
            if rng.random_bool(0.3) {
                b.truncate(rng.random_range(0..=b.len()));
            }
            b
        };
        match catch_unwind(AssertUnwindSafe(|| decode(&input).is_ok())) {
            Ok(true) => decoded += 1,
            Ok(false) => {}
            Err(_) => crashes += 1,
        }
    }
    ensure(crashes == 0, || format!("{crashes} panics while decoding fuzz input"))?;

    let dims = FrameDims::new(64, 64).unwrap();
    let mut frames = Vec::new();
    let mut sources = Vec::new();
    for _ in 0..LOOPBACK_FRAMES {
        let img = RgbImage::from_fn(64, 64, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let props: Vec<ScoredBox> = (0..rng.random_range(0..10))
            .map(|_| ScoredBox::scored(random_rect_in(&mut rng, dims), rng.random_range(0.0..=1.0)))
            .collect();
        let proposals = ProposalSet::new(dims, props).unwrap();
        sources.push(img.clone());
        frames.push(SourceFrame { image: img, proposals, timestamp_us: None });
    }
    let r = 0.2;
    let mut cfg = DroneConfig::new(dims, BudgetPortion::new(r).unwrap());
    cfg.downscale = 6;
    let budget_px = cfg.budget_px();
    let ground = GroundSession::new(GroundConfig::default());
    let request_rng = Arc::new(Mutex::new(rng.clone()));
    let mut requester = FnSink(move |_f: &GroundFrame, up: &Upstream| {
        let mut rng = request_rng.lock().unwrap();
        if rng.random_bool(0.3) {
            let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
            let rect = RectPx::new(rng.random_range(0..70), rng.random_range(0..70), w, h);
            let persistent = rng.random_bool(0.3);
            let _ = up.request(rect, persistent);
        }
    });
    let mut collector = Collector::default();
    let (_, stats) = run_loopback(
        DroneSession::new(cfg),
        VecSource::new(frames),
        ground,
        &mut [&mut requester, &mut collector],
        &LinkOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(stats.frames as usize == LOOPBACK_FRAMES, || format!("{} frames received", stats.frames))?;
    let mut operator_tiles = 0;
    for (i, (frame, src)) in collector.frames.iter().zip(&sources).enumerate() {
        ensure(frame.meta.frame_id == i as u64, || format!("frame id {} at {i}", frame.meta.frame_id))?;
        let rects: Vec<RectPx> = frame.rois.iter().map(|e| e.rect).collect();
        operator_tiles += frame.rois.iter().filter(|e| e.origin == Origin::OperatorRequested).count();
        let used = accounted_area(&rects, Accounting::UnionPixels);
        ensure(used <= budget_px, || format!("frame {i}: {used} px over budget {budget_px}"))?;
        ensure(frame.image == reference_composite(src, &rects, 6), || format!("frame {i}: composite differs"))?;
    }
    Ok(format!(
        "{} round trips, {FUZZ_INPUTS} fuzz inputs ({decoded} decoded, 0 panics), {LOOPBACK_FRAMES}-frame loopback within budget, {operator_tiles} operator tiles, bit-exact composites",
        8 * ROUND_TRIPS_PER_TYPE
    ))
}

// Sea-like frames with a few bright swimmers drifting right.
fn e2e_scene(i: usize, dims: FrameDims) -> (RgbImage, Heatmap, Vec<RectPx>) {
    let objects: Vec<RectPx> =
        [(20, 30, 10, 8), (120, 90, 12, 12), (200, 40, 8, 14)].iter().map(|&(x, y, w, h)| RectPx::new(x + 3 * i as i64, y, w, h)).collect();
    let img = RgbImage::from_fn(dims.width, dims.height, |x, y| {
        if objects.iter().any(|o| o.contains_point(x as i64, y as i64)) {
            image::Rgb([230, 120, 40])
        } else {
            image::Rgb([10, 40 + ((x + y) % 16) as u8, 90])
        }
    });
    let halo: Vec<RectPx> = objects.iter().map(|o| RectPx::new(o.x - 3, o.y - 3, o.w + 6, o.h + 6)).collect();
    let mut values = vec![0.1f32; dims.area() as usize];
    for y in 0..dims.height {
        for x in 0..dims.width {
            if halo.iter().any(|h| h.contains_point(x as i64, y as i64)) {
                values[(y * dims.width + x) as usize] = 0.8;
            }
        }
    }
    (img, Heatmap::new(dims, values).unwrap(), objects)
}

fn end_to_end() -> Check {
    let dims = FrameDims::new(256, 160).unwrap();
    let mut frames = Vec::new();
    let mut truth = BTreeMap::new();
    for i in 0..E2E_FRAMES {
        let (image, heat, objects) = e2e_scene(i, dims);
        let proposals = propose_from_heatmap(&heat, &ProposeConfig::default()).map_err(|e| e.to_string())?;
        truth.insert(i as u64, objects);
        frames.push(SourceFrame { image, proposals, timestamp_us: Some(i as u64 * 33_333) });
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plugin = PluginCommand::new(format!("{} echo-detector", env!("CARGO_BIN_EXE_roilink")));
    let ground = GroundSession::new(GroundConfig { plugin: Some(plugin), workers: 4 });
    let request = RectPx::new(100, 10, 24, 20);
    let request_id = Arc::new(Mutex::new(None));
    let id_slot = Arc::clone(&request_id);
    let mut injector = FnSink(move |f: &GroundFrame, up: &Upstream| {
        if f.meta.frame_id == E2E_REQUEST_FRAME {
            *id_slot.lock().unwrap() = up.request(request, false).ok();
        }
    });
    let mut recorder = Recorder::new(dir.path().join("record")).map_err(|e| e.to_string())?;
    let mut collector = Collector::default();
    let opts = LinkOptions { window: Some(1), timeout: Duration::from_secs(30) };
    let (sent, received) = run_loopback(
        DroneSession::new(DroneConfig::new(dims, BudgetPortion::new(E2E_R).unwrap())),
        VecSource::new(frames),
        ground,
        &mut [&mut injector, &mut recorder, &mut collector],
        &opts,
    )
    .map_err(|e| e.to_string())?;
    ensure(sent.frames as usize == E2E_FRAMES && received.frames as usize == E2E_FRAMES, || {
        format!("sent {} received {}", sent.frames, received.frames)
    })?;
    ensure(received.undetected_tiles == 0, || format!("{} tiles undetected", received.undetected_tiles))?;

    let id = request_id.lock().unwrap().ok_or("request was not sent")?;
    let served = collector
        .frames
        .iter()
        .find(|f| f.rois.iter().any(|e| e.origin == Origin::OperatorRequested && e.request_id == id && e.rect == request))
        .map(|f| f.meta.frame_id)
        .ok_or("operator tile never arrived")?;
    ensure(served > E2E_REQUEST_FRAME && served <= E2E_LATEST_TILE_FRAME, || format!("operator tile at frame {served}"))?;
    for f in &collector.frames {
        let tiles = f.rois.len();
        ensure(f.detections.len() == tiles, || format!("frame {}: {} detections for {tiles} tiles", f.meta.frame_id, f.detections.len()))?;
    }

    // Evaluate the streamed RoIs against the scene's ground truth.
    let rois_path = dir.path().join("record").join("rois.json");
    let images = roilink_core::dataset::load_images(&rois_path).map_err(|e| e.to_string())?;
    let gt = Dataset {
        annotations: images
            .iter()
            .map(|img| (img.id, AnnotationSet { frame: dims, boxes: truth[&img.id].clone() }))
            .collect(),
        images,
        detections: None,
        clamped: 0,
    };
    let ann_path = dir.path().join("truth.json");
    gt.save_annotations(&ann_path).map_err(|e| e.to_string())?;
    let ds = Dataset::load(&ann_path, Some(&rois_path)).map_err(|e| e.to_string())?;
    let cfg = SweepConfig::new(Grid::default_log().to_scalars().unwrap(), SelectionPolicy::default());
    let points = sweep(&ds, ds.detections.as_ref().unwrap(), &cfg).map_err(|e| e.to_string())?;
    let csv = dir.path().join("metrics.csv");
    write_sweep_outputs(&csv, &points, &cfg).map_err(|e| e.to_string())?;
    let rows = std::fs::read_to_string(&csv).map_err(|e| e.to_string())?.lines().count();
    ensure(rows == 1 + Grid::default_log().len(), || format!("CSV has {rows} lines"))?;
    let full = points.last().unwrap();
    Ok(format!(
        "{E2E_FRAMES} frames at r = {E2E_R}, request at frame {E2E_REQUEST_FRAME} served at frame {served}, CSV with {} rows (recall {:.3} at r = 1)",
        rows - 1,
        full.recall
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric limit: full-frame prediction has recall 1 under IoGT", metric_limit),
        ("throughput composition: serial 18.93 +/- 0.01, parallel 30.1", throughput),
        ("IoU/IoGT and one-to-many matching equal the raster oracle", oracle_equivalence),
        ("selection: exact small-n optimum and budget never exceeded", selection),
        ("monotone recall under confidence-prefix selection", monotone_recall),
        ("expansion to 500x500: size, in-frame, center, idempotence", expansion),
        ("saliency boxes equal the flood-fill oracle", saliency),
        ("protocol: round trips, fuzzing, budgeted bit-exact loopback", protocol),
        ("end-to-end loopback with echo detector and operator request", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.2} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
