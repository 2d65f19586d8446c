//! Ground side: frame assembly, compositing, fine detection and publication.

use crate::error::LinkError;
use crate::imaging::{composite, encode_png};
use crate::plugin::{run_detector_plugin, PluginCommand, PluginError};
use crate::protocol::{
    encode, Ack, AckCode, BaseLayer, CustomRoiRequest, FrameMeta, Hello, Incoming, MessageReader, RoiEntry, RoiList,
    RoiTile, WireMessage,
};
use crate::transport::Transport;
use image::RgbImage;
use roilink_core::dataset::ImageRecord;
use roilink_core::{Dataset, ProposalSet, RectPx, ScoredBox};
use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

/// A detector box with the index of the tile it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub rect: RectPx,
    pub score: f64,
    pub tile: usize,
}

/// A fully received frame.
#[derive(Debug, Clone)]
pub struct GroundFrame {
    pub meta: FrameMeta,
    pub rois: Vec<RoiEntry>,
    pub image: RgbImage,
    pub detections: Vec<Detection>,
    /// Tiles the plugin failed on.
    pub undetected: Vec<usize>,
}

/// Sends upstream messages to the drone from any thread.
#[derive(Debug, Clone)]
pub struct Upstream {
    tx: Sender<WireMessage>,
    next_id: Arc<AtomicU64>,
}

impl Upstream {
    /// Requests `rect` and returns the request id assigned to it.
    pub fn request(&self, rect: RectPx, persistent: bool) -> Result<u64, LinkError> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.request_with_id(request_id, rect, persistent)?;
        Ok(request_id)
    }

    /// Requests `rect` under a caller-chosen id.
    pub fn request_with_id(&self, request_id: u64, rect: RectPx, persistent: bool) -> Result<(), LinkError> {
        if rect.is_empty() {
            return Err(LinkError::Session("a request needs a nonempty rect".into()));
        }
        self.send(WireMessage::CustomRoiRequest(CustomRoiRequest { request_id, rect, persistent }))
    }

    pub fn cancel(&self, request_id: u64) -> Result<(), LinkError> {
        self.send(WireMessage::CustomRoiRequest(CustomRoiRequest::cancel(request_id)))
    }

    fn send(&self, msg: WireMessage) -> Result<(), LinkError> {
        self.tx.send(msg).map_err(|_| LinkError::Session("link closed".into()))
    }
}

/// Receives completed frames and drone acknowledgements, in order.
pub trait GroundSink {
    fn on_frame(&mut self, frame: &GroundFrame, upstream: &Upstream) -> Result<(), LinkError>;

    fn on_ack(&mut self, _ack: Ack) -> Result<(), LinkError> {
        Ok(())
    }

    fn on_close(&mut self) -> Result<(), LinkError> {
        Ok(())
    }
}

/// Adapts a closure into a [`GroundSink`].
pub struct FnSink<F>(pub F);

impl<F: FnMut(&GroundFrame, &Upstream)> GroundSink for FnSink<F> {
    fn on_frame(&mut self, frame: &GroundFrame, upstream: &Upstream) -> Result<(), LinkError> {
        (self.0)(frame, upstream);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GroundConfig {
    pub plugin: Option<PluginCommand>,
    /// Parallel plugin invocations per frame.
    pub workers: usize,
}

impl Default for GroundConfig {
    fn default() -> Self {
        GroundConfig { plugin: None, workers: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundStats {
    pub frames: u64,
    /// Frames abandoned because a newer frame started first.
    pub dropped_frames: u64,
    pub malformed: u64,
    pub detections: u64,
    pub undetected_tiles: u64,
    pub hello: Option<Hello>,
}

#[derive(Debug)]
struct Pending {
    meta: FrameMeta,
    base: Option<BaseLayer>,
    list: Option<RoiList>,
    tiles: Vec<RoiTile>,
}

impl Pending {
    fn is_complete(&self) -> bool {
        matches!((&self.base, &self.list), (Some(_), Some(l)) if l.entries.len() == self.tiles.len())
    }
}

/// Runs the plugin on every tile, at most `workers` at a time.
pub fn detect_tiles(
    tiles: &[RoiTile],
    plugin: &PluginCommand,
    workers: usize,
) -> Vec<Result<Vec<ScoredBox>, PluginError>> {
    let next = AtomicUsize::new(0);
    let done: Vec<(usize, Result<Vec<ScoredBox>, PluginError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.clamp(1, tiles.len().max(1)))
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(tile) = tiles.get(i) else { break out };
                        out.push((i, run_detector_plugin(tile, plugin)));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("detector worker")).collect()
    });
    let mut results: Vec<Option<Result<Vec<ScoredBox>, PluginError>>> = (0..tiles.len()).map(|_| None).collect();
    for (i, r) in done {
        results[i] = Some(r);
    }
    results.into_iter().map(|r| r.expect("every tile visited")).collect()
}

fn finish_frame(p: Pending, cfg: &GroundConfig) -> Result<GroundFrame, LinkError> {
    let base = p.base.expect("complete");
    let list = p.list.expect("complete");
    for (i, (e, t)) in list.entries.iter().zip(&p.tiles).enumerate() {
        if e.rect != t.rect || e.origin != t.origin {
            log::warn!("frame {}: tile {i} does not match its list entry", p.meta.frame_id);
        }
    }
    let image = composite(&base, p.meta.downscale, &p.tiles, p.meta.dims)?;
    let mut detections = Vec::new();
    let mut undetected = Vec::new();
    if let Some(plugin) = &cfg.plugin {
        for (i, result) in detect_tiles(&p.tiles, plugin, cfg.workers).into_iter().enumerate() {
            match result {
                Ok(boxes) => detections.extend(boxes.into_iter().map(|b| Detection {
                    rect: b.rect,
                    score: b.confidence.unwrap_or(1.0),
                    tile: i,
                })),
                Err(e) => {
                    log::warn!("frame {}: detector failed on tile {i}: {e}", p.meta.frame_id);
                    undetected.push(i);
                }
            }
        }
    }
    Ok(GroundFrame { meta: p.meta, rois: list.entries, image, detections, undetected })
}

/// Receiver state: configuration plus the upstream channel.
pub struct GroundSession {
    cfg: GroundConfig,
    upstream: Upstream,
    rx: Receiver<WireMessage>,
}

impl GroundSession {
    pub fn new(cfg: GroundConfig) -> Self {
        let (tx, rx) = channel();
        GroundSession { cfg, upstream: Upstream { tx, next_id: Arc::new(AtomicU64::new(1)) }, rx }
    }

    /// Handle for sending requests to the drone; usable before and during
    /// [`GroundSession::run`].
    pub fn upstream(&self) -> Upstream {
        self.upstream.clone()
    }

    /// Receives until the drone says goodbye or the link closes. Frames are
    /// published to `sinks` in order, then confirmed to the drone.
    pub fn run<T: Transport>(self, transport: T, sinks: &mut [&mut dyn GroundSink]) -> Result<GroundStats, LinkError> {
        let (reader, writer) = transport.split()?;
        let GroundSession { cfg, upstream, rx } = self;
        let writer_thread = std::thread::spawn(move || {
            let mut out = BufWriter::new(writer);
            for msg in rx {
                let bye = msg == WireMessage::Bye;
                if let Err(e) = out.write_all(&encode(&msg)).and_then(|_| out.flush()) {
                    log::debug!("upstream write failed: {e}");
                    break;
                }
                if bye {
                    break;
                }
            }
        });

        let mut stats = GroundStats::default();
        let result = receive(reader, &cfg, &upstream, sinks, &mut stats);
        let _ = upstream.send(WireMessage::Bye);
        drop(upstream);
        let _ = writer_thread.join();
        for sink in sinks.iter_mut() {
            sink.on_close()?;
        }
        result.map(|_| stats)
    }
}

fn receive<R: std::io::Read>(
    reader: R,
    cfg: &GroundConfig,
    upstream: &Upstream,
    sinks: &mut [&mut dyn GroundSink],
    stats: &mut GroundStats,
) -> Result<(), LinkError> {
    let mut reader = MessageReader::new(reader);
    let mut pending: Option<Pending> = None;
    let mut last_frame: Option<u64> = None;
    while let Some(incoming) = reader.next_incoming()? {
        let msg = match incoming {
            Incoming::Message(m) => m,
            Incoming::Malformed(e) => {
                log::warn!("skipping malformed message: {e}");
                stats.malformed += 1;
                continue;
            }
        };
        let frame_id = match &msg {
            WireMessage::BaseLayer(b) => Some(b.frame_id),
            WireMessage::RoiList(l) => Some(l.frame_id),
            WireMessage::RoiTile(t) => Some(t.frame_id),
            _ => None,
        };
        if let Some(id) = frame_id {
            if pending.as_ref().map(|p| p.meta.frame_id) != Some(id) {
                log::warn!("message for frame {id} arrived outside its frame, ignored");
                continue;
            }
        }
        match msg {
            WireMessage::Hello(h) => stats.hello = Some(h),
            WireMessage::FrameMeta(meta) => {
                if last_frame.is_some_and(|l| meta.frame_id <= l) {
                    log::warn!("frame id {} does not increase, ignored", meta.frame_id);
                    continue;
                }
                if let Some(old) = pending.take() {
                    log::warn!("frame {} incomplete when frame {} began", old.meta.frame_id, meta.frame_id);
                    stats.dropped_frames += 1;
                }
                last_frame = Some(meta.frame_id);
                pending = Some(Pending { meta, base: None, list: None, tiles: Vec::new() });
            }
            WireMessage::BaseLayer(b) => pending.as_mut().expect("checked").base = Some(b),
            WireMessage::RoiList(l) => pending.as_mut().expect("checked").list = Some(l),
            WireMessage::RoiTile(t) => pending.as_mut().expect("checked").tiles.push(t),
            WireMessage::Ack(ack) => {
                for sink in sinks.iter_mut() {
                    sink.on_ack(ack)?;
                }
            }
            WireMessage::CustomRoiRequest(_) => log::debug!("ignoring downstream request"),
            WireMessage::Bye => break,
        }
        if pending.as_ref().is_some_and(Pending::is_complete) {
            let p = pending.take().expect("checked");
            let frame_id = p.meta.frame_id;
            let frame = finish_frame(p, cfg)?;
            stats.frames += 1;
            stats.detections += frame.detections.len() as u64;
            stats.undetected_tiles += frame.undetected.len() as u64;
            for sink in sinks.iter_mut() {
                sink.on_frame(&frame, upstream)?;
            }
            let _ = upstream.send(WireMessage::Ack(Ack { request_id: frame_id, code: AckCode::FrameDone }));
        }
    }
    Ok(())
}

/// Keeps every frame in memory.
#[derive(Debug, Default)]
pub struct Collector {
    pub frames: Vec<GroundFrame>,
    pub acks: Vec<Ack>,
}

impl GroundSink for Collector {
    fn on_frame(&mut self, frame: &GroundFrame, _upstream: &Upstream) -> Result<(), LinkError> {
        self.frames.push(frame.clone());
        Ok(())
    }

    fn on_ack(&mut self, ack: Ack) -> Result<(), LinkError> {
        self.acks.push(ack);
        Ok(())
    }
}

/// Writes composited frames and per-frame metadata to a directory.
///
/// Per frame: `frame_NNNNNN.png` and `frame_NNNNNN.json`. On close:
/// `rois.json` with the streamed RoIs and `detections.json` with detector
/// boxes, both COCO-style with one image per frame.
pub struct Recorder {
    dir: PathBuf,
    images: Vec<ImageRecord>,
    rois: BTreeMap<u64, ProposalSet>,
    detections: BTreeMap<u64, ProposalSet>,
}

impl Recorder {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LinkError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Recorder { dir, images: Vec::new(), rois: BTreeMap::new(), detections: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frame_stem(frame_id: u64) -> String {
        format!("frame_{frame_id:06}")
    }

    fn save(&self, name: &str, sets: &BTreeMap<u64, ProposalSet>) -> Result<(), LinkError> {
        let ds = Dataset {
            images: self.images.clone(),
            annotations: BTreeMap::new(),
            detections: Some(sets.clone()),
            clamped: 0,
        };
        ds.save_detections(&self.dir.join(name))?;
        Ok(())
    }
}

impl GroundSink for Recorder {
    fn on_frame(&mut self, frame: &GroundFrame, _upstream: &Upstream) -> Result<(), LinkError> {
        let id = frame.meta.frame_id;
        let stem = Self::frame_stem(id);
        std::fs::write(self.dir.join(format!("{stem}.png")), encode_png(&frame.image)?)?;
        let record = crate::bridge::FrameRecord::new(frame, String::new());
        std::fs::write(self.dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&record)?)?;

        let dims = frame.meta.dims;
        self.images.push(ImageRecord { id, file_name: format!("{stem}.png"), width: dims.width, height: dims.height });
        self.rois.insert(id, ProposalSet::new(dims, frame.rois.iter().map(|e| ScoredBox::unscored(e.rect)).collect())?);
        let dets = frame
            .detections
            .iter()
            .map(|d| ScoredBox::scored(dims.clamp(&d.rect), d.score))
            .filter(|b| !b.rect.is_empty())
            .collect();
        self.detections.insert(id, ProposalSet::new(dims, dets)?);
        Ok(())
    }

    fn on_close(&mut self) -> Result<(), LinkError> {
        self.save("rois.json", &self.rois)?;
        self.save("detections.json", &self.detections)
    }
}
