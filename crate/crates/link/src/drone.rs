//! Drone side: per-frame message production and the sender loop.

use crate::error::LinkError;
use crate::imaging::{crop, downscale_luma, frame_dims};
use crate::protocol::{
    encode, Ack, AckCode, BaseLayer, CustomRoiRequest, FrameMeta, Hello, MessageReader, Origin, RoiEntry, RoiList,
    RoiTile, WireMessage,
};
use crate::transport::Transport;
use image::RgbImage;
use roilink_core::select::Tally;
use roilink_core::{select_with_reserved, BudgetPortion, FrameDims, ProposalSet, RectPx, SelectionPolicy};
use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub const DEFAULT_DOWNSCALE: u16 = 8;

/// How operator-requested tiles are charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OperatorBudget {
    /// Charged first, inside the frame budget.
    #[default]
    Shared,
    /// Sent regardless of the budget and not charged against it.
    Override,
}

#[derive(Debug, Clone)]
pub struct DroneConfig {
    pub dims: FrameDims,
    pub downscale: u16,
    pub budget: BudgetPortion,
    pub policy: SelectionPolicy,
    pub operator_budget: OperatorBudget,
}

impl DroneConfig {
    pub fn new(dims: FrameDims, budget: BudgetPortion) -> Self {
        DroneConfig {
            dims,
            downscale: DEFAULT_DOWNSCALE,
            budget,
            policy: SelectionPolicy::default(),
            operator_budget: OperatorBudget::Shared,
        }
    }

    pub fn hello(&self) -> Hello {
        Hello {
            dims: self.dims,
            downscale: self.downscale,
            accounting: self.policy.accounting,
            operator_overrides_budget: self.operator_budget == OperatorBudget::Override,
        }
    }

    pub fn budget_px(&self) -> u64 {
        self.budget.pixels(self.dims)
    }
}

/// Messages for one frame and what became of each operator request.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// FrameMeta, BaseLayer, RoiList, then one RoiTile per list entry.
    pub messages: Vec<WireMessage>,
    pub verdicts: Vec<(CustomRoiRequest, AckCode)>,
    pub budget_px: u64,
    /// Pixels charged against the budget.
    pub accounted_px: u64,
}

/// Builds the downstream messages for one frame.
///
/// Operator requests are taken in order ahead of the algorithmic proposals.
/// A request outside the frame is rejected as out of bounds; under a shared
/// budget, one whose extra pixels exceed what is left is rejected as over
/// budget. The proposals then compete for the remainder.
pub fn drone_step(
    frame_id: u64,
    timestamp_us: u64,
    frame: &RgbImage,
    proposals: &ProposalSet,
    requests: &[CustomRoiRequest],
    cfg: &DroneConfig,
) -> Result<StepOutput, LinkError> {
    let dims = frame_dims(frame)?;
    if dims != cfg.dims {
        return Err(LinkError::FrameSize { expected: cfg.dims, got: dims });
    }
    if proposals.frame != cfg.dims {
        return Err(LinkError::FrameSize { expected: cfg.dims, got: proposals.frame });
    }
    let budget_px = cfg.budget_px();
    let shared = cfg.operator_budget == OperatorBudget::Shared;

    let mut tally = Tally::new(cfg.policy.accounting);
    let mut entries = Vec::new();
    let mut verdicts = Vec::with_capacity(requests.len());
    for req in requests.iter().filter(|r| !r.is_cancel()) {
        let code = if !dims.contains(&req.rect) {
            AckCode::OutOfBounds
        } else if shared && tally.marginal(&req.rect) > budget_px - tally.total() {
            AckCode::OverBudget
        } else {
            AckCode::Accepted
        };
        if code == AckCode::Accepted {
            if shared {
                tally.push(req.rect);
            }
            entries.push(RoiEntry { rect: req.rect, origin: Origin::OperatorRequested, request_id: req.request_id });
        }
        verdicts.push((*req, code));
    }

    let reserved: Vec<RectPx> = if shared { entries.iter().map(|e| e.rect).collect() } else { Vec::new() };
    let selection = select_with_reserved(proposals, budget_px, &reserved, &cfg.policy)?;
    entries.extend(
        selection.rects().into_iter().map(|rect| RoiEntry { rect, origin: Origin::Algorithmic, request_id: 0 }),
    );

    let base = downscale_luma(frame, cfg.downscale)?;
    let mut messages = Vec::with_capacity(3 + entries.len());
    messages.push(WireMessage::FrameMeta(FrameMeta {
        frame_id,
        timestamp_us,
        dims,
        downscale: cfg.downscale,
        budget_r_micro: (cfg.budget.value() * 1e6).round() as u32,
    }));
    messages.push(WireMessage::BaseLayer(BaseLayer {
        frame_id,
        width: base.width(),
        height: base.height(),
        luma: base.into_raw(),
    }));
    messages.push(WireMessage::RoiList(RoiList { frame_id, entries: entries.clone() }));
    for e in &entries {
        messages.push(WireMessage::RoiTile(RoiTile {
            frame_id,
            rect: e.rect,
            origin: e.origin,
            pixels: crop(frame, &e.rect)?,
        }));
    }
    Ok(StepOutput { messages, verdicts, budget_px, accounted_px: selection.accounted })
}

/// Thread-safe queue of operator requests waiting for the next frame.
#[derive(Debug, Clone, Default)]
pub struct RequestQueue(Arc<Mutex<VecDeque<CustomRoiRequest>>>);

impl RequestQueue {
    pub fn push(&self, req: CustomRoiRequest) {
        self.0.lock().unwrap().push_back(req);
    }

    pub fn drain(&self) -> Vec<CustomRoiRequest> {
        self.0.lock().unwrap().drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sender state across frames: frame numbering, queued and persistent
/// operator requests.
#[derive(Debug)]
pub struct DroneSession {
    cfg: DroneConfig,
    queue: RequestQueue,
    persistent: Vec<CustomRoiRequest>,
    next_frame_id: u64,
}

impl DroneSession {
    pub fn new(cfg: DroneConfig) -> Self {
        DroneSession { cfg, queue: RequestQueue::default(), persistent: Vec::new(), next_frame_id: 0 }
    }

    pub fn config(&self) -> &DroneConfig {
        &self.cfg
    }

    pub fn queue(&self) -> RequestQueue {
        self.queue.clone()
    }

    pub fn hello(&self) -> WireMessage {
        WireMessage::Hello(self.cfg.hello())
    }

    pub fn next_frame_id(&self) -> u64 {
        self.next_frame_id
    }

    /// Persistent requests currently being served.
    pub fn persistent(&self) -> &[CustomRoiRequest] {
        &self.persistent
    }

    /// Messages for the next frame, followed by Acks for requests that
    /// arrived since the previous one. A persistent request is acked once
    /// when accepted and again if a later frame has to drop it.
    pub fn step(
        &mut self,
        frame: &RgbImage,
        proposals: &ProposalSet,
        timestamp_us: u64,
    ) -> Result<StepOutput, LinkError> {
        let mut acks = Vec::new();
        let mut fresh = Vec::new();
        for req in self.queue.drain() {
            let before = self.persistent.len();
            self.persistent.retain(|p| p.request_id != req.request_id);
            if req.is_cancel() {
                let code = if self.persistent.len() < before { AckCode::Cancelled } else { AckCode::UnknownRequest };
                acks.push(Ack { request_id: req.request_id, code });
            } else {
                fresh.push(req);
            }
        }
        let standing = self.persistent.len();
        let requests: Vec<CustomRoiRequest> = self.persistent.iter().chain(&fresh).copied().collect();

        let frame_id = self.next_frame_id;
        let mut out = drone_step(frame_id, timestamp_us, frame, proposals, &requests, &self.cfg)?;
        self.next_frame_id += 1;

        let mut keep = Vec::new();
        for (i, (req, code)) in out.verdicts.iter().enumerate() {
            let accepted = *code == AckCode::Accepted;
            if i >= standing || !accepted {
                acks.push(Ack { request_id: req.request_id, code: *code });
            }
            if accepted && req.persistent {
                keep.push(*req);
            }
        }
        self.persistent = keep;
        out.messages.extend(acks.into_iter().map(WireMessage::Ack));
        Ok(out)
    }
}

/// One frame from a [`FrameSource`].
#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub image: RgbImage,
    pub proposals: ProposalSet,
    /// Capture time; the wall clock is used when absent.
    pub timestamp_us: Option<u64>,
}

pub trait FrameSource {
    /// The next frame, or `None` when the sequence ends.
    fn next_frame(&mut self) -> Option<Result<SourceFrame, LinkError>>;
}

/// A fixed, in-memory frame sequence.
pub struct VecSource(VecDeque<SourceFrame>);

impl VecSource {
    pub fn new(frames: Vec<SourceFrame>) -> Self {
        VecSource(frames.into())
    }
}

impl FrameSource for VecSource {
    fn next_frame(&mut self) -> Option<Result<SourceFrame, LinkError>> {
        self.0.pop_front().map(Ok)
    }
}

#[derive(Debug, Clone)]
pub struct LinkOptions {
    /// Frames that may be in flight before the sender waits for the ground
    /// station to confirm one. `None` disables flow control.
    pub window: Option<u64>,
    /// How long to wait for a confirmation or the closing handshake.
    pub timeout: Duration,
}

impl Default for LinkOptions {
    fn default() -> Self {
        LinkOptions { window: Some(2), timeout: Duration::from_secs(30) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DroneStats {
    pub frames: u64,
    pub bytes_sent: u64,
    pub tiles: u64,
    pub requests_received: u64,
    pub malformed: u64,
}

#[derive(Default)]
struct Downlink {
    // Frames confirmed by the ground station.
    confirmed: u64,
    closed: bool,
    requests: u64,
    malformed: u64,
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

fn wait_until(
    state: &(Mutex<Downlink>, Condvar),
    timeout: Duration,
    mut done: impl FnMut(&Downlink) -> bool,
) -> bool {
    let deadline = Instant::now() + timeout;
    let mut guard = state.0.lock().unwrap();
    while !done(&guard) {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return false;
        }
        guard = state.1.wait_timeout(guard, left).unwrap().0;
    }
    true
}

/// Runs the sender over `transport` until `source` is exhausted or the
/// ground station hangs up.
pub fn run_drone<T: Transport>(
    transport: T,
    mut session: DroneSession,
    source: &mut dyn FrameSource,
    opts: &LinkOptions,
) -> Result<DroneStats, LinkError> {
    let (reader, writer) = transport.split()?;
    let state = Arc::new((Mutex::new(Downlink::default()), Condvar::new()));
    let queue = session.queue();

    let reader_state = Arc::clone(&state);
    let reader_thread = std::thread::spawn(move || {
        let mut reader = MessageReader::new(reader);
        let mark = |f: &mut dyn FnMut(&mut Downlink)| {
            f(&mut reader_state.0.lock().unwrap());
            reader_state.1.notify_all();
        };
        loop {
            match reader.next_incoming() {
                Ok(Some(crate::protocol::Incoming::Message(msg))) => match msg {
                    WireMessage::CustomRoiRequest(req) => {
                        queue.push(req);
                        mark(&mut |s| s.requests += 1);
                    }
                    WireMessage::Ack(Ack { request_id, code: AckCode::FrameDone }) => {
                        mark(&mut |s| s.confirmed = s.confirmed.max(request_id + 1));
                    }
                    WireMessage::Bye => break,
                    other => log::debug!("drone ignoring {:?}", other.msg_type()),
                },
                Ok(Some(crate::protocol::Incoming::Malformed(e))) => {
                    log::warn!("drone skipping malformed upstream message: {e}");
                    mark(&mut |s| s.malformed += 1);
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("drone upstream read failed: {e}");
                    break;
                }
            }
        }
        mark(&mut |s| s.closed = true);
    });

    let mut out = BufWriter::with_capacity(1 << 20, writer);
    let mut stats = DroneStats::default();
    let send = |out: &mut BufWriter<T::Writer>, msg: &WireMessage, stats: &mut DroneStats| {
        let bytes = encode(msg);
        stats.bytes_sent += bytes.len() as u64;
        out.write_all(&bytes)
    };
    send(&mut out, &session.hello(), &mut stats)?;
    out.flush()?;

    let result = (|| -> Result<(), LinkError> {
        while let Some(frame) = source.next_frame() {
            let frame = frame?;
            if let Some(window) = opts.window {
                let sent = stats.frames;
                let ok = wait_until(&state, opts.timeout, |s| s.closed || sent - s.confirmed.min(sent) < window);
                if !ok {
                    return Err(LinkError::Session("timed out waiting for the ground station".into()));
                }
            }
            if state.0.lock().unwrap().closed {
                log::warn!("ground station closed the link after {} frames", stats.frames);
                return Ok(());
            }
            let ts = frame.timestamp_us.unwrap_or_else(now_us);
            let step = session.step(&frame.image, &frame.proposals, ts)?;
            for msg in &step.messages {
                if matches!(msg, WireMessage::RoiTile(_)) {
                    stats.tiles += 1;
                }
                send(&mut out, msg, &mut stats)?;
            }
            out.flush()?;
            stats.frames += 1;
        }
        if opts.window.is_some() {
            let sent = stats.frames;
            if !wait_until(&state, opts.timeout, |s| s.closed || s.confirmed >= sent) {
                log::warn!("not every frame was confirmed before closing");
            }
        }
        Ok(())
    })();

    let bye = send(&mut out, &WireMessage::Bye, &mut stats).and_then(|_| out.flush());
    if result.is_ok() {
        if let Err(e) = bye {
            log::debug!("closing handshake not sent: {e}");
        }
        if wait_until(&state, opts.timeout, |s| s.closed) {
            let _ = reader_thread.join();
        }
    }
    let s = state.0.lock().unwrap();
    stats.requests_received = s.requests;
    stats.malformed = s.malformed;
    result.map(|_| stats)
}
