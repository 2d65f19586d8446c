//! WebSocket bridge for operator consoles.
//!
//! Downstream, every client receives JSON text messages:
//!
//! ```json
//! {"type":"frame","frame_id":3,"timestamp_us":0,"width":640,"height":480,
//!  "png_b64":"...","rois":[{"x":0,"y":0,"w":8,"h":8,"origin":"operator","request_id":1}],
//!  "detections":[{"x":0,"y":0,"w":8,"h":8,"score":1.0}],"undetected":[]}
//! {"type":"ack","request_id":1,"code":"accepted"}
//! ```
//!
//! Upstream, clients send
//!
//! ```json
//! {"type":"request","request_id":1,"x":0,"y":0,"w":8,"h":8,"persistent":false}
//! {"type":"cancel","request_id":1}
//! ```
//!
//! Each client has a short queue. When a client falls behind, its oldest
//! queued frame is dropped; acks are never dropped.

use crate::error::LinkError;
use crate::ground::{GroundFrame, GroundSink, Upstream};
use crate::imaging::encode_png;
use crate::protocol::{Ack, AckCode, Origin};
use base64::Engine;
use roilink_core::RectPx;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use tungstenite::Message;

/// Frames held per client before the oldest is dropped.
pub const CLIENT_QUEUE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiOrigin {
    Algorithmic,
    Operator,
}

impl From<Origin> for RoiOrigin {
    fn from(o: Origin) -> Self {
        match o {
            Origin::Algorithmic => RoiOrigin::Algorithmic,
            Origin::OperatorRequested => RoiOrigin::Operator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub origin: RoiOrigin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp_us: u64,
    pub width: u32,
    pub height: u32,
    /// Composited frame as base64 PNG; empty in recorded metadata files.
    pub png_b64: String,
    pub rois: Vec<RoiRecord>,
    pub detections: Vec<DetectionRecord>,
    pub undetected: Vec<usize>,
}

impl FrameRecord {
    pub fn new(frame: &GroundFrame, png_b64: String) -> Self {
        FrameRecord {
            frame_id: frame.meta.frame_id,
            timestamp_us: frame.meta.timestamp_us,
            width: frame.meta.dims.width,
            height: frame.meta.dims.height,
            png_b64,
            rois: frame
                .rois
                .iter()
                .map(|e| RoiRecord {
                    x: e.rect.x,
                    y: e.rect.y,
                    w: e.rect.w,
                    h: e.rect.h,
                    origin: e.origin.into(),
                    request_id: (e.origin == Origin::OperatorRequested).then_some(e.request_id),
                })
                .collect(),
            detections: frame
                .detections
                .iter()
                .map(|d| DetectionRecord { x: d.rect.x, y: d.rect.y, w: d.rect.w, h: d.rect.h, score: d.score })
                .collect(),
            undetected: frame.undetected.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckRecord {
    pub request_id: u64,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Downstream {
    Frame(FrameRecord),
    Ack(AckRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UpstreamRequest {
    Request {
        request_id: u64,
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        #[serde(default)]
        persistent: bool,
    },
    Cancel {
        request_id: u64,
    },
}

#[derive(Debug)]
struct Outgoing {
    text: Arc<str>,
    droppable: bool,
}

#[derive(Default)]
struct ClientQueue {
    items: Mutex<VecDeque<Outgoing>>,
    ready: Condvar,
    closed: AtomicBool,
}

impl ClientQueue {
    fn push(&self, item: Outgoing) {
        let mut q = self.items.lock().unwrap();
        q.push_back(item);
        while q.iter().filter(|o| o.droppable).count() > CLIENT_QUEUE {
            let oldest = q.iter().position(|o| o.droppable).expect("counted");
            q.remove(oldest);
        }
        self.ready.notify_one();
    }

    fn pop(&self, wait: Duration) -> Option<Outgoing> {
        let mut q = self.items.lock().unwrap();
        if q.is_empty() {
            q = self.ready.wait_timeout(q, wait).unwrap().0;
        }
        q.pop_front()
    }
}

struct Shared {
    clients: Mutex<Vec<Arc<ClientQueue>>>,
    shutdown: AtomicBool,
    // Acks produced locally by the bridge for requests it refuses.
    local_acks: Mutex<Vec<Ack>>,
}

/// WebSocket server publishing ground frames and forwarding operator
/// requests upstream.
pub struct WsBridge {
    addr: SocketAddr,
    shared: Arc<Shared>,
}

fn handle_text(text: &str, upstream: &Upstream, shared: &Shared) {
    let req: UpstreamRequest = match serde_json::from_str(text) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("bridge: ignoring client message: {e}");
            return;
        }
    };
    let result = match req {
        UpstreamRequest::Request { request_id, x, y, w, h, persistent } => {
            if x < 0 || y < 0 || w <= 0 || h <= 0 || [x, y, w, h].iter().any(|v| *v > u32::MAX as i64) {
                shared.local_acks.lock().unwrap().push(Ack { request_id, code: AckCode::OutOfBounds });
                return;
            }
            upstream.request_with_id(request_id, RectPx::new(x, y, w, h), persistent)
        }
        UpstreamRequest::Cancel { request_id } => upstream.cancel(request_id),
    };
    if let Err(e) = result {
        log::warn!("bridge: could not forward request: {e}");
    }
}

fn serve_client(stream: TcpStream, queue: Arc<ClientQueue>, upstream: Upstream, shared: Arc<Shared>) {
    let peer = stream.peer_addr().ok();
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("bridge: handshake with {peer:?} failed: {e}");
            queue.closed.store(true, Ordering::Relaxed);
            return;
        }
    };
    let _ = ws.get_mut().set_read_timeout(Some(Duration::from_millis(10)));
    log::info!("bridge: client {peer:?} connected");
    while !shared.shutdown.load(Ordering::Relaxed) {
        while let Some(out) = queue.pop(Duration::from_millis(10)) {
            if let Err(e) = ws.send(Message::text(out.text.to_string())) {
                log::info!("bridge: client {peer:?} gone: {e}");
                queue.closed.store(true, Ordering::Relaxed);
                return;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => handle_text(text.as_str(), &upstream, &shared),
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => {
                log::info!("bridge: client {peer:?} closed: {e}");
                break;
            }
        }
    }
    queue.closed.store(true, Ordering::Relaxed);
    let _ = ws.close(None);
    let _ = ws.flush();
}

impl WsBridge {
    /// Listens on `addr` and serves clients on background threads.
    pub fn bind(addr: impl ToSocketAddrs, upstream: Upstream) -> Result<Self, LinkError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            clients: Mutex::new(Vec::new()),
            shutdown: AtomicBool::new(false),
            local_acks: Mutex::new(Vec::new()),
        });
        let accept_shared = Arc::clone(&shared);
        std::thread::spawn(move || {
            while !accept_shared.shutdown.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let queue = Arc::new(ClientQueue::default());
                        accept_shared.clients.lock().unwrap().push(Arc::clone(&queue));
                        let (up, sh) = (upstream.clone(), Arc::clone(&accept_shared));
                        std::thread::spawn(move || serve_client(stream, queue, up, sh));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        log::warn!("bridge: accept failed: {e}");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });
        Ok(WsBridge { addr, shared })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Connected clients.
    pub fn client_count(&self) -> usize {
        let mut clients = self.shared.clients.lock().unwrap();
        clients.retain(|c| !c.closed.load(Ordering::Relaxed));
        clients.len()
    }

    pub fn publish(&self, msg: &Downstream) -> Result<(), LinkError> {
        if self.client_count() == 0 {
            return Ok(());
        }
        let text: Arc<str> = serde_json::to_string(msg)?.into();
        let droppable = matches!(msg, Downstream::Frame(_));
        for c in self.shared.clients.lock().unwrap().iter() {
            c.push(Outgoing { text: Arc::clone(&text), droppable });
        }
        Ok(())
    }

    fn flush_local_acks(&self) -> Result<(), LinkError> {
        let acks: Vec<Ack> = std::mem::take(&mut *self.shared.local_acks.lock().unwrap());
        for ack in acks {
            self.publish_ack(ack)?;
        }
        Ok(())
    }

    pub fn publish_ack(&self, ack: Ack) -> Result<(), LinkError> {
        self.publish(&Downstream::Ack(AckRecord { request_id: ack.request_id, code: ack.code.name().into() }))
    }
}

impl GroundSink for WsBridge {
    fn on_frame(&mut self, frame: &GroundFrame, _upstream: &Upstream) -> Result<(), LinkError> {
        self.flush_local_acks()?;
        if self.client_count() == 0 {
            return Ok(());
        }
        let png = base64::engine::general_purpose::STANDARD.encode(encode_png(&frame.image)?);
        self.publish(&Downstream::Frame(FrameRecord::new(frame, png)))
    }

    fn on_ack(&mut self, ack: Ack) -> Result<(), LinkError> {
        self.flush_local_acks()?;
        self.publish_ack(ack)
    }
}

impl Drop for WsBridge {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
    }
}
