//! External detector plugins.
//!
//! A plugin is a shell command. It receives one tile as a PNG on standard
//! input and prints one detection per line as `x y w h score`, in tile
//! coordinates. Blank lines are ignored.

use crate::imaging::encode_png;
use crate::protocol::RoiTile;
use image::RgbImage;
use roilink_core::{RectPx, ScoredBox};
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;
use wait_timeout::ChildExt;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginCommand {
    /// Run with `sh -c`.
    pub command: String,
    pub timeout: Duration,
}

impl PluginCommand {
    pub fn new(command: impl Into<String>) -> Self {
        PluginCommand { command: command.into(), timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("could not start plugin: {0}")]
    Spawn(std::io::Error),
    #[error("could not encode tile: {0}")]
    Encode(String),
    #[error("plugin timed out after {0:?}")]
    Timeout(Duration),
    #[error("plugin exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("line {line}: expected `x y w h score`, got {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("plugin i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Parses plugin output and shifts boxes by `(dx, dy)` into frame
/// coordinates.
pub fn parse_detections(output: &str, dx: i64, dy: i64) -> Result<Vec<ScoredBox>, PluginError> {
    let mut boxes = Vec::new();
    for (i, line) in output.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || PluginError::MalformedLine { line: i + 1, text: line.to_string() };
        let fields: Vec<f64> = line.split_ascii_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| bad())?;
        let [x, y, w, h, score] = fields[..] else { return Err(bad()) };
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 || !(0.0..=1.0).contains(&score) {
            return Err(bad());
        }
        let rect = RectPx::new(x.round() as i64, y.round() as i64, w.round() as i64, h.round() as i64);
        boxes.push(ScoredBox::scored(rect.translate(dx, dy), score));
    }
    Ok(boxes)
}

/// Runs `cmd` on `tile` and returns its detections in frame coordinates.
pub fn run_detector_plugin(tile: &RoiTile, cmd: &PluginCommand) -> Result<Vec<ScoredBox>, PluginError> {
    let img = RgbImage::from_raw(tile.rect.w as u32, tile.rect.h as u32, tile.pixels.clone())
        .ok_or_else(|| PluginError::Encode("tile size does not match its rect".into()))?;
    let png = encode_png(&img).map_err(|e| PluginError::Encode(e.to_string()))?;
    let output = run_command(&cmd.command, &png, cmd.timeout)?;
    parse_detections(&output, tile.rect.x, tile.rect.y)
}

fn run_command(command: &str, input: &[u8], timeout: Duration) -> Result<String, PluginError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(PluginError::Spawn)?;

    let mut stdin = child.stdin.take().expect("piped");
    let input = input.to_vec();
    // A plugin may exit without reading its input; the broken pipe is fine.
    let feeder = std::thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let mut stdout = child.stdout.take().expect("piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        stdout.read_to_end(&mut s).map(|_| s)
    });
    let mut stderr = child.stderr.take().expect("piped");
    let err_reader = std::thread::spawn(move || {
        let mut s = Vec::new();
        let _ = stderr.read_to_end(&mut s);
        s
    });

    let status = match child.wait_timeout(timeout)? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(PluginError::Timeout(timeout));
        }
    };
    let _ = feeder.join();
    let stdout = out_reader.join().expect("reader thread")?;
    let stderr = err_reader.join().expect("reader thread");
    if !status.success() {
        return Err(PluginError::Failed {
            status: status.to_string(),
            stderr: String::from_utf8_lossy(&stderr).trim().to_string(),
        });
    }
    String::from_utf8(stdout).map_err(|_| PluginError::MalformedLine { line: 0, text: "non-UTF-8 output".into() })
}

/// Output of the reference echo detector for a PNG: one box covering the
/// whole image with score 1.
pub fn echo_detections(png: &[u8]) -> Result<String, image::ImageError> {
    let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)?;
    Ok(format!("0 0 {} {} 1.0\n", img.width(), img.height()))
}
