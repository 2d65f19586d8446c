use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use roilink_core::bench::{bench, BenchConfig, Stage};
use roilink_core::dataset::{expand_min_size, load_images, ImageRecord};
use roilink_core::sweep::{sweep, write_sweep_outputs, Aggregation, Grid};
use roilink_core::{
    select, Accounting, BudgetPortion, Connectivity, Dataset, FrameDims, MatchConfig, MatchMode, ProposalSet,
    ProposeConfig, ScoredBox, SelectionMode, SelectionPolicy, SweepConfig,
};
use roilink_link::plugin::{echo_detections, PluginCommand};
use roilink_link::{
    DroneConfig, DroneSession, GroundConfig, GroundSession, GroundSink, LinkOptions, OperatorBudget, Recorder,
    WsBridge,
};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

mod config;
mod inputs;

use inputs::{by_image_id, propose_dir, records_for, DirSource, ProposalSource};

#[derive(Parser)]
#[command(name = "roilink", version, about = "Bandwidth-budgeted RoI streaming and evaluation")]
struct Cli {
    /// TOML file supplying default flag values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// Selection order: `area` (largest first) or `confidence` (highest
    /// score first, stopping at the first box that does not fit).
    #[arg(long, default_value = "area")]
    policy: SelectionMode,
    /// Budget accounting: `union` counts overlapping pixels once, `sum`
    /// counts every crop in full.
    #[arg(long, default_value = "union")]
    accounting: Accounting,
    /// Solve area instances with at most this many boxes exactly.
    #[arg(long, value_name = "N")]
    exact_small_n: Option<usize>,
}

impl PolicyArgs {
    fn policy(&self) -> Result<SelectionPolicy> {
        let p = SelectionPolicy::new(self.policy, self.accounting);
        Ok(match self.exact_small_n {
            Some(n) => p.with_exact_small_n(n)?,
            None => p,
        })
    }
}

#[derive(Args, Clone)]
struct SaliencyArgs {
    /// Heat values at or above this are foreground.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Pixel connectivity, 4 or 8.
    #[arg(long, default_value = "8")]
    connectivity: Connectivity,
    /// Drop components with fewer pixels than this box area.
    #[arg(long, default_value_t = 0)]
    min_area: u64,
}

impl SaliencyArgs {
    fn config(&self) -> ProposeConfig {
        ProposeConfig { threshold: self.threshold, connectivity: self.connectivity, min_area: self.min_area }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract RoI proposals from a directory of PFM heatmaps.
    #[command(args_override_self = true)]
    Propose {
        #[arg(long)]
        heatmaps: PathBuf,
        /// COCO file whose images give ids; heatmaps match on file stem.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        saliency: SaliencyArgs,
    },
    /// Truncate detections to a bandwidth portion.
    #[command(args_override_self = true)]
    Select {
        #[arg(long)]
        detections: PathBuf,
        /// COCO file listing the images; defaults to the detections file.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Portion of each frame's pixels that may be sent.
        #[arg(long)]
        r: f64,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grow annotation boxes to a minimum size about their centers.
    #[command(args_override_self = true)]
    Expand {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 500)]
        min_w: u32,
        #[arg(long, default_value_t = 500)]
        min_h: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall and F1 over a grid of bandwidth portions.
    #[command(args_override_self = true)]
    Sweep {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, conflicts_with = "heatmaps", required_unless_present = "heatmaps")]
        detections: Option<PathBuf>,
        /// Propose from PFM heatmaps instead, matched to images by file stem.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[command(flatten)]
        saliency: SaliencyArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// `log:LO:HI:N` (plus r = 0), `lin:LO:HI:N` or `list:R1,R2,...`.
        #[arg(long, default_value = "log:1e-3:1:50")]
        grid: Grid,
        #[arg(long, default_value = "micro")]
        agg: Aggregation,
        /// Match rule: `iogt` (one-to-many) or `iou` (one-to-one).
        #[arg(long = "match", default_value = "iogt")]
        match_mode: MatchMode,
        #[arg(long, default_value_t = 0.5)]
        match_threshold: f64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time pipeline stages on synthetic heatmaps.
    #[command(args_override_self = true)]
    Bench {
        #[arg(long, default_value = "3840x2160")]
        dims: FrameDims,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, value_delimiter = ',', default_value = "binarize,components")]
        stages: Vec<Stage>,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Stream a frame directory to one ground station.
    #[command(args_override_self = true)]
    Drone {
        #[arg(long)]
        listen: String,
        /// PNG or PPM frames, sent in file name order.
        #[arg(long)]
        frames: PathBuf,
        /// PFM heatmaps matched to frames by file stem.
        #[arg(long, conflicts_with = "detections")]
        heatmaps: Option<PathBuf>,
        /// COCO detections matched to frames by image file name stem.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// COCO file listing images for the detections.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        r: f64,
        #[arg(long, default_value_t = 8)]
        downscale: u16,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        saliency: SaliencyArgs,
        /// Send operator tiles outside the budget instead of charging them.
        #[arg(long)]
        operator_override: bool,
        /// Frames in flight before waiting for the ground station; 0 for no
        /// limit.
        #[arg(long, default_value_t = 2)]
        window: u64,
        /// Send the sequence this many times.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Receive from a drone, detect, publish and record.
    #[command(args_override_self = true)]
    Ground {
        #[arg(long)]
        connect: String,
        /// Detector command run with `sh -c` on each tile.
        #[arg(long)]
        plugin: Option<String>,
        #[arg(long, default_value_t = 5.0)]
        plugin_timeout: f64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        ws_listen: Option<String>,
        #[arg(long)]
        record: Option<PathBuf>,
        /// Keep retrying the connection for this many seconds.
        #[arg(long, default_value_t = 10.0)]
        connect_timeout: f64,
    },
    /// Reference detector: reads a PNG on stdin, reports one box covering it.
    #[command(hide = true)]
    EchoDetector,
}

const SUBCOMMANDS: &[&str] = &["propose", "select", "expand", "sweep", "bench", "drone", "ground", "echo-detector"];

fn detections_by_id(path: &Path, images: Option<&Path>) -> Result<(Vec<ImageRecord>, BTreeMap<u64, ProposalSet>)> {
    let images = load_images(images.unwrap_or(path)).context("reading image list")?;
    let ds = Dataset::detections_only(images.clone(), path)
        .with_context(|| format!("reading detections {}", path.display()))?;
    Ok((images, ds.detections.unwrap_or_default()))
}

fn save_detections(images: Vec<ImageRecord>, detections: BTreeMap<u64, ProposalSet>, out: &Path) -> Result<()> {
    let ds = Dataset { images, annotations: BTreeMap::new(), detections: Some(detections), clamped: 0 };
    ds.save_detections(out).with_context(|| format!("writing {}", out.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Propose { heatmaps, images, out, saliency } => {
            let sets = propose_dir(&heatmaps, &saliency.config())?;
            let (records, by_id) = match images {
                Some(path) => {
                    let records = load_images(&path)?;
                    let by_id = by_image_id(&records, sets)?;
                    (records, by_id)
                }
                None => {
                    let records = records_for(&sets);
                    let by_id = records.iter().map(|r| r.id).zip(sets.into_values()).collect();
                    (records, by_id)
                }
            };
            let n: usize = by_id.values().map(|p: &ProposalSet| p.boxes.len()).sum();
            save_detections(records, by_id, &out)?;
            log::info!("wrote {n} proposals to {}", out.display());
        }
        Command::Select { detections, images, r, policy, out } => {
            let (records, sets) = detections_by_id(&detections, images.as_deref())?;
            let budget = BudgetPortion::new(r)?;
            let policy = policy.policy()?;
            let mut selected = BTreeMap::new();
            for (id, props) in &sets {
                let sel = select(props, budget, &policy)?;
                let score_of = |rect| props.boxes.iter().find(|b| b.rect == rect).and_then(|b| b.confidence);
                let mut boxes: Vec<ScoredBox> =
                    sel.full.iter().map(|r| ScoredBox { rect: *r, confidence: score_of(*r) }).collect();
                if let Some(s) = sel.shrunk {
                    boxes.push(ScoredBox { rect: s.rect, confidence: score_of(s.source) });
                }
                selected.insert(*id, ProposalSet::new(props.frame, boxes)?);
            }
            save_detections(records, selected, &out)?;
        }
        Command::Expand { annotations, min_w, min_h, out } => {
            let ds = Dataset::load(&annotations, None)?;
            let grown = expand_min_size(&ds, min_w, min_h)?;
            grown.save_annotations(&out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Sweep {
            annotations,
            detections,
            heatmaps,
            saliency,
            policy,
            grid,
            agg,
            match_mode,
            match_threshold,
            threads,
            out,
        } => {
            let dataset = Dataset::load(&annotations, detections.as_deref())?;
            let proposals = match (&dataset.detections, heatmaps) {
                (Some(d), _) => d.clone(),
                (None, Some(dir)) => by_image_id(&dataset.images, propose_dir(&dir, &saliency.config())?)?,
                (None, None) => bail!("either --detections or --heatmaps is required"),
            };
            let mut cfg = SweepConfig::new(grid.to_scalars()?, policy.policy()?);
            cfg.aggregation = agg;
            cfg.matching = MatchConfig { threshold: match_threshold, mode: match_mode };
            cfg.threads = threads;
            let points = sweep(&dataset, &proposals, &cfg)?;
            write_sweep_outputs(&out, &points, &cfg)?;
            log::info!("wrote {} rows to {}", points.len(), out.display());
        }
        Command::Bench { dims, frames, stages, warmup, seed, json } => {
            let mut cfg = BenchConfig::new(dims, frames);
            cfg.warmup = warmup;
            cfg.seed = seed;
            let report = bench(&stages, &cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{} frames at {}", report.frames, report.dims);
                for s in &report.stages {
                    println!("{:<12} {:>10.1} fps", s.name, s.fps);
                }
                println!("{:<12} {:>10.1} fps", "serial", report.serial_fps);
                println!("{:<12} {:>10.1} fps", "parallel", report.parallel_fps);
                println!("{:<12} {:>10.1} fps", "measured", report.measured_serial_fps);
            }
        }
        Command::Drone {
            listen,
            frames,
            heatmaps,
            detections,
            images,
            r,
            downscale,
            policy,
            saliency,
            operator_override,
            window,
            repeat,
        } => {
            let proposals = if let Some(dir) = heatmaps {
                ProposalSource::ByStem(propose_dir(&dir, &saliency.config())?)
            } else if let Some(path) = detections {
                let (records, sets) = detections_by_id(&path, images.as_deref())?;
                let by_stem = records
                    .iter()
                    .filter_map(|img| {
                        sets.get(&img.id).map(|p| (inputs::stem(Path::new(&img.file_name)), p.clone()))
                    })
                    .collect();
                ProposalSource::ByStem(by_stem)
            } else {
                log::warn!("no proposals given; only operator requests will be streamed");
                ProposalSource::None
            };
            let mut source = DirSource::new(&frames, proposals, repeat)?;
            let first = inputs::list_files(&frames, &["png", "ppm", "pnm"])?;
            let (w, h) = image::image_dimensions(&first[0])?;
            let mut cfg = DroneConfig::new(FrameDims::new(w, h)?, BudgetPortion::new(r)?);
            cfg.downscale = downscale;
            cfg.policy = policy.policy()?;
            if operator_override {
                cfg.operator_budget = OperatorBudget::Override;
            }
            let listener = std::net::TcpListener::bind(&listen).with_context(|| format!("listening on {listen}"))?;
            log::info!("waiting for a ground station on {}", listener.local_addr()?);
            let (stream, peer) = listener.accept()?;
            log::info!("ground station {peer} connected");
            let opts = LinkOptions { window: (window > 0).then_some(window), ..LinkOptions::default() };
            let stats = roilink_link::run_drone(stream, DroneSession::new(cfg), &mut source, &opts)?;
            log::info!(
                "sent {} frames, {} tiles, {} bytes; {} operator requests",
                stats.frames,
                stats.tiles,
                stats.bytes_sent,
                stats.requests_received
            );
        }
        Command::Ground { connect, plugin, plugin_timeout, workers, ws_listen, record, connect_timeout } => {
            let plugin = plugin.map(|cmd| PluginCommand::new(cmd).with_timeout(Duration::from_secs_f64(plugin_timeout)));
            let session = GroundSession::new(GroundConfig { plugin, workers });
            let mut bridge = match ws_listen {
                Some(addr) => {
                    let b = WsBridge::bind(&addr, session.upstream())?;
                    log::info!("operator bridge on ws://{}", b.local_addr());
                    Some(b)
                }
                None => None,
            };
            let mut recorder = record.map(Recorder::new).transpose()?;
            let deadline = Instant::now() + Duration::from_secs_f64(connect_timeout);
            let stream = loop {
                match std::net::TcpStream::connect(&connect) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        log::debug!("connect to {connect} failed ({e}), retrying");
                        std::thread::sleep(Duration::from_millis(200));
                    }
                    Err(e) => return Err(e).with_context(|| format!("connecting to {connect}")),
                }
            };
            let mut sinks: Vec<&mut dyn GroundSink> = Vec::new();
            if let Some(b) = bridge.as_mut() {
                sinks.push(b);
            }
            if let Some(r) = recorder.as_mut() {
                sinks.push(r);
            }
            let stats = session.run(stream, &mut sinks)?;
            log::info!(
                "received {} frames ({} dropped, {} malformed messages), {} detections",
                stats.frames,
                stats.dropped_frames,
                stats.malformed,
                stats.detections
            );
        }
        Command::EchoDetector => {
            let mut png = Vec::new();
            std::io::stdin().read_to_end(&mut png)?;
            let out = echo_detections(&png)?;
            std::io::stdout().write_all(out.as_bytes())?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROILINK_LOG", "info")).init();
    let args = match config::apply(std::env::args_os().collect(), SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    };
    let cli = Cli::parse_from(args);
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
