//! Directory-based inputs: heatmaps and frame sequences.

use anyhow::{bail, Context, Result};
use roilink_core::dataset::ImageRecord;
use roilink_core::raster::read_pfm;
use roilink_core::{Heatmap, ProposalSet, ProposeConfig};
use roilink_link::{FrameSource, LinkError, SourceFrame};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Files in `dir` with one of `extensions`, sorted by name.
pub fn list_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no {} files in {}", extensions.join("/"), dir.display());
    }
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Heatmaps keyed by file stem.
pub fn load_heatmaps(dir: &Path) -> Result<BTreeMap<String, Heatmap>> {
    list_files(dir, &["pfm"])?
        .into_iter()
        .map(|p| Ok((stem(&p), read_pfm(&p).with_context(|| format!("reading {}", p.display()))?)))
        .collect()
}

/// Proposals for every heatmap in `dir`, keyed by file stem.
pub fn propose_dir(dir: &Path, cfg: &ProposeConfig) -> Result<BTreeMap<String, ProposalSet>> {
    load_heatmaps(dir)?
        .into_iter()
        .map(|(k, h)| Ok((k, roilink_core::propose_from_heatmap(&h, cfg)?)))
        .collect()
}

/// Image records for `stems` numbered from 1, used when no image list is
/// given.
pub fn records_for(sets: &BTreeMap<String, ProposalSet>) -> Vec<ImageRecord> {
    sets.iter()
        .enumerate()
        .map(|(i, (stem, p))| ImageRecord {
            id: i as u64 + 1,
            file_name: format!("{stem}.png"),
            width: p.frame.width,
            height: p.frame.height,
        })
        .collect()
}

/// Maps proposal sets keyed by stem onto the ids of `images`, matching
/// `file_name` stems.
pub fn by_image_id(
    images: &[ImageRecord],
    sets: BTreeMap<String, ProposalSet>,
) -> Result<BTreeMap<u64, ProposalSet>> {
    let mut out = BTreeMap::new();
    let mut sets = sets;
    for img in images {
        let key = stem(Path::new(&img.file_name));
        if let Some(p) = sets.remove(&key) {
            if p.frame != img.dims()? {
                bail!("heatmap {key} is {}, image {} is {}x{}", p.frame, img.id, img.width, img.height);
            }
            out.insert(img.id, p);
        }
    }
    Ok(out)
}

/// Where a drone gets its proposals.
pub enum ProposalSource {
    /// Keyed by frame file stem.
    ByStem(BTreeMap<String, ProposalSet>),
    None,
}

/// Frames read from image files in a directory, in name order.
pub struct DirSource {
    frames: std::vec::IntoIter<PathBuf>,
    proposals: ProposalSource,
    repeat: usize,
    all: Vec<PathBuf>,
}

impl DirSource {
    pub fn new(dir: &Path, proposals: ProposalSource, repeat: usize) -> Result<Self> {
        let all = list_files(dir, &["png", "ppm", "pnm"])?;
        Ok(DirSource { frames: all.clone().into_iter(), proposals, repeat: repeat.max(1) - 1, all })
    }
}

impl FrameSource for DirSource {
    fn next_frame(&mut self) -> Option<Result<SourceFrame, LinkError>> {
        let path = match self.frames.next() {
            Some(p) => p,
            None if self.repeat > 0 => {
                self.repeat -= 1;
                self.frames = self.all.clone().into_iter();
                self.frames.next()?
            }
            None => return None,
        };
        Some((|| {
            let image = image::open(&path)?.to_rgb8();
            let dims = roilink_core::FrameDims::new(image.width(), image.height())?;
            let proposals = match &self.proposals {
                ProposalSource::ByStem(map) => match map.get(&stem(&path)) {
                    Some(p) if p.frame == dims => p.clone(),
                    Some(p) => return Err(LinkError::FrameSize { expected: dims, got: p.frame }),
                    None => {
                        log::warn!("no proposals for {}", path.display());
                        ProposalSet::empty(dims)
                    }
                },
                ProposalSource::None => ProposalSet::empty(dims),
            };
            Ok(SourceFrame { image, proposals, timestamp_us: None })
        })())
    }
}
