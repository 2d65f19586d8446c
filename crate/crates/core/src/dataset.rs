//! COCO-style annotation and detection files.
//!
//! Annotations are an object with `images` and `annotations` arrays. Each
//! annotation carries `image_id` and `bbox: [x, y, w, h]`; detections add a
//! `score`. Detection files may also be a bare array of annotation records,
//! the usual shape of COCO result files.

use crate::geometry::{FrameDims, RectPx};
use crate::matching::AnnotationSet;
use crate::scalar::Scalar;
use crate::select::{ProposalSet, ScoredBox};
use crate::Error;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn dims(&self) -> Result<FrameDims, Error> {
        FrameDims::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category_id: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DetectionsFile {
    Coco(CocoFile),
    Bare(Vec<CocoAnnotation>),
}

/// Images with their ground truth and, optionally, per-image proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub images: Vec<ImageRecord>,
    pub annotations: BTreeMap<u64, AnnotationSet>,
    pub detections: Option<BTreeMap<u64, ProposalSet<S>>>,
    /// Boxes clipped to their image or dropped as empty while loading.
    pub clamped: usize,
}

struct Ingest {
    dims: BTreeMap<u64, FrameDims>,
    clamped: usize,
}

impl Ingest {
    fn new(images: &[ImageRecord]) -> Result<Self, Error> {
        let mut dims = BTreeMap::new();
        for img in images {
            if dims.insert(img.id, img.dims()?).is_some() {
                return Err(Error::DuplicateImageId(img.id));
            }
        }
        Ok(Ingest { dims, clamped: 0 })
    }

    // Rounded, validated and clipped rect; None when nothing is left in frame.
    fn rect(&mut self, index: usize, ann: &CocoAnnotation) -> Result<(FrameDims, Option<RectPx>), Error> {
        let dims = *self
            .dims
            .get(&ann.image_id)
            .ok_or(Error::DanglingImageId { annotation: index, image_id: ann.image_id })?;
        let [x, y, w, h] = ann.bbox;
        if !(w >= 0.0 && h >= 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::NegativeBox { record: index, w, h });
        }
        let rect = RectPx::new(x.round() as i64, y.round() as i64, w.round() as i64, h.round() as i64);
        if dims.contains(&rect) && !rect.is_empty() {
            return Ok((dims, Some(rect)));
        }
        self.clamped += 1;
        let clipped = dims.clamp(&rect);
        log::warn!("record {index}: box {rect:?} clipped to {clipped:?} in image {}", ann.image_id);
        Ok((dims, (!clipped.is_empty()).then_some(clipped)))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Image records from any COCO-style file.
pub fn load_images(path: &Path) -> Result<Vec<ImageRecord>, Error> {
    let file: CocoFile = read_json(path)?;
    Ok(file.images)
}

impl<S: Scalar> Dataset<S> {
    pub fn load(annotations: &Path, detections: Option<&Path>) -> Result<Self, Error> {
        let ann: CocoFile = read_json(annotations)?;
        let det = detections.map(read_json::<DetectionsFile>).transpose()?;
        Self::from_parts(ann, det)
    }

    pub fn from_json(annotations: &str, detections: Option<&str>) -> Result<Self, Error> {
        let ann: CocoFile = serde_json::from_str(annotations)?;
        let det = detections.map(serde_json::from_str::<DetectionsFile>).transpose()?;
        Self::from_parts(ann, det)
    }

    /// Builds a dataset holding only detections for `images`, with no ground
    /// truth.
    pub fn detections_only(images: Vec<ImageRecord>, detections: &Path) -> Result<Self, Error> {
        let det: DetectionsFile = read_json(detections)?;
        Self::from_parts(CocoFile { images, annotations: Vec::new() }, Some(det))
    }

    fn from_parts(ann: CocoFile, det: Option<DetectionsFile>) -> Result<Self, Error> {
        let mut ingest = Ingest::new(&ann.images)?;
        let mut annotations: BTreeMap<u64, AnnotationSet> = ann
            .images
            .iter()
            .map(|img| Ok((img.id, AnnotationSet { frame: img.dims()?, boxes: Vec::new() })))
            .collect::<Result<_, Error>>()?;
        for (i, a) in ann.annotations.iter().enumerate() {
            let (_, rect) = ingest.rect(i, a)?;
            if let Some(rect) = rect {
                annotations.get_mut(&a.image_id).expect("validated").boxes.push(rect);
            }
        }

        let detections = match det {
            None => None,
            Some(file) => {
                let records = match file {
                    DetectionsFile::Coco(f) => f.annotations,
                    DetectionsFile::Bare(v) => v,
                };
                let mut map: BTreeMap<u64, ProposalSet<S>> = ingest
                    .dims
                    .iter()
                    .map(|(id, d)| (*id, ProposalSet::empty(*d)))
                    .collect();
                for (i, a) in records.iter().enumerate() {
                    let (_, rect) = ingest.rect(i, a)?;
                    let Some(rect) = rect else { continue };
                    let confidence = match a.score {
                        None => None,
                        Some(s) if (0.0..=1.0).contains(&s) => {
                            Some(S::from_f64(s).ok_or(Error::InvalidRatio(s))?)
                        }
                        Some(s) => return Err(Error::InvalidRatio(s)),
                    };
                    map.get_mut(&a.image_id)
                        .expect("validated")
                        .boxes
                        .push(ScoredBox { rect, confidence });
                }
                Some(map)
            }
        };

        Ok(Dataset { images: ann.images, annotations, detections, clamped: ingest.clamped })
    }

    pub fn image_ids(&self) -> BTreeSet<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    fn to_coco(&self, boxes: impl Iterator<Item = (u64, RectPx, Option<f64>)>) -> CocoFile {
        CocoFile {
            images: self.images.clone(),
            annotations: boxes
                .enumerate()
                .map(|(i, (image_id, r, score))| CocoAnnotation {
                    id: Some(i as u64 + 1),
                    image_id,
                    bbox: [r.x as f64, r.y as f64, r.w as f64, r.h as f64],
                    score,
                    category_id: None,
                })
                .collect(),
        }
    }

    pub fn annotations_json(&self) -> Result<String, Error> {
        let boxes = self
            .annotations
            .iter()
            .flat_map(|(id, set)| set.boxes.iter().map(move |r| (*id, *r, None)));
        Ok(serde_json::to_string_pretty(&self.to_coco(boxes))?)
    }

    /// Detections as a COCO-style object; empty when there are none.
    pub fn detections_json(&self) -> Result<String, Error> {
        let boxes = self.detections.iter().flatten().flat_map(|(id, set)| {
            set.boxes.iter().map(move |b| (*id, b.rect, b.confidence.map(Scalar::to_f64)))
        });
        Ok(serde_json::to_string_pretty(&self.to_coco(boxes))?)
    }

    pub fn save_annotations(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.annotations_json()?)?;
        Ok(())
    }

    pub fn save_detections(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.detections_json()?)?;
        Ok(())
    }
}

/// Grows `rect` to at least `min_w` x `min_h` about its center pixel.
///
/// A grown box that would leave the frame is translated back inside. When
/// the frame is smaller than the minimum along an axis the box spans that
/// axis. Axes already at or above the minimum are left alone.
pub fn expand_rect(rect: &RectPx, frame: FrameDims, min_w: u32, min_h: u32) -> RectPx {
    fn axis(start: i64, len: i64, min: i64, extent: i64) -> (i64, i64) {
        if len >= min {
            return (start, len);
        }
        let new_len = min.min(extent);
        let center = start + len / 2;
        let new_start = (center - new_len / 2).clamp(0, extent - new_len);
        (new_start, new_len)
    }
    let (x, w) = axis(rect.x, rect.w, min_w as i64, frame.width as i64);
    let (y, h) = axis(rect.y, rect.h, min_h as i64, frame.height as i64);
    RectPx::new(x, y, w, h)
}

/// Applies [`expand_rect`] to every ground-truth box.
pub fn expand_min_size<S: Clone>(dataset: &Dataset<S>, min_w: u32, min_h: u32) -> Result<Dataset<S>, Error> {
    if min_w == 0 || min_h == 0 {
        return Err(Error::Config("minimum box size must be at least 1x1".into()));
    }
    let mut out = dataset.clone();
    for set in out.annotations.values_mut() {
        for b in &mut set.boxes {
            *b = expand_rect(b, set.frame, min_w, min_h);
        }
    }
    Ok(out)
}
