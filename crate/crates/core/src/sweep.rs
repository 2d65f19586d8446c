//! Bandwidth sweeps: for every portion `r` on a grid, truncate each image's
//! proposals to the budget, match against ground truth and aggregate.

use crate::dataset::Dataset;
use crate::matching::{macro_average, match_boxes, MatchConfig, MatchCounts, MatchMode, MetricsPoint};
use crate::scalar::Scalar;
use crate::select::{select, BudgetPortion, ProposalSet, SelectionPolicy};
use crate::Error;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: [&str; 8] =
    ["r", "precision", "recall", "f1", "n_pred", "n_gt", "tp_gt", "matched_pred"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool counts over all images, then divide.
    #[default]
    Micro,
    /// Average per-image precision, recall and F1.
    Macro,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// A grid of portions, parsed from `log:LO:HI:N`, `lin:LO:HI:N` or
/// `list:A,B,...`. Log grids also include `r = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(Vec<f64>);

impl Grid {
    /// 50 log-spaced points from 1e-3 to 1, plus 0.
    pub fn default_log() -> Self {
        Grid::log(1e-3, 1.0, 50).expect("valid default grid")
    }

    pub fn log(lo: f64, hi: f64, n: usize) -> Result<Self, Error> {
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) || n == 0 {
            return Err(Error::Config(format!("bad log grid {lo}:{hi}:{n}")));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let mut values = vec![0.0];
        values.extend((0..n).map(|i| {
            if i == n - 1 {
                hi
            } else if i == 0 {
                lo
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        }));
        Grid::from_values(values)
    }

    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self, Error> {
        if n == 0 || lo > hi {
            return Err(Error::Config(format!("bad linear grid {lo}:{hi}:{n}")));
        }
        let values = (0..n)
            .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect();
        Grid::from_values(values)
    }

    pub fn from_values(mut values: Vec<f64>) -> Result<Self, Error> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRatio(*bad));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Grid(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Grid values converted into `S`.
    pub fn to_scalars<S: Scalar>(&self) -> Result<Vec<S>, Error> {
        self.0.iter().map(|&v| S::from_f64(v).ok_or(Error::InvalidRatio(v))).collect()
    }
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || Error::Config(format!("bad grid spec {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "list" => {
                let values: Result<Vec<f64>, _> = rest.split(',').map(|v| v.trim().parse()).collect();
                Grid::from_values(values.map_err(|_| bad())?)
            }
            "log" | "lin" => {
                let parts: Vec<&str> = rest.split(':').collect();
                let [lo, hi, n] = parts[..] else { return Err(bad()) };
                let lo: f64 = lo.parse().map_err(|_| bad())?;
                let hi: f64 = hi.parse().map_err(|_| bad())?;
                let n: usize = n.parse().map_err(|_| bad())?;
                if kind == "log" {
                    Grid::log(lo, hi, n)
                } else {
                    Grid::linear(lo, hi, n)
                }
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig<S> {
    /// Portions in ascending order.
    pub r_grid: Vec<S>,
    pub policy: SelectionPolicy,
    pub matching: MatchConfig<S>,
    pub aggregation: Aggregation,
    /// Worker threads for per-image evaluation; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl<S: Scalar> SweepConfig<S> {
    pub fn new(r_grid: Vec<S>, policy: SelectionPolicy) -> Self {
        SweepConfig {
            r_grid,
            policy,
            matching: MatchConfig::default(),
            aggregation: Aggregation::Micro,
            threads: None,
        }
    }
}

/// Counts and per-image metrics for one image at one portion.
pub fn evaluate_image<S: Scalar>(
    proposals: &ProposalSet<S>,
    ground_truth: &[crate::geometry::RectPx],
    r: S,
    policy: &SelectionPolicy,
    matching: &MatchConfig<S>,
) -> Result<MatchCounts, Error> {
    let selection = select(proposals, BudgetPortion::new(r)?, policy)?;
    let preds = selection.rects();
    let result = match_boxes(&preds, ground_truth, matching)?;
    Ok(MatchCounts::from_result(&result, preds.len(), ground_truth.len()))
}

/// One metrics row per grid value, in grid order.
pub fn sweep<S: Scalar>(
    dataset: &Dataset<S>,
    proposals: &BTreeMap<u64, ProposalSet<S>>,
    cfg: &SweepConfig<S>,
) -> Result<Vec<MetricsPoint<S>>, Error> {
    if cfg.r_grid.windows(2).any(|w| w[0].partial_cmp(&w[1]).is_none_or(|o| o.is_gt())) {
        return Err(Error::Config("r grid must be sorted ascending".into()));
    }
    let missing: Vec<u64> =
        dataset.images.iter().map(|i| i.id).filter(|id| !proposals.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingProposals(missing));
    }
    let jobs: Vec<(&ProposalSet<S>, &[crate::geometry::RectPx])> = dataset
        .images
        .iter()
        .map(|img| {
            let gts = dataset.annotations.get(&img.id).map(|a| a.boxes.as_slice()).unwrap_or(&[]);
            (&proposals[&img.id], gts)
        })
        .collect();

    let run = || {
        cfg.r_grid
            .iter()
            .map(|&r| {
                let per_image: Result<Vec<MatchCounts>, Error> = jobs
                    .par_iter()
                    .map(|(props, gts)| evaluate_image(props, gts, r, &cfg.policy, &cfg.matching))
                    .collect();
                let per_image = per_image?;
                Ok(match cfg.aggregation {
                    Aggregation::Micro => per_image.iter().copied().sum::<MatchCounts>().point(r),
                    Aggregation::Macro => {
                        let points: Vec<MetricsPoint<S>> = per_image.iter().map(|c| c.point(r)).collect();
                        macro_average(&points, r)
                    }
                })
            })
            .collect::<Result<Vec<_>, Error>>()
    };

    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes metrics rows as CSV with six decimals for the ratio columns.
pub fn write_metrics_csv<S: Scalar, W: Write>(out: W, points: &[MetricsPoint<S>]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for p in points {
        let c = p.counts;
        w.write_record([
            fmt6(p.r.to_f64()),
            fmt6(p.precision.to_f64()),
            fmt6(p.recall.to_f64()),
            fmt6(p.f1.to_f64()),
            c.n_pred.to_string(),
            c.n_gt.to_string(),
            c.tp_gt.to_string(),
            c.matched_pred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Settings that produced a metrics CSV, written next to it.
#[derive(Debug, Clone, Serialize)]
pub struct SweepMeta {
    pub policy: String,
    pub accounting: String,
    pub exact_small_n: Option<usize>,
    pub match_mode: MatchMode,
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub grid_points: usize,
}

impl SweepMeta {
    pub fn from_config<S: Scalar>(cfg: &SweepConfig<S>) -> Self {
        SweepMeta {
            policy: cfg.policy.mode.to_string(),
            accounting: cfg.policy.accounting.to_string(),
            exact_small_n: cfg.policy.exact_small_n,
            match_mode: cfg.matching.mode,
            threshold: cfg.matching.threshold.to_f64(),
            aggregation: cfg.aggregation,
            grid_points: cfg.r_grid.len(),
        }
    }
}

/// Path of the metadata sidecar for a CSV at `csv`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes the CSV and its `.meta.json` sidecar.
pub fn write_sweep_outputs<S: Scalar>(
    csv_path: &Path,
    points: &[MetricsPoint<S>],
    cfg: &SweepConfig<S>,
) -> Result<(), Error> {
    let file = std::fs::File::create(csv_path)?;
    write_metrics_csv(std::io::BufWriter::new(file), points)?;
    let meta = serde_json::to_string_pretty(&SweepMeta::from_config(cfg))?;
    std::fs::write(meta_path(csv_path), meta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameDims, RectPx};
    use crate::matching::AnnotationSet;
    use crate::select::{Accounting, ScoredBox, SelectionMode};
    use crate::dataset::ImageRecord;

    fn one_image(gts: Vec<RectPx>, preds: Vec<ScoredBox<f64>>) -> (Dataset<f64>, BTreeMap<u64, ProposalSet<f64>>) {
        let frame = FrameDims::new(200, 100).unwrap();
        let ds = Dataset {
            images: vec![ImageRecord { id: 1, file_name: "a.png".into(), width: 200, height: 100 }],
            annotations: BTreeMap::from([(1, AnnotationSet { frame, boxes: gts })]),
            detections: None,
            clamped: 0,
        };
        let props = BTreeMap::from([(1, ProposalSet::new(frame, preds).unwrap())]);
        (ds, props)
    }

    #[test]
    fn default_grid_shape() {
        let g = Grid::default_log();
        assert_eq!(g.len(), 51);
        assert_eq!(g.values()[0], 0.0);
        assert_eq!(g.values()[1], 1e-3);
        assert_eq!(*g.values().last().unwrap(), 1.0);
        assert!(g.values().windows(2).all(|w| w[0] < w[1]));
        assert_eq!("log:1e-3:1:50".parse::<Grid>().unwrap(), g);
        assert_eq!("list:1,0,0.5".parse::<Grid>().unwrap().values(), &[0.0, 0.5, 1.0]);
        assert_eq!("lin:0:1:5".parse::<Grid>().unwrap().len(), 5);
        assert!("log:0:1:5".parse::<Grid>().is_err());
        assert!("list:2".parse::<Grid>().is_err());
    }

    #[test]
    fn identity_predictions_at_full_budget() {
        let gts = vec![RectPx::new(0, 0, 10, 10), RectPx::new(50, 50, 20, 20)];
        let preds = gts.iter().map(|r| ScoredBox::unscored(*r)).collect();
        let (ds, props) = one_image(gts, preds);
        let cfg = SweepConfig::new(vec![0.0, 1.0], SelectionPolicy::default());
        let pts = sweep(&ds, &props, &cfg).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].recall, 0.0);
        assert_eq!((pts[1].precision, pts[1].recall, pts[1].f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn full_frame_prediction_limit_case() {
        let gts = vec![RectPx::new(0, 0, 10, 10), RectPx::new(50, 50, 20, 20), RectPx::new(150, 10, 5, 5)];
        let preds = vec![ScoredBox::scored(RectPx::new(0, 0, 200, 100), 0.9)];
        let (ds, props) = one_image(gts, preds);
        let policy = SelectionPolicy::new(SelectionMode::ConfidencePrefix, Accounting::UnionPixels);
        let cfg = SweepConfig::new(vec![1.0], policy);
        let pts = sweep(&ds, &props, &cfg).unwrap();
        assert_eq!(pts[0].recall, 1.0);
    }

    #[test]
    fn missing_proposals_listed() {
        let (ds, _) = one_image(vec![], vec![]);
        let err = sweep(&ds, &BTreeMap::new(), &SweepConfig::new(vec![0.5], SelectionPolicy::default()))
            .unwrap_err();
        assert!(matches!(err, Error::MissingProposals(ids) if ids == vec![1]));
    }

    #[test]
    fn csv_layout() {
        let counts = MatchCounts { n_pred: 3, n_gt: 4, tp_gt: 3, matched_pred: 2 };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[counts.point(0.5f64)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "r,precision,recall,f1,n_pred,n_gt,tp_gt,matched_pred\n0.500000,0.666667,0.750000,0.705882,3,4,3,2\n"
        );
    }

    #[test]
    fn meta_sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let cfg = SweepConfig::<f64>::new(vec![0.5], SelectionPolicy::default());
        write_sweep_outputs(&path, &[], &cfg).unwrap();
        let meta = std::fs::read_to_string(meta_path(&path)).unwrap();
        assert!(meta.contains("\"accounting\": \"union\""));
    }
}
