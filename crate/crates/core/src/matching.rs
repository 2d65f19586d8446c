//! Matching predictions to ground truth and the derived precision, recall
//! and F1.
//!
//! Two regimes are supported. [`MatchMode::OneToOneIoU`] is the usual
//! detection protocol: the globally best IoU pair is matched first and both
//! boxes leave the pool. [`MatchMode::OneToManyIoGT`] scores a pair by the
//! fraction of the ground-truth box the prediction covers, and a prediction
//! may account for any number of ground-truth boxes. That makes a single
//! frame-sized RoI a perfect-recall answer, which is the intended semantics
//! for RoI proposal.

use crate::geometry::{iogt, iou, FrameDims, RectPx};
use crate::scalar::Scalar;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Ground-truth boxes of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    pub frame: FrameDims,
    pub boxes: Vec<RectPx>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    OneToOneIoU,
    #[default]
    OneToManyIoGT,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iou" | "one-to-one" => Ok(MatchMode::OneToOneIoU),
            "iogt" | "one-to-many" => Ok(MatchMode::OneToManyIoGT),
            other => Err(Error::Config(format!("unknown match mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig<T> {
    pub threshold: T,
    pub mode: MatchMode,
}

impl<T: Scalar> Default for MatchConfig<T> {
    fn default() -> Self {
        MatchConfig { threshold: T::from_counts(1, 2), mode: MatchMode::OneToManyIoGT }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub matched_gt: BTreeSet<usize>,
    pub matched_pred: BTreeSet<usize>,
    /// `(prediction index, ground-truth index)`.
    pub pairs: Vec<(usize, usize)>,
}

/// Dispatch on `cfg.mode`.
pub fn match_boxes<T: Scalar>(
    preds: &[RectPx],
    gts: &[RectPx],
    cfg: &MatchConfig<T>,
) -> Result<MatchResult, Error> {
    match cfg.mode {
        MatchMode::OneToOneIoU => Ok(match_one_to_one(preds, gts, cfg.threshold)),
        MatchMode::OneToManyIoGT => match_iogt(preds, gts, cfg.threshold),
    }
}

/// Greedy max-first one-to-one matching on IoU.
///
/// Equivalent to repeatedly taking the best remaining pair with
/// `IoU >= threshold` and removing both boxes. Equal scores are resolved by
/// the lower prediction index, then the lower ground-truth index.
pub fn match_one_to_one<T: Scalar>(preds: &[RectPx], gts: &[RectPx], threshold: T) -> MatchResult {
    let mut candidates: Vec<(T, usize, usize)> = Vec::new();
    for (j, p) in preds.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            let score: T = iou(p, g);
            if score >= threshold && score > T::zero() {
                candidates.push((score, j, k));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut result = MatchResult::default();
    for (_, j, k) in candidates {
        if result.matched_pred.contains(&j) || result.matched_gt.contains(&k) {
            continue;
        }
        result.matched_pred.insert(j);
        result.matched_gt.insert(k);
        result.pairs.push((j, k));
    }
    result
}

/// One-to-many matching on IoGT.
///
/// Because boxes are never removed from the pool, the max-first procedure
/// reduces to: a ground-truth box is matched iff its best IoGT over all
/// predictions reaches the threshold, and likewise for predictions.
pub fn match_iogt<T: Scalar>(
    preds: &[RectPx],
    gts: &[RectPx],
    threshold: T,
) -> Result<MatchResult, Error> {
    if let Some(g) = gts.iter().find(|g| g.is_empty()) {
        return Err(Error::DegenerateGroundTruth(*g));
    }
    let mut result = MatchResult::default();
    for (j, p) in preds.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            let score: T = iogt(p, g)?;
            if score >= threshold && score > T::zero() {
                result.matched_pred.insert(j);
                result.matched_gt.insert(k);
                result.pairs.push((j, k));
            }
        }
    }
    Ok(result)
}

/// Raw counts behind a metrics row. Adding counts pools images (micro
/// aggregation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub n_pred: u64,
    pub n_gt: u64,
    pub tp_gt: u64,
    pub matched_pred: u64,
}

impl MatchCounts {
    pub fn from_result(result: &MatchResult, n_pred: usize, n_gt: usize) -> Self {
        MatchCounts {
            n_pred: n_pred as u64,
            n_gt: n_gt as u64,
            tp_gt: result.matched_gt.len() as u64,
            matched_pred: result.matched_pred.len() as u64,
        }
    }

    // (numerator, denominator) pairs with the zero-count conventions applied.
    fn recall_frac(&self) -> (u64, u64) {
        if self.n_gt == 0 {
            (1, 1)
        } else {
            (self.tp_gt, self.n_gt)
        }
    }

    fn precision_frac(&self) -> (u64, u64) {
        match (self.n_pred, self.n_gt) {
            (0, 0) => (1, 1),
            (0, _) => (0, 1),
            (n, _) => (self.matched_pred, n),
        }
    }

    /// Metrics row at portion `r`, computed from exact integer fractions.
    pub fn point<T: Scalar>(&self, r: T) -> MetricsPoint<T> {
        let (pn, pd) = self.precision_frac();
        let (rn, rd) = self.recall_frac();
        // 2PR / (P + R) = 2 pn rn / (pn rd + rn pd)
        let num = 2 * pn as u128 * rn as u128;
        let den = pn as u128 * rd as u128 + rn as u128 * pd as u128;
        let f1 = if num == 0 { T::zero() } else { ratio_u128(num, den) };
        MetricsPoint {
            r,
            precision: T::from_counts(pn, pd),
            recall: T::from_counts(rn, rd),
            f1,
            counts: *self,
        }
    }
}

fn ratio_u128<T: Scalar>(num: u128, den: u128) -> T {
    let g = gcd(num, den);
    let (mut n, mut d) = (num / g, den / g);
    while d > u64::MAX as u128 {
        n >>= 1;
        d >>= 1;
    }
    T::from_counts(n as u64, d as u64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl std::ops::Add for MatchCounts {
    type Output = MatchCounts;

    fn add(self, o: MatchCounts) -> MatchCounts {
        MatchCounts {
            n_pred: self.n_pred + o.n_pred,
            n_gt: self.n_gt + o.n_gt,
            tp_gt: self.tp_gt + o.tp_gt,
            matched_pred: self.matched_pred + o.matched_pred,
        }
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = MatchCounts>>(iter: I) -> Self {
        iter.fold(MatchCounts::default(), |a, b| a + b)
    }
}

/// One row of a bandwidth sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsPoint<T> {
    pub r: T,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub counts: MatchCounts,
}

/// Precision, recall and F1 for one match result.
///
/// Recall is `|matched_gt| / n_gt` (1 without ground truth). Precision is
/// `|matched_pred| / n_pred`; with no predictions it is 1 when there is also
/// no ground truth and 0 otherwise.
pub fn metrics<T: Scalar>(result: &MatchResult, n_pred: usize, n_gt: usize, r: T) -> MetricsPoint<T> {
    MatchCounts::from_result(result, n_pred, n_gt).point(r)
}

/// Per-image average of precision, recall and F1 (macro aggregation). Counts
/// are pooled.
pub fn macro_average<T: Scalar>(points: &[MetricsPoint<T>], r: T) -> MetricsPoint<T> {
    let counts: MatchCounts = points.iter().map(|p| p.counts).sum();
    if points.is_empty() {
        return counts.point(r);
    }
    let n = T::from_counts(points.len() as u64, 1);
    let mean = |f: fn(&MetricsPoint<T>) -> T| {
        points.iter().fold(T::zero(), |acc, p| acc + f(p)) / n
    };
    MetricsPoint {
        r,
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;
    use proptest::prelude::*;

    fn half() -> Rational64 {
        Rational64::new(1, 2)
    }

    fn area_of_intersection_raster(a: &RectPx, b: &RectPx) -> u64 {
        let mut n = 0;
        for y in 0..64 {
            for x in 0..64 {
                if a.contains_point(x, y) && b.contains_point(x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    // Literal greedy: each round scans every unmatched pair for the global
    // maximum, scoring pairs by rasterized pixel counts.
    fn greedy_oracle(preds: &[RectPx], gts: &[RectPx]) -> Vec<(usize, usize)> {
        let mut used_p = vec![false; preds.len()];
        let mut used_g = vec![false; gts.len()];
        let mut pairs = Vec::new();
        loop {
            let mut best: Option<(Rational64, usize, usize)> = None;
            for j in 0..preds.len() {
                for k in 0..gts.len() {
                    if used_p[j] || used_g[k] {
                        continue;
                    }
                    let inter = area_of_intersection_raster(&preds[j], &gts[k]) as i64;
                    let uni = preds[j].area() as i64 + gts[k].area() as i64 - inter;
                    if uni == 0 || inter == 0 {
                        continue;
                    }
                    let s = Rational64::new(inter, uni);
                    if s >= half() && best.is_none_or(|(b, _, _)| s > b) {
                        best = Some((s, j, k));
                    }
                }
            }
            match best {
                Some((_, j, k)) => {
                    used_p[j] = true;
                    used_g[k] = true;
                    pairs.push((j, k));
                }
                None => return pairs,
            }
        }
    }

    #[test]
    fn identical_lists_match_pairwise() {
        let boxes = vec![RectPx::new(0, 0, 5, 5), RectPx::new(10, 10, 5, 5), RectPx::new(30, 0, 8, 3)];
        let m = match_one_to_one(&boxes, &boxes, half());
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(match_one_to_one(&[], &boxes, half()).pairs.is_empty());
    }

    #[test]
    fn crafted_two_by_two() {
        // p0 overlaps both gts; g1 is the better partner for p0, which
        // leaves g0 to p1.
        let preds = [RectPx::new(0, 0, 10, 10), RectPx::new(0, 0, 8, 10)];
        let gts = [RectPx::new(0, 0, 9, 10), RectPx::new(0, 0, 10, 10)];
        let m = match_one_to_one(&preds, &gts, half());
        assert_eq!(m.pairs, greedy_oracle(&preds, &gts));
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn full_frame_prediction_matches_everything() {
        let frame = RectPx::new(0, 0, 3840, 2160);
        let gts = [RectPx::new(10, 10, 20, 20), RectPx::new(3000, 2000, 15, 15), RectPx::new(0, 0, 1, 1)];
        let m = match_iogt(&[frame], &gts, 0.5f64).unwrap();
        assert_eq!(m.matched_gt.len(), 3);
        let p: MetricsPoint<f64> = metrics(&m, 1, 3, 1.0);
        assert_eq!((p.recall, p.precision, p.f1), (1.0, 1.0, 1.0));

        assert!(match_iogt(&[], &gts, 0.5f64).unwrap().matched_gt.is_empty());
        assert!(match_iogt(&[frame], &[RectPx::new(1, 1, 0, 3)], 0.5f64).is_err());
    }

    #[test]
    fn metric_examples() {
        let p: MetricsPoint<f64> = metrics(&MatchResult::default(), 0, 5, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));

        let counts = MatchCounts { n_pred: 3, n_gt: 4, tp_gt: 3, matched_pred: 2 };
        let p: MetricsPoint<Rational64> = counts.point(Rational64::from_integer(1));
        assert_eq!(p.precision, Rational64::new(2, 3));
        assert_eq!(p.recall, Rational64::new(3, 4));
        // 2 * (2/3) * (3/4) / (2/3 + 3/4), evaluated by hand: 1 / (17/12) = 12/17
        assert_eq!(p.f1, Rational64::new(12, 17));
        let pf: MetricsPoint<f64> = counts.point(1.0);
        assert!((pf.f1 - 0.7059).abs() < 1e-4);

        let empty: MetricsPoint<f64> = MatchCounts::default().point(0.0);
        assert_eq!((empty.precision, empty.recall, empty.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn macro_differs_from_micro() {
        let a = MatchCounts { n_pred: 1, n_gt: 1, tp_gt: 1, matched_pred: 1 };
        let b = MatchCounts { n_pred: 3, n_gt: 3, tp_gt: 0, matched_pred: 0 };
        let r = Rational64::from_integer(1);
        let micro = (a + b).point(r);
        let mac = macro_average(&[a.point(r), b.point(r)], r);
        assert_eq!(micro.recall, Rational64::new(1, 4));
        assert_eq!(mac.recall, Rational64::new(1, 2));
        assert_eq!(mac.counts, micro.counts);
    }

    fn arb_rect() -> impl Strategy<Value = RectPx> {
        (0i64..64, 0i64..64, 1i64..=32, 1i64..=32)
            .prop_map(|(x, y, w, h)| RectPx::new(x, y, w.min(64 - x), h.min(64 - y)))
    }

    proptest! {
        #[test]
        fn one_to_one_equals_greedy_oracle(
            preds in prop::collection::vec(arb_rect(), 0..6),
            gts in prop::collection::vec(arb_rect(), 0..6),
        ) {
            let m = match_one_to_one(&preds, &gts, half());
            prop_assert_eq!(&m.pairs, &greedy_oracle(&preds, &gts));
            prop_assert!(m.pairs.len() <= preds.len().min(gts.len()));
        }

        #[test]
        fn iogt_is_permutation_invariant_and_monotone(
            preds in prop::collection::vec(arb_rect(), 0..6),
            gts in prop::collection::vec(arb_rect(), 1..6),
            extra in arb_rect(),
        ) {
            let base = match_iogt(&preds, &gts, half()).unwrap();
            let mut reversed = preds.clone();
            reversed.reverse();
            let rev = match_iogt(&reversed, &gts, half()).unwrap();
            prop_assert_eq!(&base.matched_gt, &rev.matched_gt);

            let mut more = preds.clone();
            more.push(extra);
            let grown = match_iogt(&more, &gts, half()).unwrap();
            prop_assert!(base.matched_gt.is_subset(&grown.matched_gt));
        }

        #[test]
        fn f1_is_harmonic_mean(n_pred in 0u64..50, n_gt in 0u64..50, a in 0u64..50, b in 0u64..50) {
            let counts = MatchCounts {
                n_pred,
                n_gt,
                tp_gt: a.min(n_gt),
                matched_pred: b.min(n_pred),
            };
            let p: MetricsPoint<Rational64> = counts.point(Rational64::from_integer(0));
            let two = Rational64::from_integer(2);
            prop_assert_eq!(p.f1 * (p.precision + p.recall), two * p.precision * p.recall);
            for v in [p.precision, p.recall, p.f1] {
                prop_assert!(v >= Rational64::from_integer(0) && v <= Rational64::from_integer(1));
            }
        }
    }
}
