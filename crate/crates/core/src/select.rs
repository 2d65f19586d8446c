//! Bandwidth-budgeted RoI selection.
//!
//! Given a portion `r` of the frame that may be streamed in full quality,
//! pick which proposals to send. Two orderings are supported:
//!
//! * [`SelectionMode::AreaGreedy`] for unscored proposals: scan boxes from
//!   largest to smallest and keep every box that still fits, skipping the
//!   ones that do not.
//! * [`SelectionMode::ConfidencePrefix`] for scored detections: take boxes by
//!   descending confidence and stop at the first one that does not fit.
//!
//! In both cases one further box (the largest unselected one, or the box
//! that broke the prefix) is shrunk concentrically into whatever budget is
//! left and appended.

use crate::geometry::{concentric_fit, union_area, FrameDims, RectPx};
use crate::scalar::Scalar;
use crate::saliency::sort_by_area_desc;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// A proposal box with an optional detector confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox<S> {
    pub rect: RectPx,
    pub confidence: Option<S>,
}

impl<S> ScoredBox<S> {
    pub fn unscored(rect: RectPx) -> Self {
        ScoredBox { rect, confidence: None }
    }

    pub fn scored(rect: RectPx, confidence: S) -> Self {
        ScoredBox { rect, confidence: Some(confidence) }
    }
}

/// All proposals for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet<S> {
    pub frame: FrameDims,
    pub boxes: Vec<ScoredBox<S>>,
}

impl<S: Scalar> ProposalSet<S> {
    pub fn new(frame: FrameDims, boxes: Vec<ScoredBox<S>>) -> Result<Self, Error> {
        for b in &boxes {
            if !frame.contains(&b.rect) {
                return Err(Error::Config(format!("box {:?} outside frame {frame}", b.rect)));
            }
            if let Some(c) = b.confidence {
                if !(c >= S::zero() && c <= S::one()) {
                    return Err(Error::InvalidRatio(c.to_f64()));
                }
            }
        }
        Ok(ProposalSet { frame, boxes })
    }

    pub fn empty(frame: FrameDims) -> Self {
        ProposalSet { frame, boxes: Vec::new() }
    }

    pub fn rects(&self) -> Vec<RectPx> {
        self.boxes.iter().map(|b| b.rect).collect()
    }
}

/// The portion `r` of the frame area that may be streamed in full quality.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct BudgetPortion<S>(S);

impl<S: Scalar> BudgetPortion<S> {
    pub fn new(r: S) -> Result<Self, Error> {
        if r >= S::zero() && r <= S::one() {
            Ok(BudgetPortion(r))
        } else {
            Err(Error::InvalidRatio(r.to_f64()))
        }
    }

    pub fn value(&self) -> S {
        self.0
    }

    /// `floor(r * width * height)` pixels.
    pub fn pixels(&self, frame: FrameDims) -> u64 {
        self.0.floor_mul(frame.area()).min(frame.area())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    AreaGreedy,
    ConfidencePrefix,
}

/// How the pixels of a selection are counted against the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Pixels of the union; overlaps are counted once.
    #[default]
    UnionPixels,
    /// Sum of each crop's area; overlaps are counted per crop.
    SumOfCropAreas,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "area" | "area-greedy" => Ok(SelectionMode::AreaGreedy),
            "confidence" | "confidence-prefix" => Ok(SelectionMode::ConfidencePrefix),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

impl std::str::FromStr for Accounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(Accounting::UnionPixels),
            "sum" => Ok(Accounting::SumOfCropAreas),
            other => Err(Error::Config(format!("unknown accounting {other:?}"))),
        }
    }
}

impl std::fmt::Display for Accounting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Accounting::UnionPixels => "union",
            Accounting::SumOfCropAreas => "sum",
        })
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::AreaGreedy => "area",
            SelectionMode::ConfidencePrefix => "confidence",
        })
    }
}

/// Largest instance size accepted for exhaustive subset search.
pub const MAX_EXACT_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub accounting: Accounting,
    /// When set, area-greedy instances with at most this many boxes are
    /// solved by exhaustive search for the subset with the largest
    /// accounted area. At most [`MAX_EXACT_N`].
    pub exact_small_n: Option<usize>,
}

impl SelectionPolicy {
    pub fn new(mode: SelectionMode, accounting: Accounting) -> Self {
        SelectionPolicy { mode, accounting, exact_small_n: None }
    }

    pub fn with_exact_small_n(mut self, n: usize) -> Result<Self, Error> {
        if n > MAX_EXACT_N {
            return Err(Error::Config(format!("exact_small_n {n} exceeds {MAX_EXACT_N}")));
        }
        self.exact_small_n = Some(n);
        Ok(self)
    }
}

/// A box shrunk into the leftover budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShrunkBox {
    pub source: RectPx,
    pub rect: RectPx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Boxes sent at full size, in selection order.
    pub full: Vec<RectPx>,
    pub shrunk: Option<ShrunkBox>,
    /// Budget in pixels.
    pub budget: u64,
    /// Accounted pixels of reserved rects, `full` and `shrunk` together.
    pub accounted: u64,
}

impl Selection {
    pub fn rects(&self) -> Vec<RectPx> {
        self.full.iter().copied().chain(self.shrunk.map(|s| s.rect)).collect()
    }
}

/// Pixels charged so far under one accounting rule.
#[derive(Debug, Clone)]
pub struct Tally {
    accounting: Accounting,
    rects: Vec<RectPx>,
    total: u64,
}

impl Tally {
    pub fn new(accounting: Accounting) -> Self {
        Tally { accounting, rects: Vec::new(), total: 0 }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Extra pixels `rect` would cost on top of the current selection.
    pub fn marginal(&self, rect: &RectPx) -> u64 {
        match self.accounting {
            Accounting::SumOfCropAreas => rect.area(),
            Accounting::UnionPixels => {
                let overlaps: Vec<RectPx> = self
                    .rects
                    .iter()
                    .map(|r| r.intersect(rect))
                    .filter(|r| !r.is_empty())
                    .collect();
                rect.area() - union_area(&overlaps)
            }
        }
    }

    pub fn push(&mut self, rect: RectPx) {
        self.total += self.marginal(&rect);
        if !rect.is_empty() {
            self.rects.push(rect);
        }
    }
}

/// Accounted pixels of `rects` under `accounting`.
pub fn accounted_area(rects: &[RectPx], accounting: Accounting) -> u64 {
    match accounting {
        Accounting::UnionPixels => union_area(rects),
        Accounting::SumOfCropAreas => rects.iter().map(RectPx::area).sum(),
    }
}

/// Select the RoIs to transmit for one frame.
pub fn select<S: Scalar>(
    proposals: &ProposalSet<S>,
    budget: BudgetPortion<S>,
    policy: &SelectionPolicy,
) -> Result<Selection, Error> {
    select_with_reserved(proposals, budget.pixels(proposals.frame), &[], policy)
}

/// Like [`select`], with an explicit pixel budget and rects that have
/// already been committed (for example operator requests). Reserved rects
/// are charged first and are not part of the returned selection.
pub fn select_with_reserved<S: Scalar>(
    proposals: &ProposalSet<S>,
    budget_px: u64,
    reserved: &[RectPx],
    policy: &SelectionPolicy,
) -> Result<Selection, Error> {
    if let Some(n) = policy.exact_small_n {
        if n > MAX_EXACT_N {
            return Err(Error::Config(format!("exact_small_n {n} exceeds {MAX_EXACT_N}")));
        }
    }
    let mut tally = Tally::new(policy.accounting);
    for r in reserved {
        tally.push(*r);
    }

    match policy.mode {
        SelectionMode::AreaGreedy => {
            let mut order = proposals.rects();
            sort_by_area_desc(&mut order);
            let chosen = match policy.exact_small_n {
                Some(n) if order.len() <= n => exact_subset(&order, budget_px, &tally),
                _ => greedy_subset(&order, budget_px, &tally),
            };
            let mut full = Vec::with_capacity(chosen.iter().filter(|c| **c).count());
            for (rect, _) in order.iter().zip(&chosen).filter(|(_, c)| **c) {
                tally.push(*rect);
                full.push(*rect);
            }
            let leftover = order.iter().zip(&chosen).find(|(_, c)| !**c).map(|(r, _)| *r);
            Ok(finish(full, leftover, budget_px, tally))
        }
        SelectionMode::ConfidencePrefix => {
            let mut order: Vec<(S, RectPx)> = Vec::with_capacity(proposals.boxes.len());
            for (i, b) in proposals.boxes.iter().enumerate() {
                let c = b.confidence.ok_or(Error::UnscoredBox(i))?;
                order.push((c, b.rect));
            }
            order.sort_by(|(ca, a), (cb, b)| {
                cb.partial_cmp(ca)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| (a.y, a.x, a.w, a.h).cmp(&(b.y, b.x, b.w, b.h)))
            });
            let mut full = Vec::new();
            let mut breaker = None;
            for (_, rect) in order {
                if tally.total() + tally.marginal(&rect) <= budget_px {
                    tally.push(rect);
                    full.push(rect);
                } else {
                    breaker = Some(rect);
                    break;
                }
            }
            Ok(finish(full, breaker, budget_px, tally))
        }
    }
}

fn greedy_subset(order: &[RectPx], budget_px: u64, base: &Tally) -> Vec<bool> {
    let mut tally = base.clone();
    order
        .iter()
        .map(|rect| {
            let fits = tally.total() + tally.marginal(rect) <= budget_px;
            if fits {
                tally.push(*rect);
            }
            fits
        })
        .collect()
}

// Depth-first search over include/exclude decisions in area order. The
// bound uses the fact that a box never costs more than its own area.
fn exact_subset(order: &[RectPx], budget_px: u64, base: &Tally) -> Vec<bool> {
    struct Search<'a> {
        order: &'a [RectPx],
        budget: u64,
        base_total: u64,
        suffix_area: Vec<u64>,
        picked: Vec<bool>,
        best: Vec<bool>,
        best_total: u64,
    }

    impl Search<'_> {
        fn run(&mut self, i: usize, tally: &Tally) {
            let gained = tally.total() - self.base_total;
            if gained > self.best_total {
                self.best_total = gained;
                self.best = self.picked.clone();
            }
            if i == self.order.len()
                || gained + self.suffix_area[i] <= self.best_total
                || tally.total() == self.budget
            {
                return;
            }
            let rect = self.order[i];
            if tally.total() + tally.marginal(&rect) <= self.budget {
                let mut next = tally.clone();
                next.push(rect);
                self.picked[i] = true;
                self.run(i + 1, &next);
                self.picked[i] = false;
            }
            self.run(i + 1, tally);
        }
    }

    let mut suffix_area = vec![0u64; order.len() + 1];
    for i in (0..order.len()).rev() {
        suffix_area[i] = suffix_area[i + 1] + order[i].area();
    }
    let mut search = Search {
        order,
        budget: budget_px,
        base_total: base.total(),
        suffix_area,
        picked: vec![false; order.len()],
        best: vec![false; order.len()],
        best_total: 0,
    };
    if base.total() <= budget_px {
        search.run(0, base);
    }
    search.best
}

fn finish(full: Vec<RectPx>, leftover: Option<RectPx>, budget_px: u64, mut tally: Tally) -> Selection {
    let shrunk = leftover.and_then(|source| {
        let remaining = budget_px.checked_sub(tally.total())?;
        let rect = shrink_into(&source, remaining, &tally);
        (!rect.is_empty()).then_some(ShrunkBox { source, rect })
    });
    if let Some(s) = shrunk {
        tally.push(s.rect);
    }
    Selection { full, shrunk, budget: budget_px, accounted: tally.total() }
}

// Largest concentric fit of `source` whose marginal cost fits `remaining`.
// Concentric fits grow monotonically and are nested, so their marginal cost
// is monotone in the area cap and binary search applies.
fn shrink_into(source: &RectPx, remaining: u64, tally: &Tally) -> RectPx {
    let base = concentric_fit(source, remaining);
    if tally.accounting == Accounting::SumOfCropAreas || remaining >= source.area() {
        return base;
    }
    let fits = |cap: u64| tally.marginal(&concentric_fit(source, cap)) <= remaining;
    let (mut lo, mut hi) = (remaining, source.area());
    if fits(hi) {
        return *source;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    concentric_fit(source, lo)
}
