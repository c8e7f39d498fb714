//! Detection evaluation: IoU matching, F1-vs-confidence sweeps, average
//! precision and mAP summaries, and simple count reports.
//!
//! Matching is greedy in confidence order (ties by input order) and is done
//! per image and per category. AP uses all-point interpolation of the
//! precision envelope.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::labelstore::{list_files, read_label_file, stem_of, Detection, NormBox};

/// IoU thresholds 0.50, 0.55, ... 0.95, each the correctly rounded decimal.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(pred_index, gt_index, iou)` in matching order.
    pub true_positives: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

fn confidence_of(d: &Detection, index: usize) -> Result<f64> {
    d.confidence.ok_or(Error::MissingConfidence { index })
}

/// Prediction indices by descending confidence; stable, so ties keep input order.
fn confidence_order(preds: &[Detection]) -> Result<Vec<usize>> {
    let confs = preds
        .iter()
        .enumerate()
        .map(|(i, d)| confidence_of(d, i))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| confs[b].total_cmp(&confs[a]));
    Ok(order)
}

/// Greedy matching: in descending confidence order each prediction takes
/// the unmatched same-category ground truth with the highest IoU at or above
/// `iou_thresh` (lowest index on ties).
pub fn match_detections(preds: &[Detection], gts: &[Detection], iou_thresh: f64) -> Result<MatchResult> {
    let order = confidence_order(preds)?;
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for pi in order {
        let pred = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] || gt.category_id != pred.category_id {
                continue;
            }
            let v = iou(&pred.bbox, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) => {
                taken[gi] = true;
                result.true_positives.push((pi, gi, v));
            }
            None => result.false_positives.push(pi),
        }
    }
    result.false_negatives = (0..gts.len()).filter(|&g| !taken[g]).collect();
    Ok(result)
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSample {
    pub image_id: String,
    pub preds: Vec<Detection>,
    pub gts: Vec<Detection>,
}

impl EvalSample {
    pub fn new(image_id: impl Into<String>, preds: Vec<Detection>, gts: Vec<Detection>) -> Self {
        Self {
            image_id: image_id.into(),
            preds,
            gts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RankedPred {
    confidence: f64,
    category: u32,
    is_tp: bool,
}

/// All predictions of a dataset, matched per image and ranked globally by
/// descending confidence (ties by image order, then input order).
#[derive(Debug, Clone, Default)]
struct Ranked {
    preds: Vec<RankedPred>,
    gt_per_category: BTreeMap<u32, usize>,
    pred_per_category: BTreeMap<u32, usize>,
}

impl Ranked {
    fn build(samples: &[EvalSample], iou_thresh: f64) -> Result<Self> {
        let mut ranked = Ranked::default();
        for s in samples {
            let m = match_detections(&s.preds, &s.gts, iou_thresh)?;
            let mut is_tp = vec![false; s.preds.len()];
            for &(pi, _, _) in &m.true_positives {
                is_tp[pi] = true;
            }
            for (pi, d) in s.preds.iter().enumerate() {
                ranked.preds.push(RankedPred {
                    confidence: confidence_of(d, pi)?,
                    category: d.category_id,
                    is_tp: is_tp[pi],
                });
                *ranked.pred_per_category.entry(d.category_id).or_default() += 1;
            }
            for g in &s.gts {
                *ranked.gt_per_category.entry(g.category_id).or_default() += 1;
            }
        }
        ranked.preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(ranked)
    }

    fn total_gt(&self) -> usize {
        self.gt_per_category.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub confidence_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrPoint {
    fn from_counts(confidence_threshold: f64, tp: usize, fp: usize, n_gt: usize) -> Self {
        let fn_ = n_gt - tp;
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Self {
            confidence_threshold,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, n_gt),
            // Equal to 2pr / (p + r), but exact for integer counts.
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Curve {
    /// One point per distinct prediction confidence, highest threshold first.
    pub points: Vec<PrPoint>,
    pub best_f1: f64,
    /// Lowest threshold attaining `best_f1`.
    pub best_confidence: f64,
    /// No predictions and no ground truth: every ratio was undefined.
    pub undefined: bool,
}

impl F1Curve {
    pub fn best_point(&self) -> &PrPoint {
        self.points
            .iter()
            .rev()
            .find(|p| p.f1 == self.best_f1)
            .expect("curve has at least one point")
    }
}

fn curve_from_ranked(ranked: &Ranked) -> F1Curve {
    let n_gt = ranked.total_gt();
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let preds = &ranked.preds;
    let mut i = 0;
    while i < preds.len() {
        let conf = preds[i].confidence;
        // Every prediction tied at this confidence enters together.
        while i < preds.len() && preds[i].confidence == conf {
            if preds[i].is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint::from_counts(conf, tp, fp, n_gt));
    }
    let undefined = points.is_empty() && n_gt == 0;
    if points.is_empty() {
        points.push(PrPoint::from_counts(0.0, 0, 0, n_gt));
    }
    let (mut best_f1, mut best_confidence) = (f64::NEG_INFINITY, 0.0);
    for p in &points {
        if p.f1 >= best_f1 {
            best_f1 = p.f1;
            best_confidence = p.confidence_threshold;
        }
    }
    F1Curve {
        points,
        best_f1,
        best_confidence,
        undefined,
    }
}

/// Sweeps the confidence threshold over every distinct prediction
/// confidence. Because matching is greedy in confidence order, the matching
/// restricted to predictions at or above a threshold is exactly the prefix
/// of the full matching, so one pass suffices.
pub fn f1_curve(samples: &[EvalSample], iou_thresh: f64) -> Result<F1Curve> {
    Ok(curve_from_ranked(&Ranked::build(samples, iou_thresh)?))
}

/// All-point interpolated AP of a ranked TP/FP sequence against `n_gt`
/// ground-truth objects. Recall advances by `1 / n_gt` at each TP, so the
/// area is the mean of the envelope over TP ranks.
fn ap_of_ranked<I: IntoIterator<Item = bool>>(is_tp: I, n_gt: usize) -> f64 {
    let mut precision = Vec::new();
    let mut tp_rank = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for hit in is_tp {
        seen += 1;
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / seen as f64);
        tp_rank.push(hit);
    }
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    for (p, hit) in precision.iter().zip(&tp_rank).rev() {
        envelope = envelope.max(*p);
        if *hit {
            area += envelope;
        }
    }
    area / n_gt as f64
}

fn category_ap(ranked: &Ranked, category: Option<u32>) -> Option<f64> {
    let n_gt = match category {
        Some(c) => ranked.gt_per_category.get(&c).copied().unwrap_or(0),
        None => ranked.total_gt(),
    };
    if n_gt == 0 {
        return None;
    }
    let hits = ranked
        .preds
        .iter()
        .filter(|p| category.is_none_or(|c| p.category == c))
        .map(|p| p.is_tp);
    Some(ap_of_ranked(hits, n_gt))
}

/// AP over all predictions (categories still matched separately). `None`
/// when there is no ground truth.
pub fn average_precision(samples: &[EvalSample], iou_thresh: f64) -> Result<Option<f64>> {
    Ok(category_ap(&Ranked::build(samples, iou_thresh)?, None))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryAp {
    pub category: u32,
    pub gt_count: usize,
    pub pred_count: usize,
    /// AP at each of [`COCO_IOU_THRESHOLDS`]; `None` without ground truth.
    pub ap: Option<[f64; 10]>,
}

impl CategoryAp {
    pub fn ap50(&self) -> Option<f64> {
        self.ap.map(|a| a[0])
    }

    pub fn ap95(&self) -> Option<f64> {
        self.ap.map(|a| a[9])
    }

    pub fn ap50_95(&self) -> Option<f64> {
        self.ap.map(|a| a.iter().sum::<f64>() / a.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSummary {
    pub per_category: Vec<CategoryAp>,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    /// AP at IoU 0.95 alone, averaged over categories.
    pub map95: Option<f64>,
    /// Categories seen only in predictions, excluded from the means.
    pub categories_without_gt: Vec<u32>,
}

impl MapSummary {
    pub fn is_empty(&self) -> bool {
        self.map50.is_none()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn map_summary(samples: &[EvalSample]) -> Result<MapSummary> {
    let per_threshold = COCO_IOU_THRESHOLDS
        .iter()
        .map(|&t| Ranked::build(samples, t))
        .collect::<Result<Vec<_>>>()?;
    let base = &per_threshold[0];
    let categories: BTreeSet<u32> = base
        .gt_per_category
        .keys()
        .chain(base.pred_per_category.keys())
        .copied()
        .collect();
    let mut per_category = Vec::new();
    let mut categories_without_gt = Vec::new();
    for c in categories {
        let gt_count = base.gt_per_category.get(&c).copied().unwrap_or(0);
        let pred_count = base.pred_per_category.get(&c).copied().unwrap_or(0);
        let ap = if gt_count == 0 {
            categories_without_gt.push(c);
            None
        } else {
            let mut values = [0.0; 10];
            for (slot, ranked) in values.iter_mut().zip(&per_threshold) {
                *slot = category_ap(ranked, Some(c)).expect("category has ground truth");
            }
            Some(values)
        };
        per_category.push(CategoryAp {
            category: c,
            gt_count,
            pred_count,
            ap,
        });
    }
    let with_gt = || per_category.iter().filter_map(|c| c.ap);
    let map50 = mean(with_gt().map(|a| a[0]));
    let map95 = mean(with_gt().map(|a| a[9]));
    let map50_95 = mean(with_gt().flat_map(|a| a.into_iter()));
    Ok(MapSummary {
        per_category,
        map50,
        map50_95,
        map95,
        categories_without_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFlag {
    /// Neither predictions nor ground truth: the curve is undefined.
    UndefinedCurve,
    /// No category has ground truth, so mAP is not defined.
    EmptyMap,
    /// Some categories appear only in predictions.
    CategoriesWithoutGt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub image_count: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub curve: F1Curve,
    pub map: MapSummary,
    pub flags: Vec<EvalFlag>,
}

/// Summary line of a serialized [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
struct SummaryLine<'a> {
    kind: &'static str,
    iou_threshold: f64,
    image_count: usize,
    gt_count: usize,
    pred_count: usize,
    best_f1: f64,
    best_f1_confidence: f64,
    precision: f64,
    recall: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    map50: Option<f64>,
    map50_95: Option<f64>,
    map95: Option<f64>,
    flags: &'a [EvalFlag],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CategoryLine {
    kind: &'static str,
    category: u32,
    gt_count: usize,
    pred_count: usize,
    ap50: Option<f64>,
    ap50_95: Option<f64>,
    ap95: Option<f64>,
}

impl EvalReport {
    pub fn best_f1(&self) -> f64 {
        self.curve.best_f1
    }

    pub fn best_point(&self) -> &PrPoint {
        self.curve.best_point()
    }

    /// True when precision, recall, F1 and both mAPs are exactly 1.
    pub fn is_perfect(&self) -> bool {
        let p = self.best_point();
        p.precision == 1.0
            && p.recall == 1.0
            && p.f1 == 1.0
            && self.map.map50 == Some(1.0)
            && self.map.map50_95 == Some(1.0)
    }

    /// JSON Lines: one summary record, then one record per category.
    pub fn to_jsonl(&self) -> Result<String> {
        let best = self.best_point();
        let summary = SummaryLine {
            kind: "summary",
            iou_threshold: self.iou_threshold,
            image_count: self.image_count,
            gt_count: self.gt_count,
            pred_count: self.pred_count,
            best_f1: self.curve.best_f1,
            best_f1_confidence: self.curve.best_confidence,
            precision: best.precision,
            recall: best.recall,
            tp: best.tp,
            fp: best.fp,
            fn_: best.fn_,
            map50: self.map.map50,
            map50_95: self.map.map50_95,
            map95: self.map.map95,
            flags: &self.flags,
        };
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for c in &self.map.per_category {
            let line = CategoryLine {
                kind: "category",
                category: c.category,
                gt_count: c.gt_count,
                pred_count: c.pred_count,
                ap50: c.ap50(),
                ap50_95: c.ap50_95(),
                ap95: c.ap95(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// PR-curve table with header `confidence,precision,recall,f1`.
    pub fn curve_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["confidence", "precision", "recall", "f1"])?;
        for p in &self.curve.points {
            w.write_record(&[
                p.confidence_threshold.to_string(),
                p.precision.to_string(),
                p.recall.to_string(),
                p.f1.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("csv", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, jsonl_path: &Path, csv_path: Option<&Path>) -> Result<()> {
        fs::write(jsonl_path, self.to_jsonl()?).at(jsonl_path)?;
        if let Some(p) = csv_path {
            fs::write(p, self.curve_csv()?).at(p)?;
        }
        Ok(())
    }
}

/// Full evaluation: F1 sweep at `iou_thresh` plus mAP summaries.
pub fn evaluate(samples: &[EvalSample], iou_thresh: f64) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument(format!("IoU threshold {iou_thresh} outside [0, 1]")));
    }
    let curve = f1_curve(samples, iou_thresh)?;
    let map = map_summary(samples)?;
    let mut flags = Vec::new();
    if curve.undefined {
        flags.push(EvalFlag::UndefinedCurve);
    }
    if map.is_empty() {
        flags.push(EvalFlag::EmptyMap);
    }
    if !map.categories_without_gt.is_empty() {
        flags.push(EvalFlag::CategoriesWithoutGt);
    }
    Ok(EvalReport {
        iou_threshold: iou_thresh,
        image_count: samples.len(),
        gt_count: samples.iter().map(|s| s.gts.len()).sum(),
        pred_count: samples.iter().map(|s| s.preds.len()).sum(),
        curve,
        map,
        flags,
    })
}

/// Pairs prediction and ground-truth label files by file stem. An image
/// present on only one side gets an empty list on the other.
pub fn pair_label_dirs(preds_dir: &Path, gts_dir: &Path) -> Result<Vec<EvalSample>> {
    let mut by_id: BTreeMap<String, EvalSample> = BTreeMap::new();
    for path in list_files(gts_dir, "txt")? {
        let lf = read_label_file(&path)?;
        by_id.entry(stem_of(&path)).or_default().gts = lf.detections;
    }
    for path in list_files(preds_dir, "txt")? {
        let lf = read_label_file(&path)?;
        by_id.entry(stem_of(&path)).or_default().preds = lf.detections;
    }
    Ok(by_id
        .into_iter()
        .map(|(id, mut s)| {
            s.image_id = id;
            s
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CountFlag {
    Clean,
    /// Predictions exist but the reference count is zero.
    ReferenceZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CountReport {
    pub predicted: u64,
    pub reference: u64,
    pub ratio: f64,
    pub flag: CountFlag,
}

impl CountReport {
    /// Ratio to three decimals.
    pub fn ratio_display(&self) -> String {
        format!("{:.3}", self.ratio)
    }
}

pub fn count_report(predicted: i64, reference: i64) -> Result<CountReport> {
    if predicted < 0 || reference < 0 {
        return Err(Error::InvalidArgument(format!(
            "counts must be non-negative, got {predicted} and {reference}"
        )));
    }
    let (predicted, reference) = (predicted as u64, reference as u64);
    let (ratio, flag) = match (predicted, reference) {
        (0, 0) => (0.0, CountFlag::Clean),
        (_, 0) => (f64::INFINITY, CountFlag::ReferenceZero),
        (p, r) => (p as f64 / r as f64, CountFlag::Clean),
    };
    Ok(CountReport {
        predicted,
        reference,
        ratio,
        flag,
    })
}

/// Predictions at or above confidence `tau` (entries without confidence
/// count as certain).
pub fn count_above(preds: &[Detection], tau: f64) -> usize {
    preds.iter().filter(|d| d.confidence.unwrap_or(1.0) >= tau).count()
}

/// Share of `part` among `part + rest`; 0 when both are 0.
pub fn share(part: u64, rest: u64) -> f64 {
    let total = part + rest;
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

/// `value` with three decimals.
pub fn fmt3(value: f64) -> String {
    format!("{value:.3}")
}
