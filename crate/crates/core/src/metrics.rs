//! Classification, box, and storm-track metrics.
//!
//! Undefined ratios are `None` (serialized as `null`), never 0.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::field::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub accuracy: Option<f64>,
    /// False alarm ratio, `1 − TP / predicted positive`.
    pub far: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    #[serde(flatten)]
    pub counts: Confusion,
}

impl BinaryReport {
    pub fn from_counts(c: Confusion) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            accuracy: ratio(c.tp + c.tn, c.total()),
            far: ratio(c.fp, c.tp + c.fp),
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

/// Pixelwise classification of `pred ≥ threshold` against `truth > 0.5`.
/// Pixels missing in either field are skipped.
pub fn binary_metrics(pred: &Field, truth: &Field, threshold: f64) -> Result<BinaryReport> {
    if pred.dim() != truth.dim() {
        return shape(format!("pred {:?} vs truth {:?}", pred.dim(), truth.dim()));
    }
    let mut c = Confusion::default();
    for (((p, t), pm), tm) in pred
        .values
        .iter()
        .zip(truth.values.iter())
        .zip(pred.missing.iter())
        .zip(truth.missing.iter())
    {
        if !pm && !tm {
            c.add(*p >= threshold, *t > 0.5);
        }
    }
    Ok(BinaryReport::from_counts(c))
}

/// Same rule over optional scalar entries (e.g. patch means).
pub fn binary_metrics_values(
    pred: &[Option<f64>],
    truth: &[Option<bool>],
    threshold: f64,
) -> Result<BinaryReport> {
    if pred.len() != truth.len() {
        return shape(format!("{} predictions vs {} labels", pred.len(), truth.len()));
    }
    let mut c = Confusion::default();
    for (p, t) in pred.iter().zip(truth) {
        if let (Some(p), Some(t)) = (p, t) {
            c.add(*p >= threshold, *t);
        }
    }
    Ok(BinaryReport::from_counts(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeans {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<Option<f64>>,
}

/// Mean of observed pixels per `patch × patch` block; `None` if fully missing.
pub fn patch_aggregate(field: &Field, patch: usize) -> Result<PatchMeans> {
    let (h, w) = field.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape(format!("{h}x{w} is not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut values = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let (mut s, mut n) = (0.0, 0usize);
            for r in i * patch..(i + 1) * patch {
                for c in j * patch..(j + 1) * patch {
                    if !field.missing[[r, c]] {
                        s += field.values[[r, c]];
                        n += 1;
                    }
                }
            }
            values.push((n > 0).then(|| s / n as f64));
        }
    }
    Ok(PatchMeans { grid_h: gh, grid_w: gw, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    #[serde(flatten)]
    pub report: BinaryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub rows: Vec<ThresholdRow>,
    /// Threshold with the highest defined F1 (lowest threshold on ties).
    pub best_threshold: Option<f64>,
    pub best_f1: Option<f64>,
}

pub fn threshold_sweep(pred: &[Field], truth: &[Field], thresholds: &[f64]) -> Result<ThresholdSweep> {
    if pred.len() != truth.len() {
        return shape("prediction and label lists differ in length");
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut c = Confusion::default();
        for (p, t) in pred.iter().zip(truth) {
            let r = binary_metrics(p, t, thr)?;
            c.tp += r.counts.tp;
            c.fp += r.counts.fp;
            c.tn += r.counts.tn;
            c.fn_ += r.counts.fn_;
        }
        rows.push(ThresholdRow { threshold: thr, report: BinaryReport::from_counts(c) });
    }
    let best = rows
        .iter()
        .filter_map(|r| r.report.f1.map(|f| (r.threshold, f)))
        .fold(None::<(f64, f64)>, |acc, (t, f)| match acc {
            Some((_, bf)) if bf >= f => acc,
            _ => Some((t, f)),
        });
    Ok(ThresholdSweep {
        rows,
        best_threshold: best.map(|b| b.0),
        best_f1: best.map(|b| b.1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        [self.y0, self.x0, self.y1, self.x1].iter().all(|v| v.is_finite())
            && self.y0 < self.y1
            && self.x0 < self.x1
    }

    pub fn area(&self) -> f64 {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    fn key(&self) -> [f64; 4] {
        [self.y0, self.x0, self.y1, self.x1]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return invalid(format!("malformed box: {a:?} / {b:?}"));
    }
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let inter = ih * iw;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedBox {
    pub t: i64,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub storm_id: String,
    /// Labelled frames, time-ordered.
    pub boxes: Vec<TimedBox>,
    pub first_label_time: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: i64,
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub frame: BinaryReport,
    pub storm_recall: Option<f64>,
    pub early_detection: Option<f64>,
    pub n_tracks: usize,
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

/// Frame-level greedy matching plus storm-level recall and early-detection
/// frequency. Detections are visited by descending score, then ascending
/// time, then lexicographic box; each takes the unmatched ground-truth box
/// of highest IoU (lowest track index on ties).
pub fn track_metrics(
    detections: &[Detection],
    tracks: &[TrackRecord],
    iou_thr: f64,
    score_thr: f64,
) -> Result<TrackReport> {
    for t in tracks {
        if t.boxes.windows(2).any(|w| w[0].t > w[1].t) {
            return invalid(format!("track {} boxes are not time-ordered", t.storm_id));
        }
        if let Some(b) = t.boxes.iter().find(|b| !b.bbox.is_valid()) {
            return invalid(format!("track {} has a malformed box {:?}", t.storm_id, b.bbox));
        }
    }
    let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.score >= score_thr).collect();
    if let Some(d) = dets.iter().find(|d| !d.bbox.is_valid()) {
        return invalid(format!("malformed detection box {:?}", d.bbox));
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.t.cmp(&b.t))
            .then_with(|| {
                a.bbox
                    .key()
                    .iter()
                    .zip(b.bbox.key())
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut times: BTreeSet<i64> = dets.iter().map(|d| d.t).collect();
    times.extend(tracks.iter().flat_map(|t| t.boxes.iter().map(|b| b.t)));

    let mut counts = Confusion::default();
    let mut track_hit = vec![false; tracks.len()];
    for &t in &times {
        let gts: Vec<(usize, BBox)> = tracks
            .iter()
            .enumerate()
            .filter_map(|(i, tr)| tr.boxes.iter().find(|b| b.t == t).map(|b| (i, b.bbox)))
            .collect();
        let mut used = vec![false; gts.len()];
        for d in dets.iter().filter(|d| d.t == t) {
            let mut best: Option<(usize, f64)> = None;
            for (g, (_, gb)) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&d.bbox, gb)?;
                if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    track_hit[gts[g].0] = true;
                    counts.tp += 1;
                }
                None => counts.fp += 1,
            }
        }
        counts.fn_ += used.iter().filter(|u| !**u).count() as u64;
    }

    let mut early = 0usize;
    for tr in tracks {
        let Some(first) = tr.boxes.first() else { continue };
        let mut hit = false;
        for d in dets.iter().filter(|d| d.t <= tr.first_label_time) {
            if iou(&d.bbox, &first.bbox)? >= iou_thr {
                hit = true;
                break;
            }
        }
        early += usize::from(hit);
    }

    let n = tracks.len();
    Ok(TrackReport {
        frame: BinaryReport::from_counts(counts),
        storm_recall: ratio(track_hit.iter().filter(|h| **h).count() as u64, n as u64),
        early_detection: ratio(early as u64, n as u64),
        n_tracks: n,
        iou_threshold: iou_thr,
        score_threshold: score_thr,
    })
}

/// Binary field from a 0/1 grid.
pub fn binary_field(values: Array2<bool>) -> Field {
    Field::observed(values.mapv(|b| if b { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    fn bx(y0: f64, x0: f64, y1: f64, x1: f64) -> BBox {
        BBox { y0, x0, y1, x1 }
    }

    #[test]
    fn perfect_prediction() {
        let t = binary_field(array![[true, false], [false, true]]);
        for thr in [0.1, 0.5, 0.9] {
            let r = binary_metrics(&t, &t, thr).unwrap();
            assert_eq!((r.accuracy, r.far, r.f1), (Some(1.0), Some(0.0), Some(1.0)));
        }
    }

    #[test]
    fn far_from_three_predicted_two_true() {
        let pred = binary_field(array![[true, true, true, false]]);
        let truth = binary_field(array![[true, true, false, false]]);
        let r = binary_metrics(&pred, &truth, 0.5).unwrap();
        assert!((r.far.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.far.unwrap() - (1.0 - r.precision.unwrap())).abs() < 1e-15);
    }

    #[test]
    fn all_negative_is_degenerate() {
        let z = binary_field(Array2::from_elem((3, 3), false));
        let r = binary_metrics(&z, &z, 0.5).unwrap();
        assert_eq!((r.accuracy, r.far, r.f1), (Some(1.0), None, None));
        let bad = binary_field(Array2::from_elem((2, 3), false));
        assert!(binary_metrics(&z, &bad, 0.5).is_err());
    }

    #[test]
    fn missing_pixels_skipped() {
        let pred = binary_field(array![[true, true]]);
        let mut truth = binary_field(array![[true, false]]);
        truth.missing[[0, 1]] = true;
        let r = binary_metrics(&pred, &truth, 0.5).unwrap();
        assert_eq!(r.counts.total(), 1);
    }

    #[test]
    fn patch_means() {
        let c = Field::observed(Array2::from_elem((4, 6), 0.25));
        assert!(patch_aggregate(&c, 2).unwrap().values.iter().all(|v| *v == Some(0.25)));
        let mut f = Field::observed(array![[0.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        f.missing[[0, 2]] = true;
        f.missing[[0, 3]] = true;
        f.missing[[1, 2]] = true;
        f.missing[[1, 3]] = true;
        let p = patch_aggregate(&f, 2).unwrap();
        assert_eq!(p.values, vec![Some(0.5), None]);
        assert!(patch_aggregate(&f, 3).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        let b = bx(0.0, 0.5, 1.0, 1.5);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        assert!(iou(&a, &bx(1.0, 0.0, 0.0, 1.0)).is_err());
    }

    fn track(id: &str, first: i64, ts: &[i64], b: BBox) -> TrackRecord {
        TrackRecord {
            storm_id: id.into(),
            boxes: ts.iter().map(|&t| TimedBox { t, bbox: b }).collect(),
            first_label_time: first,
        }
    }

    #[test]
    fn exact_detections_are_perfect() {
        let tracks = vec![
            track("a", 0, &[0, 30, 60], bx(0.0, 0.0, 5.0, 5.0)),
            track("b", 30, &[30, 60], bx(10.0, 10.0, 15.0, 16.0)),
        ];
        let dets: Vec<Detection> = tracks
            .iter()
            .flat_map(|tr| tr.boxes.iter().map(|b| Detection { t: b.t, bbox: b.bbox, score: 0.9 }))
            .collect();
        let r = track_metrics(&dets, &tracks, 0.3, 0.0).unwrap();
        assert_eq!(r.frame.f1, Some(1.0));
        assert_eq!(r.storm_recall, Some(1.0));
        assert_eq!(r.early_detection, Some(1.0));

        let none = track_metrics(&[], &tracks, 0.3, 0.0).unwrap();
        assert_eq!(none.storm_recall, Some(0.0));
        assert_eq!(none.early_detection, Some(0.0));
        assert_eq!(none.frame.recall, Some(0.0));
    }

    #[test]
    fn late_detection_counts_for_recall_not_early() {
        let a = bx(0.0, 0.0, 4.0, 4.0);
        let b = bx(20.0, 20.0, 24.0, 24.0);
        let tracks = vec![track("early", 60, &[60, 90], a), track("late", 60, &[60, 90], b)];
        let dets = vec![
            // Precedes the label time: frame-level false positive, early success.
            Detection { t: 30, bbox: a, score: 0.8 },
            Detection { t: 60, bbox: a, score: 0.8 },
            // Second storm is only found after its first label.
            Detection { t: 90, bbox: b, score: 0.7 },
        ];
        let r = track_metrics(&dets, &tracks, 0.3, 0.0).unwrap();
        assert_eq!(r.storm_recall, Some(1.0));
        assert_eq!(r.early_detection, Some(0.5));
        assert_eq!((r.frame.counts.tp, r.frame.counts.fp, r.frame.counts.fn_), (2, 1, 2));
    }

    #[test]
    fn matching_is_one_to_one_and_permutation_stable() {
        let a = bx(0.0, 0.0, 4.0, 4.0);
        let tracks = vec![track("a", 0, &[0], a)];
        let mut dets = vec![
            Detection { t: 0, bbox: bx(0.0, 0.0, 4.0, 4.5), score: 0.5 },
            Detection { t: 0, bbox: a, score: 0.5 },
            Detection { t: 0, bbox: bx(0.5, 0.0, 4.0, 4.0), score: 0.5 },
        ];
        let r1 = track_metrics(&dets, &tracks, 0.3, 0.0).unwrap();
        assert_eq!((r1.frame.counts.tp, r1.frame.counts.fp), (1, 2));
        dets.reverse();
        assert_eq!(track_metrics(&dets, &tracks, 0.3, 0.0).unwrap(), r1);
        dets.swap(0, 1);
        assert_eq!(track_metrics(&dets, &tracks, 0.3, 0.0).unwrap(), r1);
    }

    #[test]
    fn brute_force_confusion_agrees() {
        for seed in 0..200u64 {
            let mut g = rng::stream(seed, &[]);
            let pred = Field::observed(Array2::from_shape_fn((16, 16), |_| rng::uniform(&mut g, 0.0, 1.0)));
            let truth = binary_field(Array2::from_shape_fn((16, 16), |_| rng::uniform(&mut g, 0.0, 1.0) < 0.3));
            let thr = rng::uniform(&mut g, 0.0, 1.0);
            let r = binary_metrics(&pred, &truth, thr).unwrap();
            let mut tp = 0;
            for i in 0..16 {
                for j in 0..16 {
                    if pred.values[[i, j]] >= thr && truth.values[[i, j]] == 1.0 {
                        tp += 1;
                    }
                }
            }
            assert_eq!(r.counts.tp, tp);
            assert_eq!(r.counts.total(), 256);
        }
    }

    #[test]
    fn sweep_picks_best_f1() {
        let truth = binary_field(array![[true, false, true, false]]);
        let pred = Field::observed(array![[0.9, 0.3, 0.6, 0.1]]);
        let s = threshold_sweep(&[pred], &[truth], &[0.05, 0.2, 0.5, 0.95]).unwrap();
        assert_eq!(s.best_threshold, Some(0.5));
        assert_eq!(s.best_f1, Some(1.0));
    }
}
