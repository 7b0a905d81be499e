//! Confidence-gated early exit: per-image records, threshold sweeps, the
//! low/high correctness regions and precision-vs-threshold curves.
//!
//! A sample exits at the low branch when its max softmax score is `>= t`;
//! [`Threshold::AlwaysHigh`] sends every sample to the high branch.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{dynamic_cost, CostTable};
use crate::layers::{avg_pool2x, softmax};
use crate::net::MsNetwork;
use crate::tensor::{Scalar, Tensor};

/// One evaluated image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(rename = "score_L")]
    pub score_low: f64,
    #[serde(rename = "pred_L")]
    pub pred_low: usize,
    #[serde(rename = "pred_H")]
    pub pred_high: usize,
    pub label: usize,
}

impl CalibrationResult {
    pub fn low_correct(&self) -> bool {
        self.pred_low == self.label
    }

    pub fn high_correct(&self) -> bool {
        self.pred_high == self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Value(f64),
    /// Never exit early.
    AlwaysHigh,
}

impl Threshold {
    pub fn exits_low(self, score: f64) -> bool {
        match self {
            Threshold::Value(t) => score >= t,
            Threshold::AlwaysHigh => false,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Threshold::Value(t) => Some(t),
            Threshold::AlwaysHigh => None,
        }
    }

    fn rank(self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(t) => write!(f, "{t}"),
            Threshold::AlwaysHigh => f.write_str("always_high"),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "always_high" {
            return Ok(Threshold::AlwaysHigh);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::OutOfRange(format!("bad threshold {s:?}")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("threshold {t} outside [0, 1]")));
        }
        Ok(Threshold::Value(t))
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `0.00, 0.01, ..., 1.00` followed by `always_high`.
pub fn default_grid() -> Vec<Threshold> {
    (0..=100)
        .map(|i| Threshold::Value(i as f64 / 100.0))
        .chain([Threshold::AlwaysHigh])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: Threshold,
    pub exit_fraction: f64,
    pub accuracy: f64,
    /// Average MACs per image.
    pub avg_cost: f64,
    pub n_exit: usize,
    pub n_correct: usize,
}

/// Accuracy and average cost for each threshold, from records alone.
pub fn sweep(records: &[CalibrationResult], costs: &CostTable, thresholds: &[Threshold]) -> Result<Vec<SweepPoint>> {
    sweep_with_costs(records, costs.f_low, costs.f_high, thresholds)
}

pub fn sweep_with_costs(
    records: &[CalibrationResult],
    f_low: u64,
    f_high: u64,
    thresholds: &[Threshold],
) -> Result<Vec<SweepPoint>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if thresholds.windows(2).any(|w| w[0].rank() > w[1].rank()) {
        return Err(Error::OutOfRange("thresholds must be sorted ascending".into()));
    }
    let n = records.len();
    thresholds
        .iter()
        .map(|&t| {
            let mut n_exit = 0;
            let mut n_correct = 0;
            for r in records {
                if t.exits_low(r.score_low) {
                    n_exit += 1;
                    n_correct += r.low_correct() as usize;
                } else {
                    n_correct += r.high_correct() as usize;
                }
            }
            let exit_fraction = n_exit as f64 / n as f64;
            Ok(SweepPoint {
                threshold: t,
                exit_fraction,
                accuracy: n_correct as f64 / n as f64,
                avg_cost: dynamic_cost(f_low, f_high, exit_fraction)?,
                n_exit,
                n_correct,
            })
        })
        .collect()
}

/// Top-1 accuracy of the low and high heads over `records`.
pub fn head_accuracies(records: &[CalibrationResult]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let n = records.len() as f64;
    let low = records.iter().filter(|r| r.low_correct()).count() as f64;
    let high = records.iter().filter(|r| r.high_correct()).count() as f64;
    Ok((low / n, high / n))
}

/// Largest-threshold sweep point whose average cost fits `budget` MACs.
/// Relies on cost being non-decreasing along an ascending sweep.
pub fn select_threshold_for_budget(points: &[SweepPoint], budget: f64) -> Option<&SweepPoint> {
    let k = points.partition_point(|p| p.avg_cost <= budget);
    k.checked_sub(1).map(|i| &points[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub both: usize,
    pub low_only: usize,
    pub high_only: usize,
    pub neither: usize,
}

/// Fractions of images correct under both heads (A), the low head only (B),
/// the high head only (C) and neither (D).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    /// `A + B + C`: accuracy of an oracle choosing the right head per image.
    pub upper_bound: f64,
    #[serde(skip)]
    pub counts: Option<RegionCounts>,
}

pub fn region_decomposition(records: &[CalibrationResult]) -> Result<Regions> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut k = RegionCounts {
        both: 0,
        low_only: 0,
        high_only: 0,
        neither: 0,
    };
    for r in records {
        match (r.low_correct(), r.high_correct()) {
            (true, true) => k.both += 1,
            (true, false) => k.low_only += 1,
            (false, true) => k.high_only += 1,
            (false, false) => k.neither += 1,
        }
    }
    let n = records.len() as f64;
    Ok(Regions {
        a: k.both as f64 / n,
        b: k.low_only as f64 / n,
        c: k.high_only as f64 / n,
        d: k.neither as f64 / n,
        upper_bound: (k.both + k.low_only + k.high_only) as f64 / n,
        counts: Some(k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub threshold: f64,
    pub n_selected: usize,
    /// Low-head accuracy over the selected samples; `None` when none are.
    pub precision: Option<f64>,
}

pub fn precision_threshold_curve(records: &[CalibrationResult], thresholds: &[f64]) -> Vec<PrecisionPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let (mut n, mut correct) = (0usize, 0usize);
            for r in records.iter().filter(|r| r.score_low >= t) {
                n += 1;
                correct += r.low_correct() as usize;
            }
            PrecisionPoint {
                threshold: t,
                n_selected: n,
                precision: (n > 0).then(|| correct as f64 / n as f64),
            }
        })
        .collect()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// `None` for fewer than two points or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between threshold and precision over the points
/// where precision is defined.
pub fn precision_trend(curve: &[PrecisionPoint]) -> Option<f64> {
    let (ts, ps): (Vec<f64>, Vec<f64>) = curve
        .iter()
        .filter_map(|p| p.precision.map(|q| (p.threshold, q)))
        .unzip();
    spearman(&ts, &ps)
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max softmax probability and argmax of each logit row.
pub fn scores_and_predictions<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<(f64, usize)>> {
    let (_, k) = logits.dims2()?;
    let probs = softmax(logits)?;
    Ok(probs
        .data()
        .chunks(k)
        .map(|row| {
            let i = argmax(row);
            (row[i].to_f64_lossy(), i)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub used_high: bool,
    pub score_low: f64,
}

/// Early-exit inference on a batch of high-resolution inputs: the low
/// branch runs on their 2×2 average-pooled versions, and only samples
/// scoring below `t` continue through the high branch, reusing the low
/// stage features.
pub fn predict_with_threshold<T: Scalar>(
    ms: &MsNetwork<T>,
    x_high: &Tensor<T>,
    t: Threshold,
) -> Result<Vec<Prediction>> {
    if let Threshold::Value(v) = t {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange(format!("threshold {v} outside [0, 1]")));
        }
    }
    let x_low = avg_pool2x(x_high)?;
    let (logits, feats) = ms.forward_low(&x_low)?;
    let low = scores_and_predictions(&logits)?;
    let mut out: Vec<Prediction> = low
        .iter()
        .map(|&(score, class)| Prediction {
            class,
            used_high: false,
            score_low: score,
        })
        .collect();
    let escalate: Vec<usize> = (0..out.len())
        .filter(|&i| !t.exits_low(out[i].score_low))
        .collect();
    if !escalate.is_empty() {
        let xh = x_high.select_batch(&escalate)?;
        let fs = feats
            .iter()
            .map(|f| f.select_batch(&escalate))
            .collect::<Result<Vec<_>>>()?;
        let logits_h = ms.forward_high_given_low(&xh, &fs)?;
        let (_, k) = logits_h.dims2()?;
        for (row, &i) in logits_h.data().chunks(k).zip(&escalate) {
            out[i].class = argmax(row);
            out[i].used_high = true;
        }
    }
    Ok(out)
}

pub fn write_records<W: Write>(w: W, records: &[CalibrationResult]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| Error::io("records", e))?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<CalibrationResult>> {
    let mut csv = csv::Reader::from_reader(r);
    let records = csv.deserialize().collect::<std::result::Result<Vec<CalibrationResult>, _>>()?;
    if let Some(bad) = records.iter().find(|r| !(0.0..=1.0).contains(&r.score_low)) {
        return Err(Error::OutOfRange(format!("score_L {} outside [0, 1]", bad.score_low)));
    }
    Ok(records)
}

/// `threshold,exit_fraction,accuracy,avg_mmacs`.
pub fn write_sweep<W: Write>(w: W, points: &[SweepPoint]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["threshold", "exit_fraction", "accuracy", "avg_mmacs"])?;
    for p in points {
        csv.write_record([
            p.threshold.to_string(),
            p.exit_fraction.to_string(),
            p.accuracy.to_string(),
            (p.avg_cost / 1e6).to_string(),
        ])?;
    }
    csv.flush().map_err(|e| Error::io("sweep", e))?;
    Ok(())
}

/// `A,B,C,D,upper_bound`.
pub fn write_regions<W: Write>(w: W, r: &Regions) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.serialize(r)?;
    csv.flush().map_err(|e| Error::io("regions", e))?;
    Ok(())
}
