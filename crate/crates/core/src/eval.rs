//! Scoring localization and power estimates against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene::Point;
use crate::{Error, Result};

/// Eligibility threshold for a match, pixels.
pub const DEFAULT_THRESHOLD_PX: f64 = 5.0;

/// Greedy matching outcome. Distances and the threshold are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt index, prediction index, distance)`
    pub pairs: Vec<(usize, usize, f64)>,
    pub misses: Vec<usize>,
    pub false_alarms: Vec<usize>,
    pub threshold: f64,
}

impl MatchResult {
    pub fn cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Repeatedly matches the globally closest unmatched pair whose distance is
/// within `threshold`.
pub fn greedy_match(gt: &[Point], pred: &[Point], threshold: f64) -> MatchResult {
    let mut edges: Vec<(f64, usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(i, g)| pred.iter().enumerate().map(move |(j, p)| (g.distance(p), i, j)))
        .filter(|e| e.0 <= threshold)
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in edges {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            pairs.push((i, j, d));
        }
    }
    let unused = |used: &[bool]| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    MatchResult {
        misses: unused(&gt_used),
        false_alarms: unused(&pred_used),
        pairs,
        threshold,
    }
}

/// Denominator of the false-alarm rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FalseAlarmBase {
    #[default]
    Predictions,
    GroundTruth,
}

/// `(miss rate, false-alarm rate)`; an empty denominator gives 0.
pub fn compute_rates(m: &MatchResult, n_gt: usize, n_pred: usize, base: FalseAlarmBase) -> (f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let fa_base = match base {
        FalseAlarmBase::Predictions => n_pred,
        FalseAlarmBase::GroundTruth => n_gt,
    };
    (ratio(m.misses.len(), n_gt), ratio(m.false_alarms.len(), fa_base))
}

/// Mean matched distance in meters, `None` without pairs.
pub fn localization_error(m: &MatchResult, pixel_size: f64) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    Some(m.cost() / m.pairs.len() as f64 * pixel_size)
}

/// Mean absolute power difference over matched pairs, dB.
pub fn power_error(m: &MatchResult, gt_powers: &[f64], pred_powers: &[f64]) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    let total: f64 = m.pairs.iter().map(|&(i, j, _)| (pred_powers[j] - gt_powers[i]).abs()).sum();
    Some(total / m.pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold_px: f64,
    pub pixel_size: f64,
    pub false_alarm_base: FalseAlarmBase,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_px: DEFAULT_THRESHOLD_PX,
            pixel_size: 10.0,
            false_alarm_base: FalseAlarmBase::Predictions,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_px > 0.0 && self.pixel_size > 0.0) {
            return Err(Error::Config("threshold and pixel size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample score; also the record written to per-sample dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub n_gt: usize,
    pub n_pred: usize,
    /// Meters.
    pub l_err: Option<f64>,
    pub miss_rate: f64,
    pub false_alarm_rate: f64,
    pub p_err: Option<f64>,
    /// Matched distances, meters.
    pub distances: Vec<f64>,
    pub latency_s: f64,
}

pub fn score_sample(
    gt: &[Point],
    gt_powers: Option<&[f64]>,
    pred: &[Point],
    pred_powers: Option<&[f64]>,
    cfg: &EvalConfig,
) -> SampleScore {
    let m = greedy_match(gt, pred, cfg.threshold_px);
    let (miss_rate, false_alarm_rate) = compute_rates(&m, gt.len(), pred.len(), cfg.false_alarm_base);
    let p_err = match (gt_powers, pred_powers) {
        (Some(g), Some(p)) => power_error(&m, g, p),
        _ => None,
    };
    SampleScore {
        n_gt: gt.len(),
        n_pred: pred.len(),
        l_err: localization_error(&m, cfg.pixel_size),
        miss_rate,
        false_alarm_rate,
        p_err,
        distances: m.pairs.iter().map(|p| p.2 * cfg.pixel_size).collect(),
        latency_s: 0.0,
    }
}

/// Dataset-level aggregate; every field is a mean over samples (rates are
/// macro-averaged, errors average the per-sample means that exist).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l_err: Option<f64>,
    pub miss_rate: f64,
    pub false_alarm_rate: f64,
    pub p_err: Option<f64>,
    pub latency_s: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn aggregate(scores: &[SampleScore]) -> Self {
        let n = scores.len();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let avg = |f: fn(&SampleScore) -> f64| mean(scores.iter().map(f).collect()).unwrap_or(0.0);
        Self {
            l_err: mean(scores.iter().filter_map(|s| s.l_err).collect()),
            miss_rate: avg(|s| s.miss_rate),
            false_alarm_rate: avg(|s| s.false_alarm_rate),
            p_err: mean(scores.iter().filter_map(|s| s.p_err).collect()),
            latency_s: avg(|s| s.latency_s),
            n,
        }
    }
}

/// One row of a sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_param: String,
    pub value: f64,
    #[serde(rename = "L_err")]
    pub l_err: Option<f64>,
    #[serde(rename = "M_r")]
    pub miss_rate: f64,
    #[serde(rename = "F_r")]
    pub false_alarm_rate: f64,
    #[serde(rename = "P_err")]
    pub p_err: Option<f64>,
    pub n: usize,
    pub latency_s: f64,
}

/// Groups `(sweep value, score)` pairs into one row per requested value,
/// in the order requested. Values with no samples yield an empty row.
pub fn sweep_rows(param: &str, values: &[f64], scored: &[(f64, SampleScore)]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<u64, Vec<SampleScore>> = BTreeMap::new();
    for (v, s) in scored {
        groups.entry(v.to_bits()).or_default().push(s.clone());
    }
    values
        .iter()
        .map(|&v| {
            let r = EvalReport::aggregate(groups.get(&v.to_bits()).map(Vec::as_slice).unwrap_or(&[]));
            SweepRow {
                sweep_param: param.to_string(),
                value: v,
                l_err: r.l_err,
                miss_rate: r.miss_rate,
                false_alarm_rate: r.false_alarm_rate,
                p_err: r.p_err,
                n: r.n,
                latency_s: r.latency_s,
            }
        })
        .collect()
}
