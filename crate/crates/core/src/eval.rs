//! Evaluation artifacts: station RMSE maps, bias histograms, the extreme-bias
//! subset, heatmaps, and model comparison.

use std::io::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{GridStack, MaskedField};

/// Sums in ascending order so the result does not depend on iteration order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_aligned(preds: &[MaskedField], targets: &[MaskedField]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    for (p, t) in preds.iter().zip(targets) {
        if p.spec() != t.spec() {
            return Err(Error::ShapeMismatch("prediction and target grids differ".into()));
        }
    }
    Ok(())
}

/// `(prediction, target)` at every cell and day where both are valid.
pub fn valid_pairs(preds: &[MaskedField], targets: &[MaskedField]) -> Result<Vec<(f64, f64)>> {
    check_aligned(preds, targets)?;
    Ok(preds
        .iter()
        .zip(targets)
        .flat_map(|(p, t)| t.valid().filter(move |&(i, _)| p.mask()[i]).map(move |(i, tv)| (p.values()[i], tv)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseResult {
    /// Temporal RMSE per cell; masked where the cell was never observed.
    pub map: MaskedField,
    /// RMSE pooled over every valid (cell, day) pair.
    pub overall: f64,
    pub n_pairs: usize,
}

pub fn rmse_at_stations(preds: &[MaskedField], targets: &[MaskedField]) -> Result<RmseResult> {
    check_aligned(preds, targets)?;
    let spec = targets.first().ok_or(Error::NoValidPairs)?.spec().clone();
    let mut per_cell: Vec<Vec<f64>> = vec![Vec::new(); spec.n_cells()];
    for (p, t) in preds.iter().zip(targets) {
        for (i, tv) in t.valid() {
            if p.mask()[i] {
                per_cell[i].push((p.values()[i] - tv).powi(2));
            }
        }
    }
    let n_pairs: usize = per_cell.iter().map(Vec::len).sum();
    if n_pairs == 0 {
        return Err(Error::NoValidPairs);
    }
    let all: Vec<f64> = per_cell.iter().flatten().copied().collect();
    let overall = (ordered_sum(all) / n_pairs as f64).sqrt();
    let mask: Vec<bool> = per_cell.iter().map(|v| !v.is_empty()).collect();
    let values = per_cell
        .into_iter()
        .map(|v| {
            let n = v.len();
            if n == 0 { 0.0 } else { (ordered_sum(v) / n as f64).sqrt() }
        })
        .collect();
    Ok(RmseResult {
        map: MaskedField::new(spec, values, mask)?,
        overall,
        n_pairs,
    })
}

/// Half-open bins `[lo + k·width, lo + (k+1)·width)` covering `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistSpec {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl Default for HistSpec {
    fn default() -> Self {
        HistSpec {
            lo: -40.0,
            hi: 60.0,
            width: 2.0,
        }
    }
}

impl HistSpec {
    pub fn n_bins(&self) -> Result<usize> {
        if !(self.width > 0.0 && self.width.is_finite() && self.lo.is_finite() && self.hi > self.lo && self.hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "histogram needs width > 0 and lo < hi, got {:?}",
                self
            )));
        }
        let bins = (self.hi - self.lo) / self.width;
        let snapped = bins.round();
        Ok(if (bins - snapped).abs() <= 1e-9 * snapped.max(1.0) { snapped } else { bins.ceil() } as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistSpec,
    pub counts: Vec<u64>,
    /// Values below `lo`.
    pub underflow: u64,
    /// Values at or above `hi`, and NaN.
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let s = &self.spec;
        (s.lo + k as f64 * s.width, (s.lo + (k + 1) as f64 * s.width).min(s.hi))
    }
}

pub fn bias_histogram(values: &[f64], spec: HistSpec) -> Result<Histogram> {
    let n = spec.n_bins()?;
    let mut h = Histogram {
        spec,
        counts: vec![0; n],
        underflow: 0,
        overflow: 0,
    };
    for &v in values {
        if v < spec.lo {
            h.underflow += 1;
        } else if v < spec.hi {
            let k = (((v - spec.lo) / spec.width).floor() as usize).min(n - 1);
            h.counts[k] += 1;
        } else {
            h.overflow += 1;
        }
    }
    Ok(h)
}

/// Metrics on the pairs whose target exceeds a threshold; the statistics are
/// absent when no pair qualifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeMetrics {
    pub threshold: f64,
    pub count: usize,
    pub rmse: Option<f64>,
    pub mean_pred: Option<f64>,
    pub mean_target: Option<f64>,
}

pub const EXTREME_THRESHOLD: f64 = 20.0;

pub fn extreme_subset_metrics(preds: &[MaskedField], targets: &[MaskedField], threshold: f64) -> Result<ExtremeMetrics> {
    let pairs = valid_pairs(preds, targets)?;
    Ok(extreme_from_pairs(&pairs, threshold))
}

fn extreme_from_pairs(pairs: &[(f64, f64)], threshold: f64) -> ExtremeMetrics {
    let sub: Vec<(f64, f64)> = pairs.iter().copied().filter(|&(_, t)| t > threshold).collect();
    let n = sub.len();
    let stat = |f: &dyn Fn(&(f64, f64)) -> f64| (n > 0).then(|| ordered_sum(sub.iter().map(f).collect()) / n as f64);
    ExtremeMetrics {
        threshold,
        count: n,
        rmse: stat(&|&(p, t)| (p - t).powi(2)).map(f64::sqrt),
        mean_pred: stat(&|&(p, _)| p),
        mean_target: stat(&|&(_, t)| t),
    }
}

/// Colour for masked cells in heatmaps.
pub const MASKED_RGB: [u8; 3] = [128, 128, 128];
/// Each grid cell is drawn as a square of this many pixels.
pub const HEATMAP_SCALE: usize = 8;

const COLORMAP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Linear colormap on `t ∈ [0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let k = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - k as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (COLORMAP[k][c] * (1.0 - f) + COLORMAP[k + 1][c] * f).round() as u8;
    }
    out
}

/// Per-cell colours in grid order (row 0 is the southern edge). The minimum
/// and maximum of the valid values map to the colormap ends.
pub fn heatmap_colors(field: &MaskedField) -> (Vec<[u8; 3]>, Option<(f64, f64)>) {
    let range = field
        .valid()
        .fold(None, |acc: Option<(f64, f64)>, (_, v)| Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v)))));
    let colors = field
        .values()
        .iter()
        .zip(field.mask())
        .map(|(&v, &m)| match (m, range) {
            (true, Some((lo, hi))) if hi > lo => colormap((v - lo) / (hi - lo)),
            (true, _) => colormap(0.0),
            (false, _) => MASKED_RGB,
        })
        .collect();
    (colors, range)
}

/// Writes a binary PPM with north at the top. The value range is recorded in
/// `# min` and `# max` comment lines.
pub fn render_heatmap(field: &MaskedField, path: &Path) -> Result<()> {
    let (rows, cols) = field.spec().shape();
    let (colors, range) = heatmap_colors(field);
    let s = HEATMAP_SCALE;
    let mut out = Vec::with_capacity(64 + rows * cols * s * s * 3);
    writeln!(out, "P6")?;
    match range {
        Some((lo, hi)) => writeln!(out, "# min {lo}\n# max {hi}")?,
        None => writeln!(out, "# min none\n# max none")?,
    }
    writeln!(out, "{} {}\n255", cols * s, rows * s)?;
    for r in (0..rows).rev() {
        for _ in 0..s {
            for c in 0..cols {
                for _ in 0..s {
                    out.extend_from_slice(&colors[r * cols + c]);
                }
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Evaluation of one model on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub rmse_map: MaskedField,
    pub hist_full: HistPair,
    pub hist_extreme: HistPair,
}

/// Predicted and target histograms over the same bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistPair {
    pub predicted: Histogram,
    pub target: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub model: String,
    pub dates: Vec<NaiveDate>,
    pub overall_rmse: f64,
    pub n_pairs: usize,
    pub mean_pred: f64,
    pub mean_target: f64,
    pub extreme: ExtremeMetrics,
    pub hist_spec: HistSpec,
}

/// Builds a report from per-day predictions aligned with `eval.days()`.
pub fn evaluate_predictions(
    model: &str,
    preds: &[MaskedField],
    eval: &Dataset,
    hist: HistSpec,
    threshold: f64,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::EmptyEval);
    }
    let targets: Vec<MaskedField> = eval.days().iter().map(|d| d.target.clone()).collect();
    let rmse = rmse_at_stations(preds, &targets)?;
    let pairs = valid_pairs(preds, &targets)?;
    let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let n = pairs.len() as f64;
    let (xp, xt): (Vec<f64>, Vec<f64>) = pairs.iter().copied().filter(|&(_, t)| t > threshold).unzip();
    Ok(EvalReport {
        metrics: EvalMetrics {
            model: model.into(),
            dates: eval.dates(),
            overall_rmse: rmse.overall,
            n_pairs: rmse.n_pairs,
            mean_pred: ordered_sum(p.clone()) / n,
            mean_target: ordered_sum(t.clone()) / n,
            extreme: extreme_from_pairs(&pairs, threshold),
            hist_spec: hist,
        },
        rmse_map: rmse.map,
        hist_full: HistPair {
            predicted: bias_histogram(&p, hist)?,
            target: bias_histogram(&t, hist)?,
        },
        hist_extreme: HistPair {
            predicted: bias_histogram(&xp, hist)?,
            target: bias_histogram(&xt, hist)?,
        },
    })
}

/// Predicts every evaluation day with `model` and builds a report.
pub fn evaluate_with(
    name: &str,
    eval: &Dataset,
    hist: HistSpec,
    threshold: f64,
    model: impl Fn(&GridStack) -> Result<MaskedField>,
) -> Result<EvalReport> {
    let preds = eval.days().iter().map(|d| model(&d.input)).collect::<Result<Vec<_>>>()?;
    evaluate_predictions(name, &preds, eval, hist, threshold)
}

const METRICS_FILE: &str = "metrics.json";
const MAP_FILE: &str = "rmse_map.mfield";
const PPM_FILE: &str = "rmse_map.ppm";
const HIST_FULL_FILE: &str = "hist_full.csv";
const HIST_EXTREME_FILE: &str = "hist_gt20.csv";

#[derive(Serialize, Deserialize)]
struct HistRow {
    bin_lo: String,
    bin_hi: String,
    predicted: u64,
    target: u64,
}

fn write_hist(pair: &HistPair, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let row = |lo: String, hi: String, p, t| HistRow {
        bin_lo: lo,
        bin_hi: hi,
        predicted: p,
        target: t,
    };
    w.serialize(row("-inf".into(), pair.predicted.spec.lo.to_string(), pair.predicted.underflow, pair.target.underflow))?;
    for k in 0..pair.predicted.counts.len() {
        let (lo, hi) = pair.predicted.bin_edges(k);
        w.serialize(row(lo.to_string(), hi.to_string(), pair.predicted.counts[k], pair.target.counts[k]))?;
    }
    w.serialize(row(pair.predicted.spec.hi.to_string(), "inf".into(), pair.predicted.overflow, pair.target.overflow))?;
    w.flush()?;
    Ok(())
}

fn read_hist(spec: HistSpec, path: &Path) -> Result<HistPair> {
    let rows = csv::Reader::from_path(path)?.deserialize().collect::<std::result::Result<Vec<HistRow>, _>>()?;
    let n = spec.n_bins()?;
    if rows.len() != n + 2 {
        return Err(Error::format(path, format!("{} rows, expected {}", rows.len(), n + 2)));
    }
    let make = |f: fn(&HistRow) -> u64| Histogram {
        spec,
        counts: rows[1..=n].iter().map(f).collect(),
        underflow: f(&rows[0]),
        overflow: f(&rows[n + 1]),
    };
    Ok(HistPair {
        predicted: make(|r| r.predicted),
        target: make(|r| r.target),
    })
}

impl EvalReport {
    /// Writes `metrics.json`, `rmse_map.mfield`, `rmse_map.ppm`,
    /// `hist_full.csv` and `hist_gt20.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&self.metrics)? + "\n")?;
        self.rmse_map.write(&dir.join(MAP_FILE), None)?;
        render_heatmap(&self.rmse_map, &dir.join(PPM_FILE))?;
        write_hist(&self.hist_full, &dir.join(HIST_FULL_FILE))?;
        write_hist(&self.hist_extreme, &dir.join(HIST_EXTREME_FILE))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let metrics: EvalMetrics = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        let (rmse_map, _) = MaskedField::read(&dir.join(MAP_FILE))?;
        Ok(EvalReport {
            hist_full: read_hist(metrics.hist_spec, &dir.join(HIST_FULL_FILE))?,
            hist_extreme: read_hist(metrics.hist_spec, &dir.join(HIST_EXTREME_FILE))?,
            metrics,
            rmse_map,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub rf: Option<f64>,
    pub unet: Option<f64>,
    /// `"rf"`, `"unet"` or `"tie"`; `None` when neither value exists.
    pub winner: Option<String>,
    pub margin: Option<f64>,
}

fn verdict(rf: Option<f64>, unet: Option<f64>) -> Verdict {
    let (winner, margin) = match (rf, unet) {
        (Some(a), Some(b)) => {
            let margin = (a - b).abs();
            let w = if margin <= 1e-12 * a.abs().max(b.abs()) {
                "tie"
            } else if b < a {
                "unet"
            } else {
                "rf"
            };
            (Some(w.to_string()), Some(margin))
        }
        _ => (None, None),
    };
    Verdict { rf, unet, winner, margin }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub metrics: EvalMetrics,
    pub hist_full: HistPair,
    pub hist_extreme: HistPair,
    /// Cells with a temporal RMSE, as `(row, col, rmse)`.
    pub rmse_map: Vec<(usize, usize, f64)>,
}

impl From<&EvalReport> for ModelSummary {
    fn from(r: &EvalReport) -> Self {
        let cols = r.rmse_map.spec().cols();
        ModelSummary {
            metrics: r.metrics.clone(),
            hist_full: r.hist_full.clone(),
            hist_extreme: r.hist_extreme.clone(),
            rmse_map: r.rmse_map.valid().map(|(i, v)| (i / cols, i % cols, v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Lower overall RMSE wins.
    pub overall: Verdict,
    /// Lower RMSE on targets above the extreme threshold wins.
    pub extreme: Verdict,
    pub rf: ModelSummary,
    pub unet: ModelSummary,
}

pub fn compare_report(rf: &EvalReport, unet: &EvalReport) -> Result<Comparison> {
    let (a, b) = (&rf.metrics, &unet.metrics);
    if a.dates != b.dates {
        return Err(Error::MismatchedEvalSets("evaluation dates differ".into()));
    }
    if rf.rmse_map.spec() != unet.rmse_map.spec() || rf.rmse_map.mask() != unet.rmse_map.mask() || a.n_pairs != b.n_pairs {
        return Err(Error::MismatchedEvalSets("evaluated cells differ".into()));
    }
    if a.extreme.threshold != b.extreme.threshold || a.hist_spec != b.hist_spec {
        return Err(Error::MismatchedEvalSets("threshold or histogram bins differ".into()));
    }
    Ok(Comparison {
        overall: verdict(Some(a.overall_rmse), Some(b.overall_rmse)),
        extreme: verdict(a.extreme.rmse, b.extreme.rmse),
        rf: rf.into(),
        unet: unet.into(),
    })
}

impl Comparison {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
