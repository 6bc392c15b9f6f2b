//! Displacement and classification metrics.
//!
//! Displacements are Euclidean distances between box centers after scaling
//! normalized coordinates to pixels. Every reduction sorts its terms before
//! summing, so results do not depend on the order of the inputs.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::models::{Forecast, Forecaster, ModelError};
use crate::seqdata::{ActionLabel, BBox, ImageSize, ObservationWindow};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions vs {truth} ground-truth entries")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("nothing to score")]
    Empty,
    #[error("horizon {horizon} exceeds available ground truth ({available} steps)")]
    Horizon { horizon: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Order-independent sum: terms are sorted before accumulation.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

pub fn stable_mean(values: &[f64]) -> f64 {
    stable_sum(values) / values.len() as f64
}

fn check_lengths(pred: usize, truth: usize) -> Result<(), MetricError> {
    if pred != truth {
        return Err(MetricError::LengthMismatch { pred, truth });
    }
    if pred == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Pixel distance between two box centers.
pub fn center_displacement(pred: &BBox, truth: &BBox, image: ImageSize) -> f64 {
    let dx = (pred.x - truth.x) * image.width;
    let dy = (pred.y - truth.y) * image.height;
    (dx * dx + dy * dy).sqrt()
}

/// Pixel distance between box sizes; a diagnostic kept out of ADE.
pub fn size_displacement(pred: &BBox, truth: &BBox, image: ImageSize) -> f64 {
    let dw = (pred.w - truth.w) * image.width;
    let dh = (pred.h - truth.h) * image.height;
    (dw * dw + dh * dh).sqrt()
}

pub fn displacements(pred: &[BBox], truth: &[BBox], image: ImageSize) -> Result<Vec<f64>, MetricError> {
    check_lengths(pred.len(), truth.len())?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| center_displacement(p, t, image))
        .collect())
}

/// Average displacement error over the predicted steps, in pixels.
pub fn ade(pred: &[BBox], truth: &[BBox], image: ImageSize) -> Result<f64, MetricError> {
    let d = displacements(pred, truth, image)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Displacement at the final predicted step, in pixels.
pub fn fde(pred: &[BBox], truth: &[BBox], image: ImageSize) -> Result<f64, MetricError> {
    check_lengths(pred.len(), truth.len())?;
    Ok(center_displacement(pred.last().unwrap(), truth.last().unwrap(), image))
}

/// Confusion counts with crossing as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, pred: ActionLabel, truth: ActionLabel) {
        match (pred.is_crossing(), truth.is_crossing()) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(TP + TN) / total`, or `None` when nothing was counted.
    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.tp + self.tn) as f64 / n as f64)
    }
}

pub fn accuracy(pred: &[ActionLabel], truth: &[ActionLabel]) -> Result<(f64, ConfusionCounts), MetricError> {
    check_lengths(pred.len(), truth.len())?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        c.record(p, t);
    }
    Ok((c.accuracy().unwrap(), c))
}

/// Aggregated scores over a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ade: f64,
    pub fde: f64,
    pub accuracy: f64,
    pub per_step_ade: Vec<f64>,
    pub per_step_accuracy: Vec<f64>,
    pub counts: ConfusionCounts,
    /// Mean size displacement in pixels.
    pub size_error: f64,
    pub image_size: ImageSize,
    pub windows: usize,
}

impl EvalReport {
    pub fn horizon(&self) -> usize {
        self.per_step_ade.len()
    }

    /// Summary plus per-step curves as an aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "windows     {}", self.windows);
        let _ = writeln!(s, "image_size  {}", self.image_size);
        let _ = writeln!(s, "horizon     {}", self.horizon());
        let _ = writeln!(s, "ade_px      {:.4}", self.ade);
        let _ = writeln!(s, "fde_px      {:.4}", self.fde);
        let _ = writeln!(s, "accuracy    {:.4}", self.accuracy);
        let _ = writeln!(s, "size_err_px {:.4}", self.size_error);
        let c = &self.counts;
        let _ = writeln!(s, "counts      tp={} tn={} fp={} fn={}", c.tp, c.tn, c.fp, c.fn_);
        let _ = writeln!(s, "{:>5} {:>12} {:>10}", "step", "ade_px", "accuracy");
        for (k, (a, acc)) in self.per_step_ade.iter().zip(&self.per_step_accuracy).enumerate() {
            let _ = writeln!(s, "{:>5} {:>12.4} {:>10.4}", k + 1, a, acc);
        }
        s
    }

    /// One record per step: `step,ade_px,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ade_px,accuracy\n");
        for (k, (a, acc)) in self.per_step_ade.iter().zip(&self.per_step_accuracy).enumerate() {
            let _ = writeln!(s, "{},{},{}", k + 1, a, acc);
        }
        s
    }

    /// Single-record summary with header.
    pub fn summary_csv(&self) -> String {
        let c = &self.counts;
        format!(
            "windows,horizon,ade_px,fde_px,accuracy,size_err_px,tp,tn,fp,fn\n{},{},{},{},{},{},{},{},{},{}\n",
            self.windows,
            self.horizon(),
            self.ade,
            self.fde,
            self.accuracy,
            self.size_error,
            c.tp,
            c.tn,
            c.fp,
            c.fn_
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Scores forecasts against the first `horizon` target steps of each window.
///
/// Each window contributes equally. `per_step_ade[k]` is the mean displacement
/// at step `k + 1`; `ade` is the mean of that curve and `fde` its last entry.
pub fn score_forecasts(
    forecasts: &[Forecast],
    windows: &[&ObservationWindow],
    horizon: usize,
    image: ImageSize,
) -> Result<EvalReport, MetricError> {
    check_lengths(forecasts.len(), windows.len())?;
    if horizon == 0 {
        return Err(MetricError::Empty);
    }
    let mut step_disp = vec![Vec::with_capacity(windows.len()); horizon];
    let mut step_counts = vec![ConfusionCounts::default(); horizon];
    let mut sizes = Vec::with_capacity(windows.len() * horizon);
    for (f, w) in forecasts.iter().zip(windows) {
        if w.pred_len() < horizon || f.horizon() < horizon {
            return Err(MetricError::Horizon {
                horizon,
                available: w.pred_len().min(f.horizon()),
            });
        }
        for k in 0..horizon {
            step_disp[k].push(center_displacement(&f.position_seq[k], &w.target_positions[k], image));
            sizes.push(size_displacement(&f.position_seq[k], &w.target_positions[k], image));
            step_counts[k].record(f.action_labels[k], w.target_actions[k]);
        }
    }
    let per_step_ade: Vec<f64> = step_disp.iter().map(|d| stable_mean(d)).collect();
    let per_step_accuracy: Vec<f64> = step_counts.iter().map(|c| c.accuracy().unwrap()).collect();
    let mut counts = ConfusionCounts::default();
    for c in &step_counts {
        counts.merge(c);
    }
    Ok(EvalReport {
        ade: stable_mean(&per_step_ade),
        fde: per_step_ade[horizon - 1],
        accuracy: counts.accuracy().unwrap(),
        per_step_ade,
        per_step_accuracy,
        counts,
        size_error: stable_mean(&sizes),
        image_size: image,
        windows: windows.len(),
    })
}

/// Runs `forecaster` at `horizon` and scores the result.
pub fn evaluate_forecaster(
    forecaster: &dyn Forecaster,
    windows: &[&ObservationWindow],
    horizon: usize,
    image: ImageSize,
) -> Result<EvalReport, MetricError> {
    if windows.is_empty() {
        return Err(MetricError::Empty);
    }
    let forecasts = forecaster.forecast_batch(windows, horizon)?;
    score_forecasts(&forecasts, windows, horizon, image)
}

/// Per-step ADE and accuracy curves over steps `1..=t_max`.
pub fn horizon_sweep(
    forecaster: &dyn Forecaster,
    windows: &[&ObservationWindow],
    t_max: usize,
    image: ImageSize,
) -> Result<EvalReport, MetricError> {
    if t_max > forecaster.max_horizon() {
        return Err(MetricError::Horizon {
            horizon: t_max,
            available: forecaster.max_horizon(),
        });
    }
    evaluate_forecaster(forecaster, windows, t_max, image)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` if either
/// input is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
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
