//! Per-frame error metrics, snippet errors, anomaly-score aggregation and
//! line-wise series processing.

mod eval;
mod io;
mod layer;

use serde::{Deserialize, Serialize};

use crate::pipeline::SnippetOrigin;
use crate::{Error, Result};

pub use eval::{
    confusion, detect, evaluation_mask, fit_threshold, precision_recall, roc_auc, Confusion, EvalReport, MaskClass,
    RocCurve,
};
pub use io::{
    parse_scores_csv, score_rows, scores_csv_string, write_heatmap_csv, write_heatmap_pgm, write_scores_csv, ScoreRow,
    SCORES_HEADER,
};
pub use layer::{baseline_frame_scores, score_layer, LayerScores, LineScores};

/// Per-frame error metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    /// Frobenius norm of the whole error matrix.
    Mse,
    /// Largest Frobenius norm over all `a × b` windows (stride 1).
    SpatialScoping { a: usize, b: usize },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::SpatialScoping { a: 8, b: 8 }
    }
}

impl Metric {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if let Metric::SpatialScoping { a, b } = *self {
            if a == 0 || b == 0 || a > h || b > w {
                return Err(Error::InvalidArgument(format!(
                    "spatial window {a}x{b} must be positive and fit a {h}x{w} frame"
                )));
            }
        }
        Ok(())
    }

    pub fn score(&self, s: &[f32], s_hat: &[f32], h: usize, w: usize) -> Result<f64> {
        match *self {
            Metric::Mse => mse_metric(s, s_hat),
            Metric::SpatialScoping { a, b } => spatial_scoping_metric(s, s_hat, h, w, a, b),
        }
    }
}

fn check_pair(s: &[f32], s_hat: &[f32]) -> Result<()> {
    if s.len() != s_hat.len() {
        return Err(Error::Shape(format!(
            "frames differ in size: {} vs {}",
            s.len(),
            s_hat.len()
        )));
    }
    Ok(())
}

/// `‖S − Ŝ‖_F`.
pub fn mse_metric(s: &[f32], s_hat: &[f32]) -> Result<f64> {
    check_pair(s, s_hat)?;
    Ok(crate::tensor::frobenius_distance(s, s_hat))
}

/// Maximum window Frobenius norm of `S − Ŝ` over every `a × b` window,
/// from a summed-area table of squared errors.
pub fn spatial_scoping_metric(s: &[f32], s_hat: &[f32], h: usize, w: usize, a: usize, b: usize) -> Result<f64> {
    check_pair(s, s_hat)?;
    if s.len() != h * w {
        return Err(Error::Shape(format!("frame has {} values, expected {h}x{w}", s.len())));
    }
    Metric::SpatialScoping { a, b }.validate(h, w)?;
    // sat[(y+1)(w+1) + x+1] = sum of squared errors over rows ≤ y, cols ≤ x
    let stride = w + 1;
    let mut sat = vec![0.0f64; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            let e = s[y * w + x] as f64 - s_hat[y * w + x] as f64;
            row += e * e;
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    let mut best = 0.0f64;
    for y in 0..=h - a {
        for x in 0..=w - b {
            let sum = sat[(y + a) * stride + x + b] - sat[y * stride + x + b] - sat[(y + a) * stride + x] + sat[y * stride + x];
            best = best.max(sum);
        }
    }
    Ok(best.max(0.0).sqrt())
}

/// `(e_rec, e_reg)`: metric summed over the first `p` frames, and over all
/// `p + q` frames.
pub fn snippet_errors(
    target: &[f32],
    prediction: &[f32],
    p: usize,
    q: usize,
    h: usize,
    w: usize,
    metric: Metric,
) -> Result<(f64, f64)> {
    let len = h * w;
    if target.len() != (p + q) * len || prediction.len() != target.len() {
        return Err(Error::Shape(format!(
            "snippet needs {} values, got target {} and prediction {}",
            (p + q) * len,
            target.len(),
            prediction.len()
        )));
    }
    let mut e_rec = 0.0;
    let mut e_reg = 0.0;
    for (i, (t, y)) in target.chunks(len).zip(prediction.chunks(len)).enumerate() {
        let v = metric.score(t, y, h, w)?;
        if i < p {
            e_rec += v;
        }
        e_reg += v;
    }
    Ok((e_rec, e_reg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnippetError {
    pub origin: SnippetOrigin,
    pub e_rec: f64,
    pub e_reg: f64,
}

/// Per-frame anomaly scores indexed by `line * frames_per_line + j`. Frames
/// no snippet covers are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub lines: usize,
    pub frames_per_line: usize,
    pub f_rec: Vec<Option<f64>>,
    pub f_reg: Vec<Option<f64>>,
    pub rec_count: Vec<u32>,
    pub reg_count: Vec<u32>,
}

/// Averages each snippet's errors onto the frames its windows cover: the
/// first `p` lines for `e_rec`, all `p + q` lines for `e_reg`.
pub fn frame_anomaly_scores(
    errors: &[SnippetError],
    lines: usize,
    frames_per_line: usize,
    p: usize,
    q: usize,
) -> Result<FrameScores> {
    let n = lines * frames_per_line;
    let mut rec_sum = vec![0.0; n];
    let mut reg_sum = vec![0.0; n];
    let mut rec_count = vec![0u32; n];
    let mut reg_count = vec![0u32; n];
    for e in errors {
        let o = e.origin;
        if o.frame_index >= frames_per_line || o.start_line + p + q > lines {
            return Err(Error::Shape(format!(
                "snippet at line {} frame {} does not fit {lines} lines x {frames_per_line} frames",
                o.start_line, o.frame_index
            )));
        }
        for k in 0..p + q {
            let t = (o.start_line + k) * frames_per_line + o.frame_index;
            if k < p {
                rec_sum[t] += e.e_rec;
                rec_count[t] += 1;
            }
            reg_sum[t] += e.e_reg;
            reg_count[t] += 1;
        }
    }
    let mean = |sum: &[f64], count: &[u32]| -> Vec<Option<f64>> {
        sum.iter()
            .zip(count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    };
    Ok(FrameScores {
        lines,
        frames_per_line,
        f_rec: mean(&rec_sum, &rec_count),
        f_reg: mean(&reg_sum, &reg_count),
        rec_count,
        reg_count,
    })
}

/// Mean of each line's defined frame scores.
pub fn linewise(frame_scores: &[Option<f64>], frames_per_line: usize) -> Vec<Option<f64>> {
    frame_scores
        .chunks(frames_per_line)
        .map(|line| {
            let vals: Vec<f64> = line.iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Subtracts a centred moving average of width `window`. An even width uses
/// the symmetric `window + 1`-tap filter with half-weight end taps, so a
/// straight line passes through unchanged; near the ends the window shrinks
/// symmetrically to the distance from the edge.
pub fn detrend(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 2 {
        return Err(Error::InvalidArgument(format!("detrend window must be at least 2, got {window}")));
    }
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let half = window / 2;
        let reach = half.min(t).min(n - 1 - t);
        let trend = if reach == half && window % 2 == 0 {
            let inner: f64 = series[t - half + 1..t + half].iter().sum();
            let ends = 0.5 * (series[t - half] + series[t + half]);
            (inner + ends) / window as f64
        } else if reach == half {
            series[t - half..=t + half].iter().sum::<f64>() / window as f64
        } else {
            series[t - reach..=t + reach].iter().sum::<f64>() / (2 * reach + 1) as f64
        };
        out.push(series[t] - trend);
    }
    Ok(out)
}

/// Detrends the longest contiguous run of defined values; undefined entries
/// stay undefined.
pub fn detrend_partial(series: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>> {
    let mut out = vec![None; series.len()];
    let mut t = 0;
    while t < series.len() {
        if series[t].is_none() {
            t += 1;
            continue;
        }
        let start = t;
        while t < series.len() && series[t].is_some() {
            t += 1;
        }
        let run: Vec<f64> = series[start..t].iter().map(|v| v.unwrap()).collect();
        for (k, v) in detrend(&run, window)?.into_iter().enumerate() {
            out[start + k] = Some(v);
        }
    }
    Ok(out)
}

/// Population standard deviation.
pub fn series_std(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("standard deviation of an empty series".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt())
}

pub fn normalize_series(series: &[f64], ref_std: f64) -> Result<Vec<f64>> {
    if !(ref_std > 0.0 && ref_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("reference std must be positive, got {ref_std}")));
    }
    Ok(series.iter().map(|v| v / ref_std).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Fixed threshold; `None` fits it on the training layers.
    pub threshold: Option<f64>,
    pub detrend_window: usize,
    pub metric: Metric,
    /// Lines excluded at each end of a layer.
    pub boundary_margin: usize,
    /// Don't-care lines on each side of a labelled anomaly; `None` uses
    /// `p + q - 1`.
    pub halo: Option<usize>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            threshold: None,
            detrend_window: 20,
            metric: Metric::default(),
            boundary_margin: 3,
            halo: None,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.detrend_window < 2 {
            return Err(Error::InvalidArgument("detrend window must be at least 2".into()));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument("threshold must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn halo_width(&self, p: usize, q: usize) -> usize {
        self.halo.unwrap_or((p + q).saturating_sub(1))
    }
}

/// Normalization scale and threshold learned from nominal training layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ref_std: f64,
    pub threshold: f64,
}

/// Normalizes the training layers' series in place by the standard deviation
/// of their detrended regression scores (boundary lines excluded) and fits
/// the threshold on the result.
pub fn calibrate(train: &mut [LineScores], config: &DetectionConfig) -> Result<Calibration> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one training layer".into()));
    }
    let none = std::collections::BTreeSet::new();
    let masks: Vec<Vec<MaskClass>> = train
        .iter()
        .map(|s| evaluation_mask(s.lines(), &none, config.boundary_margin, 0))
        .collect();
    let pooled: Vec<f64> = train
        .iter()
        .zip(&masks)
        .flat_map(|(s, m)| {
            s.f_reg_detrended
                .iter()
                .zip(m)
                .filter(|(_, &c)| c == MaskClass::Eval)
                .map(|(&v, _)| v)
        })
        .collect();
    let ref_std = series_std(&pooled)?;
    for s in train.iter_mut() {
        s.normalize(ref_std)?;
    }
    let threshold = match config.threshold {
        Some(t) => t,
        None => fit_threshold(
            train
                .iter()
                .zip(&masks)
                .map(|(s, m)| (s.f_reg_normalized.as_deref().unwrap(), m.as_slice())),
        )?,
    };
    Ok(Calibration { ref_std, threshold })
}

/// Detection outcome for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub flags: Vec<bool>,
    pub mask: Vec<MaskClass>,
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub roc: Option<RocCurve>,
}

/// Normalizes `scores` with the calibration, thresholds them and evaluates
/// against `labels`. Recall and ROC are `None` when no labelled line is
/// evaluated (nominal layers).
pub fn detect_layer(
    scores: &mut LineScores,
    labels: &std::collections::BTreeSet<usize>,
    calibration: &Calibration,
    config: &DetectionConfig,
    p: usize,
    q: usize,
) -> Result<Detection> {
    scores.normalize(calibration.ref_std)?;
    let normalized = scores.normalized()?;
    let mask = evaluation_mask(scores.lines(), labels, config.boundary_margin, config.halo_width(p, q));
    let flags = detect(normalized, calibration.threshold);
    let confusion = confusion(&flags, labels, &mask)?;
    let (precision, recall) = match precision_recall(&flags, labels, &mask) {
        Ok((p, r)) => (p, Some(r)),
        Err(Error::Undefined(_)) => (
            (confusion.tp + confusion.fp > 0).then(|| confusion.tp as f64 / (confusion.tp + confusion.fp) as f64),
            None,
        ),
        Err(e) => return Err(e),
    };
    let roc = match roc_auc(normalized, labels, &mask) {
        Ok(r) => Some(r),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Detection {
        flags,
        mask,
        confusion,
        precision,
        recall,
        roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_vanish_on_perfect_prediction() {
        let s: Vec<f32> = (0..64).map(|i| i as f32).collect();
        assert_eq!(mse_metric(&s, &s).unwrap(), 0.0);
        assert_eq!(spatial_scoping_metric(&s, &s, 8, 8, 3, 3).unwrap(), 0.0);
    }

    #[test]
    fn full_window_equals_frobenius() {
        let s: Vec<f32> = (0..12).map(|i| (i as f32 * 0.7).sin()).collect();
        let z = vec![0.0; 12];
        let full = spatial_scoping_metric(&s, &z, 3, 4, 3, 4).unwrap();
        assert!((full - mse_metric(&s, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lone_pixel() {
        let mut s = vec![0.0f32; 100];
        s[55] = -2.5;
        let z = vec![0.0; 100];
        assert_eq!(spatial_scoping_metric(&s, &z, 10, 10, 4, 4).unwrap(), 2.5);
    }

    #[test]
    fn oversized_window_rejected() {
        let z = vec![0.0; 16];
        assert!(spatial_scoping_metric(&z, &z, 4, 4, 5, 1).is_err());
        assert!(spatial_scoping_metric(&z, &z, 4, 4, 0, 1).is_err());
    }

    #[test]
    fn snippet_error_sums() {
        // per-frame errors 2 and 3 on 1×1 frames
        let t = [0.0f32, 0.0];
        let y = [2.0f32, 3.0];
        assert_eq!(snippet_errors(&t, &y, 1, 1, 1, 1, Metric::Mse).unwrap(), (2.0, 5.0));
        assert_eq!(snippet_errors(&t, &y, 2, 0, 1, 1, Metric::Mse).unwrap(), (5.0, 5.0));
        assert_eq!(snippet_errors(&t, &t, 1, 1, 1, 1, Metric::Mse).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn interior_mean_of_covering_snippets() {
        let p = 3;
        let errors: Vec<SnippetError> = (0..3)
            .map(|s| SnippetError {
                origin: SnippetOrigin {
                    layer_id: 0,
                    start_line: s,
                    frame_index: 0,
                },
                e_rec: (s + 1) as f64,
                e_reg: 10.0,
            })
            .collect();
        let f = frame_anomaly_scores(&errors, 6, 1, p, 1).unwrap();
        assert_eq!(f.f_rec[2], Some(2.0));
        assert_eq!(f.rec_count[0], 1);
        assert_eq!(f.f_rec[5], None);
        assert_eq!(f.f_reg[5], Some(10.0));
    }

    #[test]
    fn detrend_constant_and_impulse() {
        assert!(detrend(&[4.0; 50], 20).unwrap().iter().all(|v| v.abs() < 1e-12));
        let mut s = vec![1.0; 60];
        s[30] += 5.0;
        let d = detrend(&s, 20).unwrap();
        assert!((d[30] - 5.0 * (1.0 - 1.0 / 20.0)).abs() < 1e-12);
        assert!(detrend(&s, 1).is_err());
    }

    #[test]
    fn detrend_partial_keeps_gaps() {
        let s = [Some(1.0), Some(1.0), None, Some(2.0)];
        let d = detrend_partial(&s, 2).unwrap();
        assert_eq!(d, vec![Some(0.0), Some(0.0), None, Some(0.0)]);
    }

    #[test]
    fn normalize_divides() {
        assert_eq!(normalize_series(&[2.0, -4.0], 2.0).unwrap(), vec![1.0, -2.0]);
        assert!(normalize_series(&[1.0], 0.0).is_err());
    }
}
