use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a line takes part in evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskClass {
    Eval,
    /// Within the margin at either end of the layer.
    Boundary,
    /// Unlabelled line next to a labelled anomaly; neither TP nor FP.
    Halo,
}

impl MaskClass {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskClass::Eval => "eval",
            MaskClass::Boundary => "boundary",
            MaskClass::Halo => "halo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eval" => Some(MaskClass::Eval),
            "boundary" => Some(MaskClass::Boundary),
            "halo" => Some(MaskClass::Halo),
            _ => None,
        }
    }
}

pub fn evaluation_mask(lines: usize, labels: &BTreeSet<usize>, margin: usize, halo: usize) -> Vec<MaskClass> {
    (0..lines)
        .map(|i| {
            if i < margin || i + margin >= lines {
                MaskClass::Boundary
            } else if labels.contains(&i) {
                MaskClass::Eval
            } else if labels.range(i.saturating_sub(halo)..=i + halo).next().is_some() {
                MaskClass::Halo
            } else {
                MaskClass::Eval
            }
        })
        .collect()
}

/// Largest normalized score over every training line whose mask class is
/// [`MaskClass::Eval`]; applying it to the same lines flags nothing.
pub fn fit_threshold<'a>(series: impl IntoIterator<Item = (&'a [f64], &'a [MaskClass])>) -> Result<f64> {
    let mut best: Option<f64> = None;
    for (scores, mask) in series {
        if scores.len() != mask.len() {
            return Err(Error::Shape(format!(
                "{} scores but {} mask entries",
                scores.len(),
                mask.len()
            )));
        }
        for (&s, &m) in scores.iter().zip(mask) {
            if m == MaskClass::Eval {
                best = Some(best.map_or(s, |b: f64| b.max(s)));
            }
        }
    }
    let eps = best.ok_or_else(|| Error::InvalidArgument("no training line scores to fit a threshold".into()))?;
    // ε is meant to be non-negative; a training set whose every detrended
    // score is negative still admits 0 as a zero-false-positive threshold
    Ok(eps.max(0.0))
}

pub fn detect(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn check_lengths(n: usize, mask: &[MaskClass]) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Shape(format!("{n} lines but {} mask entries", mask.len())));
    }
    Ok(())
}

pub fn confusion(flags: &[bool], labels: &BTreeSet<usize>, mask: &[MaskClass]) -> Result<Confusion> {
    check_lengths(flags.len(), mask)?;
    let mut c = Confusion::default();
    for (i, (&f, &m)) in flags.iter().zip(mask).enumerate() {
        if m != MaskClass::Eval {
            continue;
        }
        match (f, labels.contains(&i)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(precision, recall)` over masked lines. Precision is `None` when nothing
/// was flagged; no positive lines at all is an error.
pub fn precision_recall(flags: &[bool], labels: &BTreeSet<usize>, mask: &[MaskClass]) -> Result<(Option<f64>, f64)> {
    let c = confusion(flags, labels, mask)?;
    if c.tp + c.fn_ == 0 {
        return Err(Error::Undefined("recall: no labelled anomalies in the evaluated lines"));
    }
    let precision = (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64);
    Ok((precision, c.tp as f64 / (c.tp + c.fn_) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1) by descending threshold.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC over masked lines, one step per distinct score, trapezoidal AUC.
pub fn roc_auc(scores: &[f64], labels: &BTreeSet<usize>, mask: &[MaskClass]) -> Result<RocCurve> {
    check_lengths(scores.len(), mask)?;
    let mut items: Vec<(f64, bool)> = scores
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m == MaskClass::Eval)
        .map(|(i, (&s, _))| (s, labels.contains(&i)))
        .collect();
    if items.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores"));
    }
    let pos = items.iter().filter(|(_, l)| *l).count();
    let neg = items.len() - pos;
    if pos == 0 {
        return Err(Error::Undefined("ROC: no positive lines"));
    }
    if neg == 0 {
        return Err(Error::Undefined("ROC: no negative lines"));
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < items.len() {
        let s = items[k].0;
        while k < items.len() && items[k].0 == s {
            if items[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer_id: u32,
    pub power_deviation: Option<f64>,
    pub threshold: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub roc: Option<Vec<(f64, f64)>>,
    pub baseline_auc: Option<f64>,
    pub baseline_roc: Option<Vec<(f64, f64)>>,
}
