use serde::{Deserialize, Serialize};

use super::{detrend, detrend_partial, frame_anomaly_scores, linewise, normalize_series, snippet_errors, FrameScores, Metric, SnippetError};
use crate::model::{batch_tensor, EncoderDecoderModel};
use crate::pipeline::{gather_snippet, snippet_origins};
use crate::synth::LayerSequence;
use crate::{Error, Result};

/// Everything scored on one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub layer_id: u32,
    pub snippet_errors: Vec<SnippetError>,
    pub frames: FrameScores,
}

/// Runs the model over every snippet of a prepared (normalized, model-sized)
/// layer and aggregates per-frame anomaly scores.
pub fn score_layer(model: &EncoderDecoderModel, layer: &LayerSequence, metric: Metric, batch_size: usize) -> Result<LayerScores> {
    let c = model.config();
    if layer.height != c.height || layer.width != c.width {
        return Err(Error::Shape(format!(
            "layer frames are {}x{}, model expects {}x{}",
            layer.height, layer.width, c.height, c.width
        )));
    }
    metric.validate(c.height, c.width)?;
    let (p, q) = (c.p, c.q);
    let origins = snippet_origins(layer.layer_id, layer.lines, layer.frames_per_line, p, q)?;
    let per = (p + q) * c.frame_len();
    let mut errors = Vec::with_capacity(origins.len());
    let mut buf = Vec::new();
    for chunk in origins.chunks(batch_size.max(1)) {
        buf.clear();
        for o in chunk {
            gather_snippet(layer, o, p + q, &mut buf);
        }
        let x = batch_tensor(buf.chunks(per).map(|s| &s[..p * c.frame_len()]), p, c.height, c.width)?;
        let y = model.predict(&x)?;
        for ((o, target), pred) in chunk.iter().zip(buf.chunks(per)).zip(y.data().chunks(per)) {
            let (e_rec, e_reg) = snippet_errors(target, pred, p, q, c.height, c.width, metric)?;
            errors.push(SnippetError {
                origin: *o,
                e_rec,
                e_reg,
            });
        }
    }
    let frames = frame_anomaly_scores(&errors, layer.lines, layer.frames_per_line, p, q)?;
    Ok(LayerScores {
        layer_id: layer.layer_id,
        snippet_errors: errors,
        frames,
    })
}

/// Non-learning baseline: `‖S‖_F` of every frame, laid out like model
/// scores with the value in the regression slot.
pub fn baseline_frame_scores(layer: &LayerSequence) -> FrameScores {
    let n = layer.frame_count();
    let f_reg = layer
        .frames
        .chunks(layer.frame_len())
        .map(|f| Some(f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()))
        .collect();
    FrameScores {
        lines: layer.lines,
        frames_per_line: layer.frames_per_line,
        f_rec: vec![None; n],
        f_reg,
        rec_count: vec![0; n],
        reg_count: vec![1; n],
    }
}

/// Line-wise series of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineScores {
    pub layer_id: u32,
    pub f_rec: Vec<Option<f64>>,
    pub f_reg: Vec<f64>,
    pub f_rec_detrended: Vec<Option<f64>>,
    pub f_reg_detrended: Vec<f64>,
    pub f_reg_normalized: Option<Vec<f64>>,
}

impl LineScores {
    pub fn from_frames(layer_id: u32, frames: &FrameScores, detrend_window: usize) -> Result<Self> {
        let f_rec = linewise(&frames.f_rec, frames.frames_per_line);
        let f_reg = linewise(&frames.f_reg, frames.frames_per_line)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Shape(format!("line {i} has no regression coverage"))))
            .collect::<Result<Vec<f64>>>()?;
        Ok(LineScores {
            layer_id,
            f_rec_detrended: detrend_partial(&f_rec, detrend_window)?,
            f_reg_detrended: detrend(&f_reg, detrend_window)?,
            f_rec,
            f_reg,
            f_reg_normalized: None,
        })
    }

    pub fn lines(&self) -> usize {
        self.f_reg.len()
    }

    pub fn normalize(&mut self, ref_std: f64) -> Result<()> {
        self.f_reg_normalized = Some(normalize_series(&self.f_reg_detrended, ref_std)?);
        Ok(())
    }

    pub fn normalized(&self) -> Result<&[f64]> {
        self.f_reg_normalized
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("layer {} scores are not normalized", self.layer_id)))
    }
}
