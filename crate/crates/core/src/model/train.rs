use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_tensor, forward, BnAccess, EncoderDecoderModel};
use crate::pipeline::{perturb_values, AugmentConfig, NormalizationSpec, SnippetSource};
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub val_fraction: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Perturbed copies are generated on the fly, one draw per visit.
    pub augment: Option<AugmentConfig>,
    /// Cap on training samples visited per epoch (a fresh random subset each
    /// epoch). `None` visits every sample.
    pub max_samples_per_epoch: Option<usize>,
    /// Cap on validation samples scored per epoch (a fixed subset).
    pub max_val_samples: Option<usize>,
    /// Cosine-anneals the learning rate per epoch down to
    /// `learning_rate * final_lr_fraction` at the last epoch. `None` keeps it
    /// constant.
    pub final_lr_fraction: Option<f32>,
    /// After every epoch, replace the batchnorm running statistics with the
    /// exact statistics of this many fixed training samples (no augmentation,
    /// dropout off). `None` keeps the running averages.
    pub bn_recalibration_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 32,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            seed: 0,
            patience: None,
            augment: None,
            max_samples_per_epoch: None,
            max_val_samples: None,
            final_lr_fraction: None,
            bn_recalibration_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must be in [0, 1)".into()));
        }
        if self.max_samples_per_epoch == Some(0) || self.max_val_samples == Some(0) || self.bn_recalibration_samples == Some(0) {
            return Err(Error::InvalidArgument("sample caps must be positive".into()));
        }
        if let Some(f) = self.final_lr_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument("final_lr_fraction must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        match self.final_lr_fraction {
            Some(f) if self.epochs > 1 => {
                let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                let scale = f as f64 + (1.0 - f as f64) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                (self.learning_rate as f64 * scale) as f32
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochLoss>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seconds: f64,
}

/// Seeded permutation split: returns `(train, val)` index lists.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if n_val == n && n > 0 { n - 1 } else { n_val };
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Trains in place with Adam on the mean composite loss per batch. Returns
/// the per-epoch history; `augment` needs the normalization to convert its
/// °C magnitudes.
pub fn train<S: SnippetSource + ?Sized>(
    model: &mut EncoderDecoderModel,
    snippets: &S,
    config: &TrainConfig,
    normalization: Option<&NormalizationSpec>,
) -> Result<Vec<EpochLoss>> {
    train_with_progress(model, snippets, config, normalization, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress<S: SnippetSource + ?Sized>(
    model: &mut EncoderDecoderModel,
    snippets: &S,
    config: &TrainConfig,
    normalization: Option<&NormalizationSpec>,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if snippets.is_empty() {
        return Err(Error::InvalidArgument("no training snippets".into()));
    }
    let arch = model.config.clone();
    let (p, q, h, w) = snippets.geometry();
    if (p, q, h, w) != (arch.p, arch.q, arch.height, arch.width) {
        return Err(Error::Shape(format!(
            "snippet p={p} q={q} {h}x{w} does not match model p={} q={} {}x{}",
            arch.p, arch.q, arch.height, arch.width
        )));
    }
    let (aug_sigma, aug_range, copies) = match (&config.augment, normalization) {
        (Some(a), Some(spec)) => (spec.delta(a.noise_sigma_c), spec.delta(a.bias_range_c).abs(), a.copies),
        (Some(_), None) => {
            return Err(Error::InvalidArgument("augmentation requires a normalization spec".into()))
        }
        (None, _) => (0.0, 0.0, 0),
    };

    let started = Instant::now();
    let (train_idx, val_idx) = split_train_val(snippets.len(), config.val_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut val_idx = val_idx;
    if let Some(cap) = config.max_val_samples {
        val_idx.shuffle(&mut rng);
        val_idx.truncate(cap);
        val_idx.sort_unstable();
    }

    let calibration = match config.bn_recalibration_samples {
        Some(k) => {
            let mut pick = train_idx.clone();
            let mut cal_rng = ChaCha8Rng::seed_from_u64(config.seed);
            cal_rng.set_stream(2);
            pick.shuffle(&mut cal_rng);
            pick.truncate(k);
            pick.sort_unstable();
            let mut buf = Vec::new();
            let mut inputs = Vec::with_capacity(pick.len() * arch.p * arch.frame_len());
            for &i in &pick {
                buf.clear();
                snippets.gather(i, &mut buf);
                inputs.extend_from_slice(&buf[..arch.p * arch.frame_len()]);
            }
            Some(crate::tensor::Tensor::new(vec![pick.len(), arch.p, arch.height, arch.width], inputs)?)
        }
        None => None,
    };

    let mut samples: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&i| (0..=copies).map(move |v| (i, v)))
        .collect();
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let weights: Vec<f32> = arch.channel_weights();
    let per_target = arch.output_channels() * arch.frame_len();
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        adam.config.lr = config.learning_rate_at(epoch);
        samples.shuffle(&mut rng);
        let visit = config.max_samples_per_epoch.unwrap_or(samples.len()).min(samples.len());
        let mut total = 0.0;
        for batch in samples[..visit].chunks(config.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len() * arch.p * arch.frame_len());
            let mut targets = Vec::with_capacity(batch.len() * per_target);
            for &(i, variant) in batch {
                let start = targets.len();
                snippets.gather(i, &mut targets);
                if variant > 0 {
                    let bias = if aug_range > 0.0 { rng.gen_range(-aug_range..=aug_range) } else { 0.0 };
                    perturb_values(&mut targets[start..], aug_sigma, bias, &mut rng);
                }
                inputs.extend_from_slice(&targets[start..start + arch.p * arch.frame_len()]);
            }
            let n = batch.len();
            let x = crate::tensor::Tensor::new(vec![n, arch.p, arch.height, arch.width], inputs)?;
            let y = crate::tensor::Tensor::new(vec![n, arch.output_channels(), arch.height, arch.width], targets)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let out = forward(
                &arch,
                &model.layout,
                &model.params,
                BnAccess::Train(&mut model.bn),
                &mut tape,
                xv,
                &mut rng,
            )?;
            let loss = tape.weighted_sq_error(out.output, &y, &weights, 1.0 / n as f32)?;
            let value = tape.value(loss).data()[0] as f64;
            tape.backward(loss, &mut model.params)?;
            adam.step(&mut model.params);
            total += value * n as f64;
        }
        let train_loss = total / visit as f64;
        if let Some(x) = &calibration {
            model.recalibrate_batchnorm(x)?;
        }
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(mean_loss(model, snippets, &val_idx, config.batch_size)?)
        };
        let record = EpochLoss {
            epoch,
            train_loss,
            val_loss,
        };
        progress(&record);
        history.push(record);
        if let (Some(patience), Some(v)) = (config.patience, val_loss) {
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }

    model.meta = TrainingMeta {
        train_config: Some(config.clone()),
        history: history.clone(),
        train_samples: train_idx.len(),
        val_samples: val_idx.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(history)
}

/// Mean infer-mode composite loss over the given snippets.
pub(super) fn mean_loss<S: SnippetSource + ?Sized>(
    model: &EncoderDecoderModel,
    snippets: &S,
    idx: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let arch = &model.config;
    let per = arch.output_channels() * arch.frame_len();
    let mut total = 0.0;
    let mut buf = Vec::new();
    for chunk in idx.chunks(batch_size) {
        buf.clear();
        for &i in chunk {
            snippets.gather(i, &mut buf);
        }
        let x = batch_tensor(buf.chunks(per).map(|s| &s[..arch.p * arch.frame_len()]), arch.p, arch.height, arch.width)?;
        let pred = model.predict(&x)?;
        for (target, yhat) in buf.chunks(per).zip(pred.data().chunks(per)) {
            total += super::composite_loss(target, yhat, arch.p, arch.q, arch.frame_len(), arch.lambda as f64)?;
        }
    }
    Ok(total / idx.len() as f64)
}

impl EncoderDecoderModel {
    /// Mean infer-mode composite loss over every snippet of `snippets`.
    pub fn evaluate_loss<S: SnippetSource + ?Sized>(&self, snippets: &S, batch_size: usize) -> Result<f64> {
        if snippets.is_empty() {
            return Err(Error::InvalidArgument("no snippets to evaluate".into()));
        }
        let idx: Vec<usize> = (0..snippets.len()).collect();
        mean_loss(self, snippets, &idx, batch_size.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (t, v) = split_train_val(100, 0.2, 3);
        assert_eq!((t.len(), v.len()), (80, 20));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_train_val(100, 0.2, 3), (t, v.clone()));
        assert_ne!(split_train_val(100, 0.2, 4).1, v);
        assert_eq!(split_train_val(10, 0.0, 0).1.len(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut c = TrainConfig {
            epochs: 11,
            learning_rate: 1e-2,
            final_lr_fraction: Some(0.1),
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(0), 1e-2);
        assert!((c.learning_rate_at(5) - 5.5e-3).abs() < 1e-8);
        assert!((c.learning_rate_at(10) - 1e-3).abs() < 1e-9);
        assert!((1..11).all(|e| c.learning_rate_at(e) < c.learning_rate_at(e - 1)));
        c.final_lr_fraction = None;
        assert_eq!(c.learning_rate_at(7), 1e-2);
        c.final_lr_fraction = Some(0.0);
        assert!(c.validate().is_err());
    }
}
