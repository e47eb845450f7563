//! Composite reconstruction + prediction encoder-decoder.
//!
//! Four down-sampling groups (conv 3×3 + ReLU, max-pool 2×2, batchnorm,
//! dropout) halve the spatial size and double the channel count; two fully
//! connected layers form the bottleneck; four mirrored up-sampling groups
//! restore the frame size while halving channels; a final linear 3×3 conv
//! emits `p + q` frames. The first `p` output frames reconstruct the input
//! lines, the last `q` predict the following lines.

mod io;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::Snippet;
use crate::tensor::{BatchNormState, Mode, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub use io::{decode_model, load_model, save_model, ModelManifest, TensorEntry, MODEL_FORMAT_VERSION, MODEL_MANIFEST, MODEL_WEIGHTS};
pub use train::{split_train_val, train, train_with_progress, EpochLoss, TrainConfig, TrainingMeta};

pub const GROUPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub p: usize,
    pub q: usize,
    pub height: usize,
    pub width: usize,
    /// Channels after the first down-sampling group; doubles per group.
    pub base_width: usize,
    /// Convolutions per group (1 or 2).
    pub convs_per_group: usize,
    pub latent_width: usize,
    /// Dropout rate per group: four encoder groups then four decoder groups.
    pub dropout: Vec<f32>,
    /// Weight of the regression term in the composite loss.
    pub lambda: f32,
    /// Batchnorm running statistics keep this fraction per training batch.
    pub bn_momentum: f32,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            p: 3,
            q: 3,
            height: 32,
            width: 32,
            base_width: 16,
            convs_per_group: 1,
            latent_width: 128,
            dropout: vec![0.1; 2 * GROUPS],
            lambda: 1.0,
            bn_momentum: 0.9,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1 << GROUPS;
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame size {}x{} must be a positive multiple of {div}",
                self.height, self.width
            )));
        }
        if self.p == 0 {
            return Err(Error::InvalidArgument("p must be at least 1".into()));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 || self.latent_width == 0 {
            return Err(Error::InvalidArgument("base_width must be even and >= 2; latent_width positive".into()));
        }
        if !(1..=2).contains(&self.convs_per_group) {
            return Err(Error::InvalidArgument("convs_per_group must be 1 or 2".into()));
        }
        if self.dropout.len() != 2 * GROUPS || self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::InvalidArgument(format!(
                "need {} dropout rates in [0, 1)",
                2 * GROUPS
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("bn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.p + self.q
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    /// Values stored for this architecture: every parameter plus running
    /// mean and variance per batchnorm channel. `None` on overflow.
    pub fn stored_values(&self) -> Option<usize> {
        let conv = |c_in: usize, c_out: usize| c_in.checked_mul(9)?.checked_add(1)?.checked_mul(c_out);
        let group = |c_in: usize, c_out: usize| -> Option<usize> {
            let mut n = conv(c_in, c_out)?;
            for _ in 1..self.convs_per_group {
                n = n.checked_add(conv(c_out, c_out)?)?;
            }
            // bn scale, shift, running mean, running variance
            n.checked_add(c_out.checked_mul(4)?)
        };
        let width = |g: usize| self.base_width.checked_mul(1usize.checked_shl(g as u32)?);
        let mut total = 0usize;
        for g in 0..GROUPS {
            let c_in = if g == 0 { self.p } else { width(g - 1)? };
            total = total.checked_add(group(c_in, width(g)?)?)?;
        }
        let flat = width(GROUPS - 1)?.checked_mul(self.height >> GROUPS)?.checked_mul(self.width >> GROUPS)?;
        let dense = |f_in: usize, f_out: usize| f_in.checked_add(1)?.checked_mul(f_out);
        total = total.checked_add(dense(flat, self.latent_width)?)?;
        total = total.checked_add(dense(self.latent_width, flat)?)?;
        for d in 0..GROUPS {
            let c_in = width(GROUPS - 1 - d)?;
            total = total.checked_add(group(c_in, c_in / 2)?)?;
        }
        total.checked_add(conv(self.base_width / 2, self.p.checked_add(self.q)?)?)
    }

    fn encoder_width(&self, g: usize) -> usize {
        self.base_width << g
    }

    fn bottleneck_shape(&self) -> [usize; 3] {
        [
            self.encoder_width(GROUPS - 1),
            self.height >> GROUPS,
            self.width >> GROUPS,
        ]
    }

    /// Per-channel loss weights: `1 + λ` on reconstructed frames (counted in
    /// both terms), `λ` on predicted frames.
    pub fn channel_weights(&self) -> Vec<f32> {
        (0..self.output_channels())
            .map(|c| if c < self.p { 1.0 + self.lambda } else { self.lambda })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ConvIds {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct GroupIds {
    convs: Vec<ConvIds>,
    bn_scale: ParamId,
    bn_shift: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<GroupIds>,
    fc1: ConvIds,
    fc2: ConvIds,
    decoder: Vec<GroupIds>,
    output: ConvIds,
}

/// Creates every parameter in a fixed order. `init` draws He-uniform
/// weights; with `None` everything starts at zero (used when loading).
fn build_layout<T: Real>(
    config: &ArchitectureConfig,
    store: &mut ParamStore<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Layout, Vec<BatchNormState>) {
    let he = |shape: &[usize], fan_in: usize, rng: &mut Option<&mut ChaCha8Rng>| -> Tensor<T> {
        let limit = (6.0 / fan_in as f64).sqrt();
        match rng {
            Some(r) => Tensor::from_fn(shape, |_| T::from_f64(r.gen_range(-limit..limit))),
            None => Tensor::zeros(shape),
        }
    };
    let conv = |name: String, c_in: usize, c_out: usize, store: &mut ParamStore<T>, rng: &mut Option<&mut ChaCha8Rng>| {
        let kernel = store.add(format!("{name}.kernel"), he(&[c_out, c_in, 3, 3], c_in * 9, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        ConvIds { kernel, bias }
    };
    let mut bn_states = Vec::new();
    let group = |prefix: String,
                     c_in: usize,
                     c_out: usize,
                     store: &mut ParamStore<T>,
                     rng: &mut Option<&mut ChaCha8Rng>,
                     bn_states: &mut Vec<BatchNormState>| {
        let convs = (0..config.convs_per_group)
            .map(|k| conv(format!("{prefix}.conv{k}"), if k == 0 { c_in } else { c_out }, c_out, store, rng))
            .collect();
        let bn_scale = store.add(format!("{prefix}.bn.scale"), Tensor::full(&[c_out], T::one()));
        let bn_shift = store.add(format!("{prefix}.bn.shift"), Tensor::zeros(&[c_out]));
        let mut state = BatchNormState::new(c_out);
        state.momentum = config.bn_momentum;
        bn_states.push(state);
        GroupIds {
            convs,
            bn_scale,
            bn_shift,
        }
    };

    let mut encoder = Vec::new();
    for g in 0..GROUPS {
        let c_in = if g == 0 { config.p } else { config.encoder_width(g - 1) };
        encoder.push(group(format!("enc{g}"), c_in, config.encoder_width(g), store, &mut rng, &mut bn_states));
    }
    let flat: usize = config.bottleneck_shape().iter().product();
    let dense = |name: &str, f_in: usize, f_out: usize, store: &mut ParamStore<T>, rng: &mut Option<&mut ChaCha8Rng>| {
        let kernel = store.add(format!("{name}.weight"), he(&[f_out, f_in], f_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[f_out]));
        ConvIds { kernel, bias }
    };
    let fc1 = dense("fc1", flat, config.latent_width, store, &mut rng);
    let fc2 = dense("fc2", config.latent_width, flat, store, &mut rng);
    let mut decoder = Vec::new();
    for d in 0..GROUPS {
        let c_in = config.encoder_width(GROUPS - 1 - d);
        decoder.push(group(format!("dec{d}"), c_in, c_in / 2, store, &mut rng, &mut bn_states));
    }
    let output = conv("out".into(), config.base_width / 2, config.output_channels(), store, &mut rng);
    (
        Layout {
            encoder,
            fc1,
            fc2,
            decoder,
            output,
        },
        bn_states,
    )
}

/// Batchnorm statistics access: mutable while training, shared otherwise.
enum BnAccess<'a> {
    Train(&'a mut [BatchNormState]),
    Infer(&'a [BatchNormState]),
}

struct Outputs {
    output: Var,
    latent: Var,
}

#[allow(clippy::too_many_arguments)]
fn forward<T: Real, R: Rng + ?Sized>(
    config: &ArchitectureConfig,
    layout: &Layout,
    store: &ParamStore<T>,
    mut bn: BnAccess<'_>,
    tape: &mut Tape<T>,
    input: Var,
    rng: &mut R,
) -> Result<Outputs> {
    let mode = match bn {
        BnAccess::Train(_) => Mode::Train,
        BnAccess::Infer(_) => Mode::Infer,
    };
    let group = |tape: &mut Tape<T>, mut x: Var, ids: &GroupIds, idx: usize, up: bool, bn: &mut BnAccess<'_>, rng: &mut R| -> Result<Var> {
        for c in &ids.convs {
            let (k, b) = (tape.param(store, c.kernel), tape.param(store, c.bias));
            x = tape.conv2d(x, k, b)?;
            x = tape.relu(x)?;
        }
        x = if up { tape.upsample2d(x)? } else { tape.maxpool2d(x)? };
        let (s, sh) = (tape.param(store, ids.bn_scale), tape.param(store, ids.bn_shift));
        x = match bn {
            BnAccess::Train(states) => tape.batchnorm_train(x, s, sh, &mut states[idx])?,
            BnAccess::Infer(states) => tape.batchnorm_infer(x, s, sh, &states[idx])?,
        };
        tape.dropout(x, config.dropout[idx], mode, rng)
    };

    let n = tape.value(input).shape()[0];
    let mut x = input;
    for (g, ids) in layout.encoder.iter().enumerate() {
        x = group(tape, x, ids, g, false, &mut bn, rng)?;
    }
    let [c, h, w] = config.bottleneck_shape();
    x = tape.reshape(x, &[n, c * h * w])?;
    let (k, b) = (tape.param(store, layout.fc1.kernel), tape.param(store, layout.fc1.bias));
    x = tape.dense(x, k, b)?;
    let latent = tape.relu(x)?;
    let (k, b) = (tape.param(store, layout.fc2.kernel), tape.param(store, layout.fc2.bias));
    x = tape.dense(latent, k, b)?;
    x = tape.relu(x)?;
    x = tape.reshape(x, &[n, c, h, w])?;
    for (d, ids) in layout.decoder.iter().enumerate() {
        x = group(tape, x, ids, GROUPS + d, true, &mut bn, rng)?;
    }
    let (k, b) = (tape.param(store, layout.output.kernel), tape.param(store, layout.output.bias));
    let output = tape.conv2d(x, k, b)?;
    Ok(Outputs { output, latent })
}

/// Composite objective for one snippet: squared Frobenius errors summed over
/// the first `p` frames, plus `λ` times the same over all `p + q` frames.
pub fn composite_loss(target: &[f32], prediction: &[f32], p: usize, q: usize, frame_len: usize, lambda: f64) -> Result<f64> {
    let len = (p + q) * frame_len;
    if target.len() != len || prediction.len() != len {
        return Err(Error::Shape(format!(
            "composite loss needs {len} values per snippet, got target {} and prediction {}",
            target.len(),
            prediction.len()
        )));
    }
    let per_frame: Vec<f64> = target
        .chunks(frame_len)
        .zip(prediction.chunks(frame_len))
        .map(|(a, b)| crate::tensor::frobenius_distance(a, b).powi(2))
        .collect();
    let rec: f64 = per_frame[..p].iter().sum();
    let reg: f64 = per_frame.iter().sum();
    Ok(rec + lambda * reg)
}

/// Trained (or freshly built) network plus its running statistics.
#[derive(Clone, Debug)]
pub struct EncoderDecoderModel {
    config: ArchitectureConfig,
    layout: Layout,
    params: ParamStore<f32>,
    bn: Vec<BatchNormState>,
    pub meta: TrainingMeta,
}

/// `[N, C, H, W]` tensor from snippet frames.
pub fn batch_tensor<'a>(frames: impl IntoIterator<Item = &'a [f32]>, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for f in frames {
        if f.len() != channels * h * w {
            return Err(Error::Shape(format!(
                "sample has {} values, expected {channels}x{h}x{w}",
                f.len()
            )));
        }
        data.extend_from_slice(f);
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Tensor::new(vec![n, channels, h, w], data)
}

impl EncoderDecoderModel {
    pub fn build(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (layout, bn) = build_layout(&config, &mut params, Some(&mut rng));
        Ok(EncoderDecoderModel {
            config,
            layout,
            params,
            bn,
            meta: TrainingMeta::default(),
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn batchnorm_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    fn check_input<T: Real>(&self, input: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        match input.shape() {
            [_, p, h, w] if *p == c.p && *h == c.height && *w == c.width => Ok(()),
            s => Err(Error::Shape(format!(
                "model input must be [N, {}, {}, {}], got {s:?}",
                c.p, c.height, c.width
            ))),
        }
    }

    /// Infer-mode forward pass: `[N, p, H, W] → [N, p + q, H, W]`.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.infer(input)?.0)
    }

    /// Bottleneck activations `[N, latent_width]`.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.infer(input)?.1)
    }

    fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        // infer mode draws nothing from the generator
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = forward(
            &self.config,
            &self.layout,
            &self.params,
            BnAccess::Infer(&self.bn),
            &mut tape,
            x,
            &mut rng,
        )?;
        Ok((tape.value(out.output).clone(), tape.value(out.latent).clone()))
    }

    /// Predicts every snippet's `p + q` frames, `batch_size` at a time.
    pub fn predict_snippets(&self, snippets: &[Snippet], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let c = &self.config;
        let mut out = Vec::with_capacity(snippets.len());
        for chunk in snippets.chunks(batch_size.max(1)) {
            let x = batch_tensor(chunk.iter().map(|s| s.input()), c.p, c.height, c.width)?;
            let y = self.predict(&x)?;
            let per = c.output_channels() * c.frame_len();
            out.extend(y.data().chunks(per).map(|s| s.to_vec()));
        }
        Ok(out)
    }

    /// Replaces the batchnorm running statistics with the exact statistics of
    /// `input`, run as one batch with dropout off under the current weights.
    pub fn recalibrate_batchnorm(&mut self, input: &Tensor) -> Result<()> {
        self.check_input(input)?;
        let config = ArchitectureConfig {
            dropout: vec![0.0; 2 * GROUPS],
            ..self.config.clone()
        };
        let mut fresh: Vec<BatchNormState> = self
            .bn
            .iter()
            .map(|s| BatchNormState {
                initialized: false,
                ..s.clone()
            })
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        forward(&config, &self.layout, &self.params, BnAccess::Train(&mut fresh), &mut tape, x, &mut rng)?;
        self.bn = fresh;
        Ok(())
    }

    /// Mean composite loss of a batch evaluated with an arbitrary-precision
    /// copy of the weights. Train mode uses batch statistics and a dropout
    /// mask drawn from `dropout_seed`; the model's running statistics are not
    /// touched. When `backward` is set, gradients accumulate into `store`.
    pub fn batch_loss<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        input: &Tensor<T>,
        target: &Tensor<T>,
        mode: Mode,
        dropout_seed: u64,
        backward: bool,
    ) -> Result<f64> {
        Ok(self.evaluate(store, input, target, mode, dropout_seed, backward)?.0)
    }

    /// Like [`batch_loss`](Self::batch_loss) without backward, also returning
    /// the tape's [`kink_signature`](Tape::kink_signature).
    pub fn loss_with_signature<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        input: &Tensor<T>,
        target: &Tensor<T>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(f64, u64)> {
        self.evaluate(store, input, target, mode, dropout_seed, false)
    }

    fn evaluate<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        input: &Tensor<T>,
        target: &Tensor<T>,
        mode: Mode,
        dropout_seed: u64,
        backward: bool,
    ) -> Result<(f64, u64)> {
        self.check_input(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut scratch = self.bn.clone();
        let access = match mode {
            Mode::Train => BnAccess::Train(&mut scratch),
            Mode::Infer => BnAccess::Infer(&self.bn),
        };
        let out = forward(&self.config, &self.layout, store, access, &mut tape, x, &mut rng)?;
        let loss = self.loss_node(&mut tape, out.output, target)?;
        let value = tape.value(loss).data()[0].as_f64();
        let signature = tape.kink_signature();
        if backward {
            tape.backward(loss, store)?;
        }
        Ok((value, signature))
    }

    fn loss_node<T: Real>(&self, tape: &mut Tape<T>, output: Var, target: &Tensor<T>) -> Result<Var> {
        let n = target.shape()[0];
        let weights: Vec<T> = self
            .config
            .channel_weights()
            .iter()
            .map(|&w| T::from_f64(w as f64))
            .collect();
        tape.weighted_sq_error(output, target, &weights, T::from_f64(1.0 / n as f64))
    }
}
