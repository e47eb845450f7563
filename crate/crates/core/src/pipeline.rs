//! Preprocessing: min/max normalization, 2×2 block downsampling, sliding
//! window snippets across scan lines, and training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::synth::LayerSequence;
use crate::{Error, Result};

/// Min/max of the training data; maps it onto a range of width one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub data_min: f32,
    pub data_max: f32,
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_min.is_finite() && self.data_max.is_finite() && self.data_max > self.data_min) {
            return Err(Error::InvalidArgument(format!(
                "normalization range [{}, {}] must be finite with max > min",
                self.data_min, self.data_max
            )));
        }
        Ok(())
    }

    /// Width of the raw range in °C.
    pub fn scale(&self) -> f32 {
        self.data_max - self.data_min
    }

    pub fn apply(&self, celsius: f32) -> f32 {
        (celsius - self.data_min) / self.scale()
    }

    /// Converts a temperature difference (°C) into normalized units.
    pub fn delta(&self, celsius: f32) -> f32 {
        celsius / self.scale()
    }
}

pub fn fit_normalization<'a>(train_layers: impl IntoIterator<Item = &'a LayerSequence>) -> Result<NormalizationSpec> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for layer in train_layers {
        for &v in &layer.frames {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("no training data to normalize".into()));
    }
    if hi <= lo {
        return Err(Error::InvalidArgument(format!(
            "training data is constant ({lo}); normalization range is zero"
        )));
    }
    Ok(NormalizationSpec {
        data_min: lo,
        data_max: hi,
    })
}

/// Values outside the training range map outside [0, 1]; that is allowed.
pub fn apply_normalization(layer: &LayerSequence, spec: &NormalizationSpec) -> LayerSequence {
    let mut out = layer.clone();
    normalize_in_place(&mut out, spec);
    out
}

pub fn normalize_in_place(layer: &mut LayerSequence, spec: &NormalizationSpec) {
    let (min, inv) = (spec.data_min, 1.0 / spec.scale());
    for v in &mut layer.frames {
        *v = (*v - min) * inv;
    }
}

/// Averages each 2×2 block of a row-major `h × w` frame.
pub fn downsample(frame: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("downsampling needs even dimensions, got {h}x{w}")));
    }
    if frame.len() != h * w {
        return Err(Error::Shape(format!("frame has {} pixels, expected {}", frame.len(), h * w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let r0 = &frame[2 * y * w..][..w];
        let r1 = &frame[(2 * y + 1) * w..][..w];
        for x in 0..ow {
            out.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
        }
    }
    Ok(out)
}

pub fn downsample_layer(layer: &LayerSequence) -> Result<LayerSequence> {
    let (h, w) = (layer.height, layer.width);
    let mut frames = Vec::with_capacity(layer.frames.len() / 4);
    for f in layer.frames.chunks(h * w) {
        frames.extend(downsample(f, h, w)?);
    }
    Ok(LayerSequence {
        layer_id: layer.layer_id,
        column_id: layer.column_id,
        lines: layer.lines,
        frames_per_line: layer.frames_per_line,
        height: h / 2,
        width: w / 2,
        frames,
        labels: layer.labels.clone(),
    })
}

/// Applies normalization and then downsampling (the two commute).
pub fn prepare_layer(layer: &LayerSequence, spec: &NormalizationSpec, downsample_factor_two: bool) -> Result<LayerSequence> {
    let mut out = if downsample_factor_two {
        downsample_layer(layer)?
    } else {
        layer.clone()
    };
    normalize_in_place(&mut out, spec);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnippetOrigin {
    pub layer_id: u32,
    pub start_line: usize,
    pub frame_index: usize,
}

/// `p + q` frames at a fixed frame index over consecutive lines. The model
/// input is the first `p` frames of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub index: usize,
    pub origin: SnippetOrigin,
    pub p: usize,
    pub q: usize,
    pub height: usize,
    pub width: usize,
    target: Vec<f32>,
}

impl Snippet {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn input(&self) -> &[f32] {
        &self.target[..self.p * self.frame_len()]
    }

    pub fn target(&self) -> &[f32] {
        &self.target
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        &self.target[k * self.frame_len()..][..self.frame_len()]
    }

    pub(crate) fn target_mut(&mut self) -> &mut [f32] {
        &mut self.target
    }
}

/// Snippet windows in order: frame index outer, start line inner.
pub fn snippet_origins(layer_id: u32, lines: usize, frames_per_line: usize, p: usize, q: usize) -> Result<Vec<SnippetOrigin>> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    if lines < p + q {
        return Err(Error::InvalidArgument(format!(
            "layer has {lines} lines, snippets need at least p + q = {}",
            p + q
        )));
    }
    let starts = lines - (p + q) + 1;
    let mut out = Vec::with_capacity(frames_per_line * starts);
    for frame_index in 0..frames_per_line {
        for start_line in 0..starts {
            out.push(SnippetOrigin {
                layer_id,
                start_line,
                frame_index,
            });
        }
    }
    Ok(out)
}

/// Copies the `p + q` frames of one window into `out`.
pub fn gather_snippet(layer: &LayerSequence, origin: &SnippetOrigin, len: usize, out: &mut Vec<f32>) {
    for k in 0..len {
        out.extend_from_slice(layer.frame(origin.start_line + k, origin.frame_index));
    }
}

pub fn make_snippets(layer: &LayerSequence, p: usize, q: usize) -> Result<Vec<Snippet>> {
    let origins = snippet_origins(layer.layer_id, layer.lines, layer.frames_per_line, p, q)?;
    Ok(origins
        .into_iter()
        .enumerate()
        .map(|(index, origin)| {
            let mut target = Vec::with_capacity((p + q) * layer.frame_len());
            gather_snippet(layer, &origin, p + q, &mut target);
            Snippet {
                index,
                origin,
                p,
                q,
                height: layer.height,
                width: layer.width,
                target,
            }
        })
        .collect())
}

/// Indexed collection of snippets whose frames can be copied on demand.
pub trait SnippetSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(p, q, height, width)` shared by every snippet.
    fn geometry(&self) -> (usize, usize, usize, usize);

    /// Appends the `p + q` frames of snippet `i` to `out`.
    fn gather(&self, i: usize, out: &mut Vec<f32>);
}

impl SnippetSource for [Snippet] {
    fn len(&self) -> usize {
        <[Snippet]>::len(self)
    }

    fn geometry(&self) -> (usize, usize, usize, usize) {
        self.first().map_or((0, 0, 0, 0), |s| (s.p, s.q, s.height, s.width))
    }

    fn gather(&self, i: usize, out: &mut Vec<f32>) {
        out.extend_from_slice(self[i].target());
    }
}

impl SnippetSource for Vec<Snippet> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn geometry(&self) -> (usize, usize, usize, usize) {
        self.as_slice().geometry()
    }

    fn gather(&self, i: usize, out: &mut Vec<f32>) {
        self.as_slice().gather(i, out)
    }
}

/// Every snippet window of a set of prepared layers, gathered lazily.
pub struct LayerWindows<'a> {
    layers: &'a [LayerSequence],
    windows: Vec<(usize, SnippetOrigin)>,
    p: usize,
    q: usize,
}

impl<'a> LayerWindows<'a> {
    pub fn new(layers: &'a [LayerSequence], p: usize, q: usize) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("no layers to take snippets from".into()))?;
        let mut windows = Vec::new();
        for (k, l) in layers.iter().enumerate() {
            if (l.height, l.width) != (first.height, first.width) {
                return Err(Error::Shape(format!(
                    "layer {} frames are {}x{}, layer {} frames are {}x{}",
                    l.layer_id, l.height, l.width, first.layer_id, first.height, first.width
                )));
            }
            for o in snippet_origins(l.layer_id, l.lines, l.frames_per_line, p, q)? {
                windows.push((k, o));
            }
        }
        Ok(LayerWindows { layers, windows, p, q })
    }

    pub fn origin(&self, i: usize) -> SnippetOrigin {
        self.windows[i].1
    }
}

impl SnippetSource for LayerWindows<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn geometry(&self) -> (usize, usize, usize, usize) {
        let l = &self.layers[0];
        (self.p, self.q, l.height, l.width)
    }

    fn gather(&self, i: usize, out: &mut Vec<f32>) {
        let (k, o) = &self.windows[i];
        gather_snippet(&self.layers[*k], o, self.p + self.q, out);
    }
}

/// Augmentation amounts in °C; converted to normalized units through the
/// normalization scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma_c: f32,
    pub bias_range_c: f32,
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma_c: 0.01,
            bias_range_c: 1.8,
            copies: 1,
        }
    }
}

/// Adds i.i.d. Gaussian noise to every pixel and one uniform constant bias
/// to the whole snippet. Amounts are in normalized units.
pub fn perturb_snippet<R: Rng + ?Sized>(snippet: &mut Snippet, noise_sigma: f32, bias: f32, rng: &mut R) {
    perturb_values(snippet.target_mut(), noise_sigma, bias, rng);
}

/// Adds `bias` and i.i.d. Gaussian noise of standard deviation `noise_sigma`.
pub fn perturb_values<R: Rng + ?Sized>(values: &mut [f32], noise_sigma: f32, bias: f32, rng: &mut R) {
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0f32, noise_sigma).expect("positive sigma"));
    for v in values {
        *v += bias;
        if let Some(n) = &noise {
            *v += n.sample(rng);
        }
    }
}

/// Returns the originals followed by `copies` perturbed copies of each.
pub fn augment<R: Rng + ?Sized>(
    snippets: &[Snippet],
    config: &AugmentConfig,
    spec: &NormalizationSpec,
    rng: &mut R,
) -> Vec<Snippet> {
    let sigma = spec.delta(config.noise_sigma_c);
    let range = spec.delta(config.bias_range_c).abs();
    let mut out = snippets.to_vec();
    for _ in 0..config.copies {
        for s in snippets {
            let mut copy = s.clone();
            let bias = if range > 0.0 { rng.gen_range(-range..=range) } else { 0.0 };
            perturb_snippet(&mut copy, sigma, bias, rng);
            copy.index = out.len();
            out.push(copy);
        }
    }
    out
}
