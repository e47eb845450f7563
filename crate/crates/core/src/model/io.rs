use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_layout, ArchitectureConfig, EncoderDecoderModel, TrainingMeta};
use crate::checksum::sha256_hex;
use crate::pipeline::NormalizationSpec;
use crate::tensor::{BatchNormState, ParamStore, Tensor};
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
    }
}

/// `model.json`: architecture, training record and the ordered tensor list
/// stored in `weights.bin` (little-endian f32, parameters first, then each
/// batchnorm layer's running mean and variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub architecture: ArchitectureConfig,
    pub normalization: Option<NormalizationSpec>,
    pub training: TrainingMeta,
    pub tensors: Vec<TensorEntry>,
    pub weights_sha256: String,
}

impl ModelManifest {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let m: ModelManifest = serde_json::from_slice(bytes)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: m.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        m.architecture.validate()?;
        Ok(m)
    }

    /// Byte length of `weights.bin`; `None` on overflow.
    fn expected_bytes(&self) -> Option<usize> {
        self.tensors
            .iter()
            .try_fold(0usize, |acc, t| acc.checked_add(t.numel()?.checked_mul(4)?))
    }

    fn check_weight_len(&self, len: usize, what: &str) -> Result<()> {
        let listed = self.expected_bytes();
        let built = self.architecture.stored_values().and_then(|v| v.checked_mul(4));
        if listed != Some(len) || built != Some(len) {
            return Err(Error::Shape(format!(
                "{what} holds {len} bytes, manifest lists {listed:?}, architecture needs {built:?}"
            )));
        }
        Ok(())
    }
}

fn tensor_list(params: &ParamStore, bn: &[BatchNormState]) -> Vec<TensorEntry> {
    let mut out: Vec<TensorEntry> = params
        .iter()
        .map(|(_, p)| TensorEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
        })
        .collect();
    for (i, s) in bn.iter().enumerate() {
        for stat in ["running_mean", "running_var"] {
            out.push(TensorEntry {
                name: format!("bn{i}.{stat}"),
                shape: vec![s.channels()],
            });
        }
    }
    out
}

/// Writes `model.json` and `weights.bin` into `dir`, creating it if needed.
pub fn save_model(model: &EncoderDecoderModel, normalization: Option<&NormalizationSpec>, dir: &Path) -> Result<()> {
    if model.bn.iter().any(|s| !s.initialized) {
        return Err(Error::InvalidArgument("model has not been trained: batchnorm statistics missing".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(4 * model.params.numel());
    for (_, p) in model.params.iter() {
        bytes.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    for s in &model.bn {
        bytes.extend(s.mean.iter().chain(&s.var).flat_map(|v| v.to_le_bytes()));
    }
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        architecture: model.config.clone(),
        normalization: normalization.cloned(),
        training: model.meta.clone(),
        tensors: tensor_list(&model.params, &model.bn),
        weights_sha256: sha256_hex(&bytes),
    };
    let wpath = dir.join(MODEL_WEIGHTS);
    fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let mpath = dir.join(MODEL_MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Rebuilds a model from a manifest and raw weight bytes.
pub fn decode_model(manifest: &ModelManifest, bytes: &[u8]) -> Result<EncoderDecoderModel> {
    manifest.check_weight_len(bytes.len(), "weights")?;
    let mut params = ParamStore::new();
    let (layout, bn) = build_layout::<f32>(&manifest.architecture, &mut params, None);
    let expected = tensor_list(&params, &bn);
    if expected != manifest.tensors {
        let diff = expected
            .iter()
            .zip(&manifest.tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), manifest.tensors.len()));
        return Err(Error::Shape(format!("manifest does not match architecture: {diff}")));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
    for p in params.iter_mut() {
        let shape = p.shape().to_vec();
        let data = take(shape.iter().product());
        p.value = Tensor::new(shape, data).map_err(|_| Error::NonFinite("model weights"))?;
    }
    let mut states = Vec::with_capacity(bn.len());
    for s in &bn {
        let c = s.channels();
        let (mean, var) = (take(c), take(c));
        let mut state = BatchNormState::with_stats(mean, var)?;
        state.momentum = manifest.architecture.bn_momentum;
        states.push(state);
    }
    Ok(EncoderDecoderModel {
        config: manifest.architecture.clone(),
        layout,
        params,
        bn: states,
        meta: manifest.training.clone(),
    })
}

/// Loads a saved model, verifying the weights checksum and every tensor
/// shape. Returns the model and the normalization it was trained with.
pub fn load_model(dir: &Path) -> Result<(EncoderDecoderModel, Option<NormalizationSpec>)> {
    let mpath = dir.join(MODEL_MANIFEST);
    if !mpath.exists() {
        return Err(Error::NotFound(format!("model manifest {}", mpath.display())));
    }
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = ModelManifest::from_json_slice(&raw)?;
    let wpath = dir.join(MODEL_WEIGHTS);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    manifest.check_weight_len(bytes.len(), &wpath.display().to_string())?;
    if sha256_hex(&bytes) != manifest.weights_sha256 {
        return Err(Error::Checksum(wpath));
    }
    let model = decode_model(&manifest, &bytes)?;
    Ok((model, manifest.normalization))
}
