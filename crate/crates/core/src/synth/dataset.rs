//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json     geometry, layer list, normalization, format_version
//! <dir>/layer_<id>.f32    little-endian f32, line-major, then frame, then row-major pixels
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate_layer, FaultPattern, FaultSchedule, LayerSequence, ProcessParams};
use crate::checksum::sha256_hex;
use crate::pipeline::NormalizationSpec;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: u32,
    pub role: LayerRole,
    /// Absolute power deviation in percentage points of maximum power.
    pub power_deviation: Option<f64>,
    pub fault_lines: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub m: usize,
    pub n: usize,
    pub lines_per_layer: usize,
    pub frames_per_line: usize,
    pub process: ProcessParams,
    pub layers: Vec<LayerEntry>,
    pub normalization: Option<NormalizationSpec>,
}

impl DatasetManifest {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if self.m == 0 || self.n == 0 || self.lines_per_layer == 0 || self.frames_per_line == 0 {
            return Err(Error::Format("manifest geometry must be positive".into()));
        }
        self.layer_len_bytes()?;
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.id) {
                return Err(Error::Format(format!("duplicate layer id {}", l.id)));
            }
            if l.file != layer_file_name(l.id) {
                return Err(Error::Format(format!("layer {} has unexpected file name {:?}", l.id, l.file)));
            }
            if let Some(&bad) = l.fault_lines.iter().find(|&&x| x >= self.lines_per_layer) {
                return Err(Error::Format(format!("layer {} fault line {bad} out of range", l.id)));
            }
        }
        if let Some(spec) = &self.normalization {
            spec.validate()?;
        }
        Ok(())
    }

    fn layer_len_bytes(&self) -> Result<usize> {
        self.lines_per_layer
            .checked_mul(self.frames_per_line)
            .and_then(|v| v.checked_mul(self.m))
            .and_then(|v| v.checked_mul(self.n))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("manifest geometry overflows".into()))
    }

    pub fn layer(&self, id: u32) -> Result<&LayerEntry> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::NotFound(format!("layer {id}")))
    }

    pub fn layers_with_role(&self, role: LayerRole) -> impl Iterator<Item = &LayerEntry> {
        self.layers.iter().filter(move |l| l.role == role)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn layer_file_name(id: u32) -> String {
    format!("layer_{id}.f32")
}

pub fn encode_layer_bytes(frames: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames.len() * 4);
    for v in frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a raw layer file of `expected_values` floats.
pub fn decode_layer_bytes(bytes: &[u8], expected_values: usize) -> Result<Vec<f32>> {
    if Some(bytes.len()) != expected_values.checked_mul(4) {
        return Err(Error::Shape(format!(
            "layer file holds {} bytes, geometry needs {}",
            bytes.len(),
            expected_values.saturating_mul(4)
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer file"));
    }
    Ok(values)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    DatasetManifest::from_json_slice(&bytes)
}

pub fn load_layer(dir: &Path, layer_id: u32) -> Result<LayerSequence> {
    let manifest = load_manifest(dir)?;
    load_layer_with(dir, &manifest, layer_id)
}

pub(crate) fn load_layer_with(dir: &Path, manifest: &DatasetManifest, layer_id: u32) -> Result<LayerSequence> {
    let entry = manifest.layer(layer_id)?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let count = manifest.lines_per_layer * manifest.frames_per_line * manifest.m * manifest.n;
    if bytes.len() != count * 4 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, manifest geometry needs {}",
            path.display(),
            bytes.len(),
            count * 4
        )));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Checksum(path));
    }
    let frames = decode_layer_bytes(&bytes, count)?;
    Ok(LayerSequence {
        layer_id,
        column_id: 0,
        lines: manifest.lines_per_layer,
        frames_per_line: manifest.frames_per_line,
        height: manifest.m,
        width: manifest.n,
        frames,
        labels: entry.fault_lines.iter().copied().collect(),
    })
}

impl DatasetManifest {
    pub fn load_layer(&self, dir: &Path, layer_id: u32) -> Result<LayerSequence> {
        load_layer_with(dir, self, layer_id)
    }
}

#[derive(Clone, Debug)]
pub struct DatasetRequest {
    pub params: ProcessParams,
    pub pattern: FaultPattern,
    pub train_layers: usize,
    /// One test layer per entry, in percentage points below nominal power.
    pub deviations: Vec<f64>,
    pub overwrite: bool,
}

fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            if !overwrite {
                return Err(Error::OutputExists(dir.to_path_buf()));
            }
            for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let path: PathBuf = entry.map_err(|e| Error::io(dir, e))?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name == MANIFEST || (name.starts_with("layer_") && name.ends_with(".f32")) {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `train_layers` nominal layers followed by one faulty layer per
/// requested deviation, plus the manifest.
pub fn generate_dataset(dir: &Path, req: &DatasetRequest) -> Result<DatasetManifest> {
    req.params.validate(1)?;
    for &d in &req.deviations {
        let power = req.params.nominal_power as f64 - d / 100.0;
        if !d.is_finite() || !(0.0..=1.0).contains(&power) {
            return Err(Error::InvalidArgument(format!(
                "deviation {d} gives off-nominal power {power} outside [0, 1]"
            )));
        }
    }
    prepare_output_dir(dir, req.overwrite)?;

    let mut layers = Vec::new();
    let plan = (0..req.train_layers)
        .map(|_| None)
        .chain(req.deviations.iter().map(|&d| Some(d)));
    for (id, deviation) in plan.enumerate() {
        let id = id as u32;
        let schedule = match deviation {
            None => FaultSchedule::default(),
            Some(d) => FaultSchedule {
                entries: req
                    .pattern
                    .schedule(id, (req.params.nominal_power as f64 - d / 100.0) as f32),
            },
        };
        let layer = generate_layer(&req.params, &schedule, id)?;
        let bytes = encode_layer_bytes(&layer.frames);
        let file = layer_file_name(id);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        layers.push(LayerEntry {
            id,
            role: if deviation.is_some() { LayerRole::Test } else { LayerRole::Train },
            power_deviation: deviation,
            fault_lines: layer.labels.iter().copied().collect(),
            file,
            sha256: sha256_hex(&bytes),
        });
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        m: req.params.frame_height,
        n: req.params.frame_width,
        lines_per_layer: req.params.lines_per_layer,
        frames_per_line: req.params.frames_per_line,
        process: req.params.clone(),
        layers,
        normalization: None,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
