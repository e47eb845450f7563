use std::path::Path;

use serde::{Deserialize, Serialize};
use sintermon::model::{ArchitectureConfig, TrainConfig};
use sintermon::pipeline::AugmentConfig;
use sintermon::scoring::DetectionConfig;
use sintermon::synth::ProcessParams;
use sintermon::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub process: ProcessParams,
    pub train_layers: usize,
    /// Percentage points below nominal power, one test layer each.
    pub deviations: Vec<f64>,
    /// Fault events per test layer, evenly spaced, durations cycling 1..=4.
    pub fault_events: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            process: ProcessParams::default(),
            train_layers: 5,
            deviations: vec![13.0, 11.0, 9.0, 5.0, 3.0],
            fault_events: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Halve frame height and width by 2×2 averaging before modelling.
    pub downsample: bool,
    pub augment: Option<AugmentConfig>,
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            downsample: true,
            augment: Some(AugmentConfig::default()),
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputLayout {
    pub dataset: String,
    pub model: String,
    pub scores: String,
    pub reports: String,
    pub summary: String,
}

impl Default for OutputLayout {
    fn default() -> Self {
        OutputLayout {
            dataset: "dataset".into(),
            model: "model".into(),
            scores: "scores".into(),
            reports: "reports".into(),
            summary: "summary".into(),
        }
    }
}

/// Whole experiment in one JSON document. `Default` is the full-scale
/// profile: p = q = 3, λ = 1, 500 epochs, detrend window 20, 20% validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub pipeline: PipelineConfig,
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub detection: DetectionConfig,
    pub outputs: OutputLayout,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            pipeline: PipelineConfig::default(),
            architecture: ArchitectureConfig::default(),
            training: TrainConfig::default(),
            detection: DetectionConfig::default(),
            outputs: OutputLayout::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_slice(bytes)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("config {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_json_slice(&bytes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Propagates the experiment seed into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn process(&self) -> ProcessParams {
        ProcessParams {
            seed: self.seed,
            ..self.dataset.process.clone()
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            augment: self.pipeline.augment.clone(),
            ..self.training.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let p = &d.process;
        p.validate(self.architecture.p + self.architecture.q)?;
        if d.train_layers == 0 {
            return Err(Error::InvalidArgument("at least one training layer is required".into()));
        }
        self.architecture.validate()?;
        self.training.validate()?;
        self.detection.validate()?;
        self.detection
            .metric
            .validate(self.architecture.height, self.architecture.width)?;
        let factor = if self.pipeline.downsample { 2 } else { 1 };
        if p.frame_height != self.architecture.height * factor || p.frame_width != self.architecture.width * factor {
            return Err(Error::InvalidArgument(format!(
                "frames of {}x{} {} do not give the model's {}x{} input",
                p.frame_height,
                p.frame_width,
                if self.pipeline.downsample { "downsampled" } else { "as-is" },
                self.architecture.height,
                self.architecture.width
            )));
        }
        if self.pipeline.batch_size == 0 {
            return Err(Error::InvalidArgument("pipeline batch_size must be positive".into()));
        }
        let o = &self.outputs;
        let names = [&o.dataset, &o.model, &o.scores, &o.reports, &o.summary];
        for (i, a) in names.iter().enumerate() {
            if a.is_empty() || a.contains("..") || Path::new(a.as_str()).is_absolute() {
                return Err(Error::InvalidArgument(format!("output name {a:?} must be a plain relative path")));
            }
            if names[i + 1..].contains(a) {
                return Err(Error::InvalidArgument(format!("output name {a:?} used twice")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json_slice(c.to_json().unwrap().as_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!((c.architecture.p, c.architecture.q), (3, 3));
        assert_eq!(c.architecture.lambda, 1.0);
        assert_eq!(c.training.epochs, 500);
        assert_eq!(c.detection.detrend_window, 20);
        assert_eq!(c.training.val_fraction, 0.2);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_json_slice(br#"{"seed": 9, "training": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.batch_size, 32);
        assert!(ExperimentConfig::from_json_slice(br#"{"sed": 9}"#).is_err());
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut c = ExperimentConfig::default();
        c.dataset.process.frame_height = 48;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.outputs.model = "dataset".into();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.outputs.scores = "../x".into();
        assert!(c.validate().is_err());
    }
}
