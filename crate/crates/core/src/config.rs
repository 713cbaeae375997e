//! Experiment configuration: a TOML document with every section optional.
//!
//! ```toml
//! seed = 0
//! regimes = ["pfl-snn", "pfl-ann", "fl-snn", "fl-ann"]
//! output_dir = "runs/default"
//!
//! [train]
//! learning_rate = 0.01
//! rounds = 30
//!
//! [lif]
//! time_steps = 6
//!
//! [data]
//! source = "synthetic"
//! heterogeneity = 0.6
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, IngestConfig, SynthConfig};
use crate::diagnostics::EnvelopeConfig;
use crate::energy::{EnergyConstants, EnergyOptions};
use crate::error::{Error, Result};
use crate::federated::{Regime, TrainConfig};
use crate::model::{ArchitectureSpec, Backbone, LayerSpec};
use crate::spiking::LifConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regimes: Vec<Regime>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub lif: LifConfig,
    pub data: DataConfig,
    pub diagnostics: DiagnosticsConfig,
    pub energy: EnergyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regimes: Regime::ALL.to_vec(),
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig {
                rounds: 30,
                ..TrainConfig::default()
            },
            model: ModelConfig::default(),
            lif: LifConfig::default(),
            data: DataConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Layer stack; the default four-layer network when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: None,
            init_gain: ArchitectureSpec::new_default(1, 1, 2, Backbone::Snn).init_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SynthConfig),
    File(FileSource),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub path: PathBuf,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Per-client shuffle seed before splitting; omit to keep file order.
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_test_fraction() -> f64 {
    IngestConfig::default().test_fraction
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Drift cadence in rounds; 0 disables drift, envelope and constants.
    pub every: usize,
    /// Envelope cadence in rounds; 0 disables the envelope proxy.
    pub envelope_every: usize,
    /// Leading train samples per client used by the envelope solver.
    pub envelope_samples: usize,
    /// Leading fraction of drift reports used to calibrate `C_hat`.
    pub calibration_fraction: f64,
    pub envelope: EnvelopeConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            every: 5,
            envelope_every: 10,
            envelope_samples: 64,
            calibration_fraction: 0.5,
            envelope: EnvelopeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub e_mac: f64,
    pub e_ac: f64,
    pub first_layer_ac: bool,
    /// Externally reported firing rates priced alongside the measured ones.
    pub reference_rates: Vec<f64>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let c = EnergyConstants::default();
        Self {
            e_mac: c.e_mac,
            e_ac: c.e_ac,
            first_layer_ac: false,
            reference_rates: vec![0.106, 0.063, 0.058, 0.253],
        }
    }
}

impl EnergyConfig {
    pub fn constants(&self) -> EnergyConstants {
        EnergyConstants {
            e_mac: self.e_mac,
            e_ac: self.e_ac,
        }
    }

    pub fn options(&self) -> EnergyOptions {
        EnergyOptions {
            first_layer_ac: self.first_layer_ac,
        }
    }
}

/// Shape of the data a config will produce, known before any compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
}

pub const PRESETS: [&str; 2] = ["default", "smoke"];

impl ExperimentConfig {
    /// Two rounds of a small network on a small synthetic task.
    pub fn smoke() -> Self {
        Self {
            output_dir: PathBuf::from("runs/smoke"),
            train: TrainConfig {
                rounds: 2,
                batch_size: 16,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            model: ModelConfig {
                layers: Some(vec![
                    LayerSpec::Conv1d {
                        out_channels: 4,
                        kernel: 5,
                        stride: 2,
                    },
                    LayerSpec::Dense { width: 16 },
                    LayerSpec::Dense { width: 4 },
                ]),
                ..ModelConfig::default()
            },
            lif: LifConfig {
                time_steps: 4,
                ..LifConfig::default()
            },
            data: DataConfig::Synthetic(SynthConfig {
                train_per_client: 48,
                test_per_client: 16,
                channels: 4,
                length: 32,
                ..SynthConfig::default()
            }),
            diagnostics: DiagnosticsConfig {
                every: 1,
                envelope_every: 1,
                envelope_samples: 16,
                envelope: EnvelopeConfig {
                    prox_steps: 5,
                    ..EnvelopeConfig::default()
                },
                ..DiagnosticsConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "smoke" => Some(Self::smoke()),
            _ => None,
        }
    }

    /// Parses TOML text; errors name the offending line and key.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "document".into());
            Error::config(location, e.message().trim().to_string())
        })
    }

    /// Reads a config file, or a built-in preset when `spec` names one and
    /// no such file exists.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if let Some(cfg) = Self::preset(spec) {
                return Ok(cfg);
            }
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Argument(format!("cannot serialize config: {e}")))
    }

    pub fn data_shape(&self) -> Result<DataShape> {
        match &self.data {
            DataConfig::Synthetic(s) => Ok(DataShape {
                channels: s.channels,
                length: s.length,
                num_classes: s.num_classes,
            }),
            DataConfig::File(f) => {
                let c = data::read_container(&f.path)?;
                Ok(DataShape {
                    channels: c.channels,
                    length: c.length,
                    num_classes: c.num_classes,
                })
            }
        }
    }

    pub fn architecture(&self, shape: DataShape, backbone: Backbone) -> ArchitectureSpec {
        let mut spec = ArchitectureSpec::new_default(shape.channels, shape.length, shape.num_classes, backbone);
        if let Some(layers) = &self.model.layers {
            spec.layers = layers.clone();
        }
        spec.lif = self.lif;
        spec.init_gain = self.model.init_gain;
        spec
    }

    /// Full validation without training.
    pub fn validate(&self) -> Result<()> {
        if self.regimes.is_empty() {
            return Err(Error::config("regimes", "at least one regime is required"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if self.regimes[..i].contains(r) {
                return Err(Error::config("regimes", format!("{r} listed twice")));
            }
        }
        self.train.validate()?;
        self.lif.validate()?;
        match &self.data {
            DataConfig::Synthetic(s) => s.validate()?,
            DataConfig::File(f) => {
                if !(f.test_fraction > 0.0 && f.test_fraction < 1.0) {
                    return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
                }
            }
        }
        let d = &self.diagnostics;
        if d.every > 0 {
            if d.envelope_samples == 0 {
                return Err(Error::config("diagnostics.envelope_samples", "must be at least 1"));
            }
            if !(d.calibration_fraction > 0.0 && d.calibration_fraction <= 1.0) {
                return Err(Error::config("diagnostics.calibration_fraction", "must lie in (0, 1]"));
            }
            d.envelope.validate()?;
        }
        self.energy.constants().validate()?;
        for (i, &r) in self.energy.reference_rates.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("energy.reference_rates[{i}]"), "must lie in [0, 1]"));
            }
        }
        let shape = self.data_shape()?;
        self.architecture(shape, Backbone::Snn).validate()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::Synthetic(s) => Ok(data::synth_generate(s, self.seed)?.dataset),
            DataConfig::File(f) => data::ingest(
                &f.path,
                &IngestConfig {
                    test_fraction: f.test_fraction,
                    shuffle_seed: f.shuffle_seed,
                    normalize: f.normalize,
                },
            ),
        }
    }
}
