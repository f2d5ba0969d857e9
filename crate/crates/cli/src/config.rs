//! Experiment configuration. Every field has a default, so an empty JSON
//! object is a valid config; command-line flags override file values.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use txloc::detection::DetectorThresholds;
use txloc::{EvalConfig, FieldConfig, IsolationRule, PeakSpec, RadioEnvironment, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[value(name = "num_tx")]
    NumTx,
    Density,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NumTx => "num_tx",
            SweepAxis::Density => "density",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Sen2peak,
    Detector,
    Subtractnet,
    Predpower,
}

impl ModelKind {
    /// Architecture tag stored in checkpoint metadata.
    pub fn architecture(self) -> &'static str {
        match self {
            ModelKind::Sen2peak => "sen2peak",
            ModelKind::Detector => "detector",
            ModelKind::Subtractnet => "subtractnet",
            ModelKind::Predpower => "predpower",
        }
    }

    pub fn from_architecture(name: &str) -> Option<Self> {
        [Self::Sen2peak, Self::Detector, Self::Subtractnet, Self::Predpower]
            .into_iter()
            .find(|m| m.architecture() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCounts {
    pub train: u64,
    pub val: u64,
    /// Per test cell.
    pub test: u64,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { train: 10_000, val: 500, test: 2_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub num_tx: Vec<usize>,
    pub density: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            num_tx: (1..=10).collect(),
            density: vec![0.02, 0.04, 0.06, 0.08, 0.10],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfigs {
    pub sen2peak: TrainConfig,
    pub detector: TrainConfig,
    pub subtractnet: TrainConfig,
    pub predpower: TrainConfig,
}

impl ModelConfigs {
    pub fn get(&self, kind: ModelKind) -> &TrainConfig {
        match kind {
            ModelKind::Sen2peak => &self.sen2peak,
            ModelKind::Detector => &self.detector,
            ModelKind::Subtractnet => &self.subtractnet,
            ModelKind::Predpower => &self.predpower,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    /// Ridge penalty.
    pub alpha: f64,
    pub isolation: IsolationRule,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { alpha: 0.01, isolation: IsolationRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training distribution; test cells vary one axis of it.
    pub field: FieldConfig,
    pub propagation: RadioEnvironment,
    pub samples: SampleCounts,
    /// Models trained by `train` when `--model` is not given.
    pub models: Vec<ModelKind>,
    pub train: ModelConfigs,
    pub peak: PeakSpec,
    pub sweep: SweepConfig,
    pub thresholds: DetectorThresholds,
    pub eval: EvalConfig,
    pub correction: CorrectionConfig,
    /// Skip the check that sweep values lie in the usual ranges.
    pub allow_out_of_range: bool,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            field: FieldConfig {
                num_intruders: txloc::Count::Range([1, 10]),
                ..Default::default()
            },
            propagation: RadioEnvironment::default(),
            samples: SampleCounts::default(),
            models: vec![ModelKind::Sen2peak, ModelKind::Detector, ModelKind::Predpower],
            train: ModelConfigs::default(),
            peak: PeakSpec::default(),
            sweep: SweepConfig::default(),
            thresholds: DetectorThresholds::default(),
            eval: EvalConfig::default(),
            correction: CorrectionConfig::default(),
            allow_out_of_range: false,
            out: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.field.validate()?;
        self.peak.validate()?;
        self.thresholds.validate()?;
        self.eval.validate()?;
        self.correction.isolation.validate()?;
        for kind in [ModelKind::Sen2peak, ModelKind::Detector, ModelKind::Subtractnet, ModelKind::Predpower] {
            self.train.get(kind).validate()?;
        }
        if (self.propagation.noise_floor) >= 0.0 {
            bail!(txloc::Error::Config("noise floor must be negative".into()));
        }
        if (self.field.pixel_size - self.propagation.pixel_size).abs() > 1e-12 {
            bail!(txloc::Error::Config("field and propagation pixel sizes differ".into()));
        }
        if !self.allow_out_of_range {
            if let Some(n) = self.sweep.num_tx.iter().find(|&&n| !(1..=10).contains(&n)) {
                bail!(txloc::Error::Config(format!("num_tx sweep value {n} outside [1, 10]")));
            }
            if let Some(d) = self.sweep.density.iter().find(|&&d| !(d > 0.0 && d <= 0.5)) {
                bail!(txloc::Error::Config(format!("density sweep value {d} outside (0, 0.5]")));
            }
        }
        Ok(())
    }
}
