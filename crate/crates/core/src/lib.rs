//! Localization and transmit-power estimation of multiple simultaneous
//! radio transmitters from a sparse grid of RSS sensors.
//!
//! Readings are encoded as an image, translated into an image of Gaussian
//! peaks by a small fully convolutional network, and the peaks are turned
//! into coordinates by either a single-scale detector or a local-maximum
//! search. Authorized users can be removed first by a subtraction network,
//! and powers are regressed from crops around each located transmitter.

pub mod data;
pub mod detection;
pub mod encoding;
mod error;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod power;
pub mod propagation;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};

pub use data::Sample;
pub use detection::{Detection, DetectionBox, DetectorThresholds, Localizer, Variant};
pub use encoding::{LabelImage, PeakSpec, SensorImage};
pub use eval::{EvalConfig, EvalReport, MatchResult};
pub use models::{Detector, Network, PredPower, Sen2Peak, SubtractNet, TrainConfig};
pub use power::{CorrectionModel, IsolationRule};
pub use propagation::{PathLoss, PathLossModel, RadioEnvironment};
pub use rng::SeedTree;
pub use scene::{Count, FieldConfig, Point, PowerRange, Scene, SensorLayout, Transmitter, TxKind};
