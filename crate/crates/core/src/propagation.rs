//! Received signal strength under a pluggable path-loss model.
//!
//! Absolute powers are dBm, losses are dB, distances are meters. Received
//! powers from several transmitters add in the linear (mW) domain.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, Scene, SensorLayout, Transmitter};

/// Loss between a transmitter and a receiver, both in pixel coordinates.
pub trait PathLoss: Send + Sync {
    fn name(&self) -> &str;
    /// Deterministic (median) part of the loss in dB.
    fn median_loss_db(&self, tx: Point, rx: Point, pixel_size: f64) -> Result<f64>;
    /// Standard deviation of the zero-mean shadowing term, dB.
    fn shadow_sigma(&self) -> f64;
}

/// Log-distance model: `10 * alpha * log10(d) + shadowing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathLossModel {
    pub alpha: f64,
    pub shadow_sigma: f64,
    /// Distances are clamped below at this many meters.
    pub reference_distance: f64,
}

impl Default for PathLossModel {
    fn default() -> Self {
        Self {
            alpha: 3.5,
            shadow_sigma: 1.0,
            reference_distance: 1.0,
        }
    }
}

impl PathLossModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.shadow_sigma >= 0.0) {
            return Err(Error::Config(format!("shadow_sigma must be >= 0, got {}", self.shadow_sigma)));
        }
        if !(self.reference_distance > 0.0) {
            return Err(Error::Config("reference_distance must be > 0".into()));
        }
        Ok(())
    }

    pub fn median_db(&self, d: f64) -> Result<f64> {
        if !(d >= 0.0) {
            return Err(Error::Domain(format!("distance must be non-negative, got {d}")));
        }
        Ok(10.0 * self.alpha * d.max(self.reference_distance).log10())
    }
}

impl PathLoss for PathLossModel {
    fn name(&self) -> &str {
        "log-distance"
    }

    fn median_loss_db(&self, tx: Point, rx: Point, pixel_size: f64) -> Result<f64> {
        self.median_db(tx.distance(&rx) * pixel_size)
    }

    fn shadow_sigma(&self) -> f64 {
        self.shadow_sigma
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioEnvironment<M = PathLossModel> {
    pub model: M,
    /// dBm
    pub noise_floor: f64,
    /// Meters per grid cell.
    pub pixel_size: f64,
}

impl Default for RadioEnvironment<PathLossModel> {
    fn default() -> Self {
        Self {
            model: PathLossModel::default(),
            noise_floor: -80.0,
            pixel_size: 10.0,
        }
    }
}

impl<M: PathLoss> RadioEnvironment<M> {
    pub fn new(model: M, noise_floor: f64, pixel_size: f64) -> Result<Self> {
        if !(noise_floor < 0.0) {
            return Err(Error::Config(format!("noise floor must be < 0, got {noise_floor}")));
        }
        if !(pixel_size > 0.0) {
            return Err(Error::Config("pixel_size must be > 0".into()));
        }
        Ok(Self { model, noise_floor, pixel_size })
    }
}

fn shadow_draw<R: Rng + ?Sized>(sigma: f64, rng: Option<&mut R>) -> f64 {
    match rng {
        Some(rng) if sigma > 0.0 => Normal::new(0.0, sigma).expect("sigma > 0").sample(rng),
        _ => 0.0,
    }
}

/// Path loss in dB at distance `d` meters; shadowing is drawn only when an
/// RNG is supplied.
pub fn path_loss<R: Rng + ?Sized>(model: &PathLossModel, d: f64, rng: Option<&mut R>) -> Result<f64> {
    let median = model.median_db(d)?;
    Ok(median + shadow_draw(model.shadow_sigma, rng))
}

pub fn received_power<R: Rng + ?Sized>(
    env: &RadioEnvironment<PathLossModel>,
    tx_power: f64,
    d: f64,
    rng: Option<&mut R>,
) -> Result<f64> {
    Ok(tx_power - path_loss(&env.model, d, rng)?)
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Linear-domain sum of dBm levels. An empty list gives `-inf`.
pub fn aggregate_power(levels: &[f64]) -> f64 {
    mw_to_dbm(levels.iter().copied().map(dbm_to_mw).sum())
}

/// Shadowing draws, one per (transmitter, sensor) pair, indexed `[tx][sensor]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTable(pub Vec<Vec<f64>>);

impl ShadowTable {
    pub fn draw<R: Rng + ?Sized>(sigma: f64, n_tx: usize, n_sensors: usize, rng: Option<&mut R>) -> Self {
        match rng {
            Some(rng) if sigma > 0.0 => {
                let normal = Normal::new(0.0, sigma).expect("sigma > 0");
                ShadowTable(
                    (0..n_tx)
                        .map(|_| (0..n_sensors).map(|_| normal.sample(rng)).collect())
                        .collect(),
                )
            }
            _ => ShadowTable(vec![vec![0.0; n_sensors]; n_tx]),
        }
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> ShadowTable {
        ShadowTable(self.0[range].to_vec())
    }
}

/// Per-sensor received power in mW summed over `transmitters`, unfloored.
pub fn linear_contributions<M: PathLoss>(
    env: &RadioEnvironment<M>,
    transmitters: &[Transmitter],
    sensors: &SensorLayout,
    shadow: &ShadowTable,
) -> Result<Vec<f64>> {
    if shadow.0.len() != transmitters.len() {
        return Err(Error::shape(transmitters.len(), shadow.0.len()));
    }
    let positions: Vec<Point> = sensors.positions().collect();
    let mut total = vec![0.0; positions.len()];
    for (tx, shadows) in transmitters.iter().zip(&shadow.0) {
        for ((acc, rx), s) in total.iter_mut().zip(&positions).zip(shadows) {
            let loss = env.model.median_loss_db(tx.location(), *rx, env.pixel_size)? + s;
            *acc += dbm_to_mw(tx.power - loss);
        }
    }
    Ok(total)
}

/// Per-sensor readings (dBm) in layout order, floored at the noise floor.
pub fn rss_with_shadowing<M: PathLoss>(
    env: &RadioEnvironment<M>,
    transmitters: &[Transmitter],
    sensors: &SensorLayout,
    shadow: &ShadowTable,
) -> Result<Vec<f64>> {
    Ok(linear_contributions(env, transmitters, sensors, shadow)?
        .into_iter()
        .map(|mw| mw_to_dbm(mw).max(env.noise_floor))
        .collect())
}

/// Readings for every sensor of `scene` from all of its transmitters
/// (intruders and authorized users alike).
pub fn compute_rss_map<M: PathLoss, R: Rng + ?Sized>(
    env: &RadioEnvironment<M>,
    scene: &Scene,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let shadow = ShadowTable::draw(
        env.model.shadow_sigma(),
        scene.transmitters.len(),
        scene.sensors.len(),
        rng,
    );
    rss_with_shadowing(env, &scene.transmitters, &scene.sensors, &shadow)
}

/// Manifest of a precomputed loss table (e.g. exported from a terrain tool).
///
/// The companion binary file holds, for each candidate transmitter cell in
/// manifest order, a `grid_size * grid_size` row-major grid of losses in dB
/// stored as little-endian `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLossTableManifest {
    pub name: String,
    pub grid_size: usize,
    /// Candidate transmitter cells (`row * grid_size + col`).
    pub tx_cells: Vec<usize>,
    /// Path of the binary loss grid, relative to the manifest.
    pub data_file: PathBuf,
    #[serde(default)]
    pub shadow_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct PathLossTable {
    manifest: PathLossTableManifest,
    index: HashMap<usize, usize>,
    losses: Vec<f32>,
}

impl PathLossTable {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest: PathLossTableManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let bytes = fs::read(dir.join(&manifest.data_file))?;
        Self::from_parts(manifest, &bytes)
    }

    pub fn from_parts(manifest: PathLossTableManifest, bytes: &[u8]) -> Result<Self> {
        let cells = manifest.grid_size * manifest.grid_size;
        let expected = manifest.tx_cells.len() * cells * 4;
        if bytes.len() != expected {
            return Err(Error::shape(format!("{expected} bytes"), bytes.len()));
        }
        let losses = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let index = manifest
            .tx_cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        Ok(Self { manifest, index, losses })
    }

    fn cell_of(&self, p: Point) -> Result<usize> {
        let g = self.manifest.grid_size as i64;
        let (r, c) = p.cell();
        if r < 0 || c < 0 || r >= g || c >= g {
            return Err(Error::Domain(format!("point {p:?} outside {g}x{g} table")));
        }
        Ok((r * g + c) as usize)
    }
}

impl PathLoss for PathLossTable {
    fn name(&self) -> &str {
        &self.manifest.name
    }

    fn median_loss_db(&self, tx: Point, rx: Point, _pixel_size: f64) -> Result<f64> {
        let tx_cell = self.cell_of(tx)?;
        let slot = *self
            .index
            .get(&tx_cell)
            .ok_or_else(|| Error::Domain(format!("no loss grid for transmitter cell {tx_cell}")))?;
        let cells = self.manifest.grid_size * self.manifest.grid_size;
        Ok(self.losses[slot * cells + self.cell_of(rx)?] as f64)
    }

    fn shadow_sigma(&self) -> f64 {
        self.manifest.shadow_sigma
    }
}
